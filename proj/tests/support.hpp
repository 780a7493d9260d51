// Shared helpers for the test suite: temp directories, finite-difference
// gradient checking against the double-precision graph, random UTF-8
// fuzzing, and an in-process CLI driver.
#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "aglm/cli.hpp"
#include "aglm/graph.hpp"
#include "aglm/model.hpp"
#include "aglm/rng.hpp"
#include "aglm/tensor.hpp"
#include "aglm/utf8.hpp"

namespace support {

namespace fs = std::filesystem;

class TempDir {
public:
    TempDir() {
        std::string tmpl = (fs::temp_directory_path() / "aglm-test-XXXXXX").string();
        std::vector<char> buf(tmpl.begin(), tmpl.end());
        buf.push_back('\0');
        if (mkdtemp(buf.data()) == nullptr) {
            throw std::runtime_error("mkdtemp failed");
        }
        path_ = buf.data();
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline void write_file(const fs::path& p, std::string_view content) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
//
// The builder gets a fresh graph plus one Var per input tensor and returns a
// scalar loss. Analytic gradients come from one reverse pass; numeric ones
// from central differences with a fresh forward graph per probe, all in
// double precision.

using LossBuilder =
    std::function<aglm::Var(aglm::Graph<double>&, const std::vector<aglm::Var>&)>;

struct GradCheckResult {
    bool ok = true;
    std::size_t checked = 0;
    double worst_abs_err = 0.0;
    std::string worst_where;
};

inline double forward_only(const LossBuilder& build,
                           const std::vector<aglm::Tensor<double>>& inputs) {
    aglm::Graph<double> g;
    std::vector<aglm::Var> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(g.leaf(t.clone()));
    aglm::Var loss = build(g, vars);
    return g.value(loss).at(0);
}

inline GradCheckResult check_gradients(const LossBuilder& build,
                                       std::vector<aglm::Tensor<double>> inputs,
                                       double step = 1e-5, double tol = 1e-4) {
    GradCheckResult res;

    aglm::Graph<double> g;
    std::vector<aglm::Var> vars;
    std::vector<aglm::Tensor<double>> grads;
    for (const auto& t : inputs) {
        aglm::Tensor<double> grad = aglm::Tensor<double>::zeros(t.shape());
        grads.push_back(grad);
        vars.push_back(g.param(t.clone(), grad));
    }
    aglm::Var loss = build(g, vars);
    g.backward(loss);

    for (std::size_t which = 0; which < inputs.size(); ++which) {
        for (std::size_t i = 0; i < inputs[which].numel(); ++i) {
            double saved = inputs[which].at(i);
            inputs[which].at(i) = saved + step;
            double up = forward_only(build, inputs);
            inputs[which].at(i) = saved - step;
            double down = forward_only(build, inputs);
            inputs[which].at(i) = saved;

            double numeric = (up - down) / (2.0 * step);
            double analytic = grads[which].at(i);
            double err = std::abs(numeric - analytic);
            double bound = tol * std::max({1.0, std::abs(numeric), std::abs(analytic)});
            ++res.checked;
            if (err > res.worst_abs_err) {
                res.worst_abs_err = err;
                res.worst_where = "input " + std::to_string(which) + " element " +
                                  std::to_string(i) + ": analytic " + std::to_string(analytic) +
                                  " numeric " + std::to_string(numeric);
            }
            if (err > bound) res.ok = false;
        }
    }
    return res;
}

inline aglm::Tensor<double> random_tensor(std::vector<std::size_t> shape, aglm::Rng& rng,
                                          double stddev = 1.0) {
    aglm::Tensor<double> t(std::move(shape));
    rng.fill_normal(t.data(), 0.0, stddev);
    return t;
}

// Reduces an arbitrary-shaped op output to a scalar with fixed random
// weights, so every output element contributes a distinct gradient.
inline aglm::Var weighted_sum(aglm::Graph<double>& g, aglm::Var x, std::uint64_t seed) {
    aglm::Rng rng(seed);
    aglm::Tensor<double> w(g.value(x).shape());
    rng.fill_normal(w.data(), 0.0, 1.0);
    return g.sum(g.mul(x, g.leaf(std::move(w))));
}

// ---------------------------------------------------------------------------
// Whole-model gradient check: analytic gradients from one reverse pass over
// the taped transformer against central differences on every parameter
// element, all in double precision.

inline double model_loss_forward(aglm::ParameterStore<double>& store,
                                 const aglm::TokenBatch& batch,
                                 const std::vector<std::int32_t>& targets) {
    aglm::Graph<double> g;
    aglm::TapedModel<double> model(g, store);
    aglm::Var loss = aglm::lm_loss(g, model.logits(batch, nullptr, false), targets);
    return g.value(loss).at(0);
}

inline GradCheckResult model_gradient_check(const aglm::ModelConfig& cfg, std::uint64_t seed,
                                            double step = 1e-5, double tol = 1e-4) {
    auto store = aglm::ParameterStore<double>::init(cfg, seed);
    aglm::Rng data_rng = aglm::Rng(seed).split(555);
    aglm::TokenBatch batch;
    batch.batch = 2;
    batch.seq = cfg.context_length;
    std::vector<std::int32_t> targets;
    for (std::size_t i = 0; i < batch.batch * batch.seq; ++i) {
        batch.ids.push_back(static_cast<std::int32_t>(data_rng.next_below(cfg.vocab_size)));
        targets.push_back(static_cast<std::int32_t>(data_rng.next_below(cfg.vocab_size)));
    }

    store.ensure_grads();
    store.zero_grads();
    {
        aglm::Graph<double> g;
        aglm::TapedModel<double> model(g, store);
        aglm::Var loss = aglm::lm_loss(g, model.logits(batch, nullptr, false), targets);
        g.backward(loss);
    }

    GradCheckResult res;
    for (auto& entry : store.entries()) {
        for (std::size_t i = 0; i < entry.value.numel(); ++i) {
            double saved = entry.value.at(i);
            entry.value.at(i) = saved + step;
            double up = model_loss_forward(store, batch, targets);
            entry.value.at(i) = saved - step;
            double down = model_loss_forward(store, batch, targets);
            entry.value.at(i) = saved;

            double numeric = (up - down) / (2.0 * step);
            double analytic = entry.grad.at(i);
            double err = std::abs(numeric - analytic);
            double bound = tol * std::max({1.0, std::abs(numeric), std::abs(analytic)});
            ++res.checked;
            if (err > res.worst_abs_err) {
                res.worst_abs_err = err;
                res.worst_where = entry.name + "[" + std::to_string(i) + "]: analytic " +
                                  std::to_string(analytic) + " numeric " +
                                  std::to_string(numeric);
            }
            if (err > bound) res.ok = false;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Random valid UTF-8, covering 1- to 4-byte sequences.

inline std::string random_utf8(aglm::Rng& rng, std::size_t codepoints) {
    std::string out;
    for (std::size_t i = 0; i < codepoints; ++i) {
        std::uint32_t cp = 0;
        switch (rng.next_below(4)) {
            case 0: cp = static_cast<std::uint32_t>(rng.next_below(0x80)); break;
            case 1: cp = 0x80 + static_cast<std::uint32_t>(rng.next_below(0x800 - 0x80)); break;
            case 2:
                do {
                    cp = 0x800 + static_cast<std::uint32_t>(rng.next_below(0x10000 - 0x800));
                } while (cp >= 0xD800 && cp <= 0xDFFF);
                break;
            default:
                cp = 0x10000 + static_cast<std::uint32_t>(rng.next_below(0x110000 - 0x10000));
                break;
        }
        aglm::utf8::encode(cp, out);
    }
    return out;
}

// ---------------------------------------------------------------------------
// In-process CLI driver.

struct CliResult {
    int code = 0;
    std::string out;
    std::string err;
};

inline CliResult run_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    CliResult r;
    r.code = aglm::cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

}  // namespace support
