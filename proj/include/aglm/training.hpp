// Training loop: windowed next-token batches, AdamW with global gradient
// clipping, periodic validation, and patience-based early stopping that keeps
// a snapshot of the best weights.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "aglm/errors.hpp"
#include "aglm/graph.hpp"
#include "aglm/model.hpp"
#include "aglm/rng.hpp"
#include "aglm/tensor.hpp"

namespace aglm {

struct TrainConfig {
    double learning_rate = 3e-4;
    std::size_t batch_size = 8;
    std::size_t epochs = 20;
    std::size_t max_steps = 0;  // 0 = no cap
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;  // 0 disables clipping
    std::size_t eval_interval = 100;
    std::size_t early_stop_patience = 5;  // 0 disables early stopping
    double min_improvement = 1e-4;
    std::size_t window_stride = 0;  // 0 = context length (non-overlapping)
    std::uint64_t seed = 42;

    void validate() const {
        if (!(learning_rate > 0.0)) {
            fail(Error::Kind::input, "train: learning_rate must be positive");
        }
        if (batch_size == 0) fail(Error::Kind::input, "train: batch_size must be positive");
        if (epochs == 0) fail(Error::Kind::input, "train: epochs must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) {
            fail(Error::Kind::input, "train: beta1 must be in [0, 1)");
        }
        if (!(beta2 >= 0.0 && beta2 < 1.0)) {
            fail(Error::Kind::input, "train: beta2 must be in [0, 1)");
        }
        if (!(adam_eps > 0.0)) fail(Error::Kind::input, "train: adam_eps must be positive");
        if (!(grad_clip >= 0.0)) {
            fail(Error::Kind::input, "train: grad_clip must be non-negative");
        }
        if (!(weight_decay >= 0.0)) {
            fail(Error::Kind::input, "train: weight_decay must be non-negative");
        }
        if (eval_interval == 0) {
            fail(Error::Kind::input, "train: eval_interval must be positive");
        }
        if (!(min_improvement >= 0.0)) {
            fail(Error::Kind::input, "train: min_improvement must be non-negative");
        }
    }

    bool operator==(const TrainConfig&) const = default;
};

// Start offsets of fixed-length windows over a token stream. A window at s
// consumes tokens [s, s+context] so the last one still has a target.
inline std::vector<std::size_t> make_windows(std::size_t n_tokens, std::size_t context,
                                             std::size_t stride) {
    std::vector<std::size_t> starts;
    if (stride == 0) stride = context;
    for (std::size_t s = 0; s + context + 1 <= n_tokens; s += stride) {
        starts.push_back(s);
    }
    return starts;
}

template <typename T>
struct OptimizerState {
    std::uint64_t step = 0;
    std::vector<Tensor<T>> m;  // parallel to store entries
    std::vector<Tensor<T>> v;

    static OptimizerState zeros_like(const ParameterStore<T>& store) {
        OptimizerState s;
        for (const auto& e : store.entries()) {
            s.m.push_back(Tensor<T>::zeros(e.value.shape()));
            s.v.push_back(Tensor<T>::zeros(e.value.shape()));
        }
        return s;
    }

    OptimizerState clone() const {
        OptimizerState s;
        s.step = step;
        for (const auto& t : m) s.m.push_back(t.clone());
        for (const auto& t : v) s.v.push_back(t.clone());
        return s;
    }
};

// Decoupled weight decay applies only to matrices outside the embeddings;
// vectors (biases, norm gains) and embedding tables decay nothing.
inline bool decays(const std::string& name, std::size_t rank) {
    return rank >= 2 && name.find("embedding") == std::string::npos;
}

// One AdamW update over the store's accumulated gradients. The global norm is
// clipped before the moment updates; all scalar math runs in double. Returns
// the pre-clip gradient norm. Non-finite gradients or updated values raise a
// numeric error naming the parameter.
template <typename T>
double adamw_step(ParameterStore<T>& store, OptimizerState<T>& opt, const TrainConfig& cfg) {
    auto& entries = store.entries();
    if (!store.has_grads()) {
        fail(Error::Kind::contract, "adamw_step: parameter store has no gradients");
    }
    if (opt.m.size() != entries.size()) {
        fail(Error::Kind::contract, "adamw_step: optimizer state does not match the store");
    }

    double norm_sq = 0.0;
    for (const auto& e : entries) {
        for (T g : e.grad.data()) {
            double gd = static_cast<double>(g);
            if (!std::isfinite(gd)) {
                fail(Error::Kind::numeric, "non-finite gradient for parameter \"", e.name, "\"");
            }
            norm_sq += gd * gd;
        }
    }
    double norm = std::sqrt(norm_sq);
    double scale = 1.0;
    if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) scale = cfg.grad_clip / norm;

    opt.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));

    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto& e = entries[i];
        bool decay = decays(e.name, e.value.rank());
        T* val = e.value.ptr();
        const T* grad = e.grad.ptr();
        T* mp = opt.m[i].ptr();
        T* vp = opt.v[i].ptr();
        for (std::size_t j = 0; j < e.value.numel(); ++j) {
            double g = static_cast<double>(grad[j]) * scale;
            double m = cfg.beta1 * static_cast<double>(mp[j]) + (1.0 - cfg.beta1) * g;
            double v = cfg.beta2 * static_cast<double>(vp[j]) + (1.0 - cfg.beta2) * g * g;
            mp[j] = static_cast<T>(m);
            vp[j] = static_cast<T>(v);
            double update = cfg.learning_rate * (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
            double x = static_cast<double>(val[j]) - update;
            if (decay) x -= cfg.learning_rate * cfg.weight_decay * static_cast<double>(val[j]);
            if (!std::isfinite(x)) {
                fail(Error::Kind::numeric, "non-finite update for parameter \"", e.name, "\"");
            }
            val[j] = static_cast<T>(x);
        }
    }
    return norm;
}

namespace detail {

inline TokenBatch gather_batch(const std::vector<std::int32_t>& ids,
                               const std::vector<std::size_t>& starts, std::size_t first,
                               std::size_t count, std::size_t context,
                               std::vector<std::int32_t>& targets) {
    TokenBatch batch;
    batch.batch = count;
    batch.seq = context;
    batch.ids.reserve(count * context);
    targets.clear();
    targets.reserve(count * context);
    for (std::size_t w = 0; w < count; ++w) {
        std::size_t s = starts[first + w];
        for (std::size_t j = 0; j < context; ++j) {
            batch.ids.push_back(ids[s + j]);
            targets.push_back(ids[s + j + 1]);
        }
    }
    return batch;
}

}  // namespace detail

struct EvalResult {
    double loss = 0.0;
    double perplexity = 0.0;
    std::size_t windows = 0;
};

// Mean next-token cross entropy over non-overlapping full windows, with
// dropout disabled. Perplexity is exp of that loss.
template <typename T>
EvalResult evaluate(ParameterStore<T>& store, const std::vector<std::int32_t>& ids,
                    std::size_t batch_size = 8) {
    if (batch_size == 0) fail(Error::Kind::contract, "evaluate: batch_size must be positive");
    std::size_t context = store.config().context_length;
    std::vector<std::size_t> starts = make_windows(ids.size(), context, context);
    if (starts.empty()) {
        fail(Error::Kind::input, "evaluation split has ", ids.size(),
             " tokens; need at least ", context + 1);
    }
    double total = 0.0;
    std::size_t total_tokens = 0;
    std::vector<std::int32_t> targets;
    for (std::size_t first = 0; first < starts.size(); first += batch_size) {
        std::size_t count = std::min(batch_size, starts.size() - first);
        TokenBatch batch = detail::gather_batch(ids, starts, first, count, context, targets);
        Graph<T> g;
        TapedModel<T> model(g, store);
        Var logits = model.logits(batch, nullptr, /*training=*/false);
        Var loss = lm_loss(g, logits, targets);
        std::size_t tokens = count * context;
        total += static_cast<double>(g.value(loss).at(0)) * static_cast<double>(tokens);
        total_tokens += tokens;
    }
    EvalResult r;
    r.loss = total / static_cast<double>(total_tokens);
    r.perplexity = std::exp(r.loss);
    r.windows = starts.size();
    return r;
}

struct EvalPoint {
    std::size_t step = 0;
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_perplexity = 0.0;
};

template <typename T>
struct TrainResult {
    ParameterStore<T> params;       // final weights; equals best when early-stopped
    OptimizerState<T> opt;
    ParameterStore<T> best_params;  // lowest validation loss seen
    OptimizerState<T> best_opt;
    double best_val_loss = 0.0;
    std::size_t best_step = 0;
    std::uint64_t steps = 0;
    std::string stop_reason;  // "completed", "early_stopped", or "max_steps"
    std::vector<EvalPoint> history;
};

// Runs the full loop. Windows are reshuffled every epoch from a per-epoch
// stream; dropout draws from its own stream; both derive from cfg.seed, so a
// given (params, data, cfg) triple always produces identical results.
template <typename T>
TrainResult<T> train(ParameterStore<T> params, const std::vector<std::int32_t>& train_ids,
                     const std::vector<std::int32_t>& val_ids, const TrainConfig& cfg,
                     const std::function<void(const EvalPoint&)>& on_eval = {}) {
    cfg.validate();
    const ModelConfig& mcfg = params.config();
    std::size_t context = mcfg.context_length;
    std::size_t stride = cfg.window_stride == 0 ? context : cfg.window_stride;
    std::vector<std::size_t> starts = make_windows(train_ids.size(), context, stride);
    if (starts.empty()) {
        fail(Error::Kind::input, "training split has ", train_ids.size(),
             " tokens; need at least ", context + 1);
    }
    if (make_windows(val_ids.size(), context, context).empty()) {
        fail(Error::Kind::input, "validation split has ", val_ids.size(),
             " tokens; need at least ", context + 1);
    }

    params.ensure_grads();
    OptimizerState<T> opt = OptimizerState<T>::zeros_like(params);
    Rng dropout_rng = Rng(cfg.seed).split(1);

    std::optional<ParameterStore<T>> best_params;
    std::optional<OptimizerState<T>> best_opt;
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t best_step = 0;
    std::size_t strikes = 0;
    std::string stop_reason = "completed";
    std::vector<EvalPoint> history;

    std::uint64_t step = 0;
    std::size_t steps_at_last_eval = 0;
    double running_loss = 0.0;
    std::size_t running_count = 0;
    bool stop = false;

    auto do_eval = [&](std::size_t epoch1) {
        EvalResult val = evaluate(params, val_ids, cfg.batch_size);
        EvalPoint point;
        point.step = static_cast<std::size_t>(step);
        point.epoch = epoch1;
        point.train_loss = running_count ? running_loss / static_cast<double>(running_count)
                                         : std::numeric_limits<double>::quiet_NaN();
        point.val_loss = val.loss;
        point.val_perplexity = val.perplexity;
        history.push_back(point);
        if (on_eval) on_eval(point);
        running_loss = 0.0;
        running_count = 0;
        steps_at_last_eval = static_cast<std::size_t>(step);

        bool first = !std::isfinite(best_val);
        double improvement = best_val - val.loss;
        if (val.loss < best_val) {
            best_val = val.loss;
            best_step = point.step;
            best_params = params.clone();
            best_opt = opt.clone();
        }
        if (!first && improvement < cfg.min_improvement) {
            ++strikes;
            if (cfg.early_stop_patience > 0 && strikes >= cfg.early_stop_patience) {
                stop_reason = "early_stopped";
                stop = true;
            }
        } else {
            strikes = 0;
        }
    };

    std::size_t epoch1 = 1;
    for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
        epoch1 = epoch + 1;
        std::vector<std::size_t> order = starts;
        Rng epoch_rng = Rng(cfg.seed).split(1000 + epoch);
        epoch_rng.shuffle(order);
        std::vector<std::int32_t> targets;
        for (std::size_t first = 0; first < order.size() && !stop; first += cfg.batch_size) {
            std::size_t count = std::min(cfg.batch_size, order.size() - first);
            TokenBatch batch = detail::gather_batch(train_ids, order, first, count, context,
                                                    targets);
            Graph<T> g;
            TapedModel<T> model(g, params);
            Var logits = model.logits(batch, &dropout_rng, /*training=*/true);
            Var loss = lm_loss(g, logits, targets);
            params.zero_grads();
            g.backward(loss);
            adamw_step(params, opt, cfg);
            ++step;
            running_loss += static_cast<double>(g.value(loss).at(0));
            ++running_count;
            if (step % cfg.eval_interval == 0) do_eval(epoch1);
            if (!stop && cfg.max_steps > 0 && step >= cfg.max_steps) {
                stop_reason = "max_steps";
                stop = true;
            }
        }
    }
    if (steps_at_last_eval != step) do_eval(epoch1);

    if (stop_reason == "early_stopped") {
        // Training continues from the best snapshot, not the strike run.
        params = best_params->clone();
        params.ensure_grads();
        opt = best_opt->clone();
    }
    if (!best_params) {
        best_params = params.clone();
        best_opt = opt.clone();
        best_val = history.empty() ? std::numeric_limits<double>::quiet_NaN() : best_val;
    }

    TrainResult<T> result{std::move(params),
                          std::move(opt),
                          std::move(*best_params),
                          std::move(*best_opt),
                          best_val,
                          best_step,
                          step,
                          std::move(stop_reason),
                          std::move(history)};
    return result;
}

}  // namespace aglm
