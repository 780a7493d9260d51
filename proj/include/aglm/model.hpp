// Decoder-only transformer with pre-norm blocks, learned positional
// embeddings, and an output head tied to the token embedding. Parameters live
// in a flat named store; the forward pass wires them onto an autodiff tape.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aglm/errors.hpp"
#include "aglm/graph.hpp"
#include "aglm/rng.hpp"
#include "aglm/tensor.hpp"

namespace aglm {

struct ModelConfig {
    std::size_t vocab_size = 50257;
    std::size_t context_length = 256;
    std::size_t embed_dim = 768;
    std::size_t n_heads = 12;
    std::size_t n_layers = 12;
    double dropout = 0.1;
    bool qkv_bias = false;
    std::size_t ffn_mult = 4;

    std::size_t head_dim() const { return embed_dim / n_heads; }

    void validate() const {
        if (vocab_size == 0) fail(Error::Kind::input, "model: vocab_size must be positive");
        if (context_length == 0) {
            fail(Error::Kind::input, "model: context_length must be positive");
        }
        if (embed_dim == 0) fail(Error::Kind::input, "model: embed_dim must be positive");
        if (n_heads == 0) fail(Error::Kind::input, "model: n_heads must be positive");
        if (n_layers == 0) fail(Error::Kind::input, "model: n_layers must be positive");
        if (ffn_mult == 0) fail(Error::Kind::input, "model: ffn_mult must be positive");
        if (embed_dim % n_heads != 0) {
            fail(Error::Kind::input, "model: embed_dim ", embed_dim,
                 " is not divisible by n_heads ", n_heads);
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) {
            fail(Error::Kind::input, "model: dropout ", dropout, " must be in [0, 1)");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

enum class InitKind { normal, ones, zeros };

struct ParamSpec {
    std::string name;
    std::vector<std::size_t> shape;
    InitKind init;
};

// Parameter order is fixed; it defines both the initialization sequence and
// the checkpoint layout.
inline std::vector<ParamSpec> model_layout(const ModelConfig& cfg) {
    cfg.validate();
    std::size_t d = cfg.embed_dim;
    std::size_t f = cfg.ffn_mult * d;
    std::vector<ParamSpec> specs;
    specs.push_back({"token_embedding", {cfg.vocab_size, d}, InitKind::normal});
    specs.push_back({"positional_embedding", {cfg.context_length, d}, InitKind::normal});
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        std::string base = "layers." + std::to_string(i) + ".";
        specs.push_back({base + "ln1.gain", {d}, InitKind::ones});
        specs.push_back({base + "ln1.bias", {d}, InitKind::zeros});
        specs.push_back({base + "attn.qkv_weight", {d, 3 * d}, InitKind::normal});
        if (cfg.qkv_bias) {
            specs.push_back({base + "attn.qkv_bias", {3 * d}, InitKind::zeros});
        }
        specs.push_back({base + "attn.proj_weight", {d, d}, InitKind::normal});
        specs.push_back({base + "attn.proj_bias", {d}, InitKind::zeros});
        specs.push_back({base + "ln2.gain", {d}, InitKind::ones});
        specs.push_back({base + "ln2.bias", {d}, InitKind::zeros});
        specs.push_back({base + "ffn.w1", {d, f}, InitKind::normal});
        specs.push_back({base + "ffn.b1", {f}, InitKind::zeros});
        specs.push_back({base + "ffn.w2", {f, d}, InitKind::normal});
        specs.push_back({base + "ffn.b2", {d}, InitKind::zeros});
    }
    specs.push_back({"final_ln.gain", {d}, InitKind::ones});
    specs.push_back({"final_ln.bias", {d}, InitKind::zeros});
    return specs;
}

// Trainable scalar count. The output head shares the token embedding, so it
// contributes nothing extra.
inline std::size_t count_params(const ModelConfig& cfg) {
    std::size_t total = 0;
    for (const ParamSpec& s : model_layout(cfg)) {
        std::size_t n = 1;
        for (std::size_t dim : s.shape) n *= dim;
        total += n;
    }
    return total;
}

template <typename T>
class ParameterStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        Tensor<T> grad;  // empty until ensure_grads()
    };

    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) = default;
    ParameterStore& operator=(ParameterStore&&) = default;

    // Weights ~ Normal(0, 0.02) drawn from one sequential stream in layout
    // order, norm gains 1, biases 0.
    static ParameterStore init(const ModelConfig& cfg, std::uint64_t seed) {
        ParameterStore store(cfg);
        Rng rng(seed);
        for (Entry& e : store.entries_) {
            InitKind kind = store.specs_[store.index_.at(e.name)].init;
            if (kind == InitKind::normal) {
                rng.fill_normal(e.value.data(), 0.0, 0.02);
            } else if (kind == InitKind::ones) {
                e.value.fill(T{1});
            }
        }
        return store;
    }

    static ParameterStore zeros(const ModelConfig& cfg) { return ParameterStore(cfg); }

    const ModelConfig& config() const { return cfg_; }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    Entry& find(std::string_view name) {
        auto it = index_.find(name);
        if (it == index_.end()) {
            fail(Error::Kind::contract, "unknown parameter \"", std::string(name), "\"");
        }
        return entries_[it->second];
    }
    const Entry& find(std::string_view name) const {
        return const_cast<ParameterStore*>(this)->find(name);
    }

    bool has_grads() const { return !entries_.empty() && entries_.front().grad.numel() != 0; }

    void ensure_grads() {
        for (Entry& e : entries_) {
            if (e.grad.numel() == 0) e.grad = Tensor<T>::zeros(e.value.shape());
        }
    }

    void zero_grads() {
        for (Entry& e : entries_) {
            if (e.grad.numel() != 0) e.grad.fill(T{});
        }
    }

    ParameterStore clone() const {
        ParameterStore copy(cfg_);
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            copy.entries_[i].value = entries_[i].value.clone();
        }
        return copy;
    }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const Entry& e : entries_) n += e.value.numel();
        return n;
    }

private:
    explicit ParameterStore(const ModelConfig& cfg) : cfg_(cfg), specs_(model_layout(cfg)) {
        entries_.reserve(specs_.size());
        for (std::size_t i = 0; i < specs_.size(); ++i) {
            entries_.push_back(Entry{specs_[i].name, Tensor<T>::zeros(specs_[i].shape), {}});
            index_.emplace(specs_[i].name, i);
        }
    }

    ModelConfig cfg_;
    std::vector<ParamSpec> specs_;
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

struct TokenBatch {
    std::vector<std::int32_t> ids;  // row-major [batch, seq]
    std::size_t batch = 0;
    std::size_t seq = 0;
};

// Builds the forward graph for one batch. Dropout draws from *rng only when
// training and the rate is positive; inference passes nullptr.
template <typename T>
class TapedModel {
public:
    TapedModel(Graph<T>& g, ParameterStore<T>& store) : g_(g), store_(store) {}

    const ModelConfig& config() const { return store_.config(); }

    // Returns logits with shape [batch, seq, vocab].
    Var logits(const TokenBatch& batch, Rng* rng, bool training) {
        const ModelConfig& cfg = config();
        if (batch.batch == 0 || batch.seq == 0 ||
            batch.ids.size() != batch.batch * batch.seq) {
            fail(Error::Kind::contract, "token batch of ", batch.ids.size(),
                 " ids does not match shape [", batch.batch, ", ", batch.seq, "]");
        }
        if (batch.seq > cfg.context_length) {
            fail(Error::Kind::input, "sequence length ", batch.seq,
                 " exceeds model context length ", cfg.context_length);
        }
        std::size_t b = batch.batch;
        std::size_t t = batch.seq;
        std::size_t d = cfg.embed_dim;

        std::vector<std::int32_t> positions(b * t);
        for (std::size_t r = 0; r < b; ++r) {
            for (std::size_t j = 0; j < t; ++j) {
                positions[r * t + j] = static_cast<std::int32_t>(j);
            }
        }
        Var tok = g_.embedding(p("token_embedding"), batch.ids);
        Var pos = g_.embedding(p("positional_embedding"), std::move(positions));
        Var x = g_.reshape(g_.add(tok, pos), {b, t, d});
        x = drop(x, rng, training);

        for (std::size_t i = 0; i < cfg.n_layers; ++i) {
            std::string base = "layers." + std::to_string(i) + ".";
            Var normed = g_.layer_norm(x, p(base + "ln1.gain"), p(base + "ln1.bias"));
            Var att = attention(normed, i, rng, training);
            x = g_.add(x, drop(att, rng, training));

            normed = g_.layer_norm(x, p(base + "ln2.gain"), p(base + "ln2.bias"));
            Var h = g_.reshape(normed, {b * t, d});
            h = g_.add_bias(g_.matmul(h, p(base + "ffn.w1")), p(base + "ffn.b1"));
            h = g_.gelu(h);
            h = g_.add_bias(g_.matmul(h, p(base + "ffn.w2")), p(base + "ffn.b2"));
            Var ffn = g_.reshape(h, {b, t, d});
            x = g_.add(x, drop(ffn, rng, training));
        }

        x = g_.layer_norm(x, p("final_ln.gain"), p("final_ln.bias"));
        Var flat = g_.reshape(x, {b * t, d});
        Var out = g_.matmul(flat, p("token_embedding"), /*transpose_b=*/true);
        return g_.reshape(out, {b, t, cfg.vocab_size});
    }

    // Causal multi-head self-attention on a [batch, seq, embed] input.
    Var attention(Var x, std::size_t layer, Rng* rng, bool training) {
        const ModelConfig& cfg = config();
        std::size_t b = g_.value(x).dim(0);
        std::size_t t = g_.value(x).dim(1);
        std::size_t d = cfg.embed_dim;
        std::size_t h = cfg.n_heads;
        std::size_t hd = cfg.head_dim();
        std::string base = "layers." + std::to_string(layer) + ".attn.";

        Var flat = g_.reshape(x, {b * t, d});
        Var qkv = g_.matmul(flat, p(base + "qkv_weight"));
        if (cfg.qkv_bias) qkv = g_.add_bias(qkv, p(base + "qkv_bias"));

        auto heads = [&](Var part) {
            Var r = g_.reshape(part, {b, t, h, hd});
            return g_.reshape(g_.swap_axes12(r), {b * h, t, hd});
        };
        Var q = heads(g_.slice_last(qkv, 0, d));
        Var k = heads(g_.slice_last(qkv, d, d));
        Var v = heads(g_.slice_last(qkv, 2 * d, d));

        Var scores = g_.scale(g_.bmm(q, k, /*transpose_b=*/true),
                              static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
        Var att = g_.softmax_last(g_.causal_mask(scores));
        att = drop(att, rng, training);

        Var ctx = g_.bmm(att, v);
        ctx = g_.reshape(g_.swap_axes12(g_.reshape(ctx, {b, h, t, hd})), {b * t, d});
        Var out = g_.add_bias(g_.matmul(ctx, p(base + "proj_weight")), p(base + "proj_bias"));
        return g_.reshape(out, {b, t, d});
    }

private:
    Var p(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        auto& entry = store_.find(name);
        Var v = g_.param(entry.value, entry.grad);
        cache_.emplace(name, v);
        return v;
    }

    Var drop(Var v, Rng* rng, bool training) {
        double rate = config().dropout;
        if (!training || rate == 0.0) return v;
        if (rng == nullptr) {
            fail(Error::Kind::contract, "training forward with dropout needs an rng");
        }
        return g_.dropout(v, rate, *rng, training);
    }

    Graph<T>& g_;
    ParameterStore<T>& store_;
    std::map<std::string, Var> cache_;
};

// Mean next-token cross entropy for [batch, seq, vocab] logits.
template <typename T>
Var lm_loss(Graph<T>& g, Var logits, std::vector<std::int32_t> targets) {
    const Tensor<T>& lv = g.value(logits);
    if (lv.rank() != 3) {
        fail(Error::Kind::contract, "lm_loss expects [batch, seq, vocab] logits, got ",
             shape_str(lv.shape()));
    }
    Var flat = g.reshape(logits, {lv.dim(0) * lv.dim(1), lv.dim(2)});
    return g.cross_entropy(flat, std::move(targets));
}

}  // namespace aglm
