// Autoregressive sampling. Each step runs a full forward pass over the last
// context window, filters the final-position logits by temperature and top-k,
// and draws from the resulting distribution with a stream seeded per run.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aglm/errors.hpp"
#include "aglm/graph.hpp"
#include "aglm/model.hpp"
#include "aglm/rng.hpp"
#include "aglm/tokenizer.hpp"

namespace aglm {

struct SamplingConfig {
    std::size_t max_new_tokens = 100;
    double temperature = 1.0;  // 0 = greedy
    std::size_t top_k = 0;     // 0 = full vocabulary
    std::uint64_t seed = 42;
    bool stop_at_end_of_text = true;

    void validate() const {
        if (!(temperature >= 0.0)) {
            fail(Error::Kind::input, "sampling temperature ", temperature,
                 " must be non-negative");
        }
    }
};

// Turns one row of logits into a probability vector. Temperature 0 puts all
// mass on the argmax (smallest id on ties); top_k keeps the k largest logits
// (ties again toward smaller ids) and renormalizes. Runs in double so the
// result sums to 1 regardless of T.
template <typename T>
std::vector<double> sampling_distribution(std::span<const T> logits, double temperature,
                                          std::size_t top_k) {
    if (!(temperature >= 0.0)) {
        fail(Error::Kind::input, "sampling temperature ", temperature, " must be non-negative");
    }
    std::size_t v = logits.size();
    if (v == 0) fail(Error::Kind::contract, "sampling_distribution: empty logits");
    std::vector<double> dist(v, 0.0);

    if (temperature == 0.0) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < v; ++j) {
            if (static_cast<double>(logits[j]) > static_cast<double>(logits[best])) best = j;
        }
        dist[best] = 1.0;
        return dist;
    }

    std::vector<std::size_t> keep;
    if (top_k > 0 && top_k < v) {
        std::vector<std::size_t> order(v);
        for (std::size_t j = 0; j < v; ++j) order[j] = j;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            double la = static_cast<double>(logits[a]);
            double lb = static_cast<double>(logits[b]);
            if (la != lb) return la > lb;
            return a < b;
        });
        keep.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k));
    } else {
        keep.resize(v);
        for (std::size_t j = 0; j < v; ++j) keep[j] = j;
    }

    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j : keep) {
        mx = std::max(mx, static_cast<double>(logits[j]) / temperature);
    }
    double sum = 0.0;
    for (std::size_t j : keep) {
        double e = std::exp(static_cast<double>(logits[j]) / temperature - mx);
        dist[j] = e;
        sum += e;
    }
    for (std::size_t j : keep) dist[j] /= sum;
    return dist;
}

// Forward pass over the last <= context ids; returns the filtered next-token
// distribution at the final position.
template <typename T>
std::vector<double> next_token_distribution(ParameterStore<T>& params,
                                            const std::vector<std::int32_t>& ids,
                                            double temperature, std::size_t top_k) {
    if (ids.empty()) {
        fail(Error::Kind::contract, "next_token_distribution: empty id sequence");
    }
    std::size_t context = params.config().context_length;
    std::size_t len = std::min(ids.size(), context);
    TokenBatch batch;
    batch.batch = 1;
    batch.seq = len;
    batch.ids.assign(ids.end() - static_cast<std::ptrdiff_t>(len), ids.end());
    Graph<T> g;
    TapedModel<T> model(g, params);
    Var logits = model.logits(batch, nullptr, /*training=*/false);
    const Tensor<T>& lv = g.value(logits);
    std::size_t vocab = lv.dim(2);
    std::span<const T> row{lv.ptr() + (len - 1) * vocab, vocab};
    return sampling_distribution(row, temperature, top_k);
}

struct GenerationResult {
    std::vector<std::int32_t> prompt_ids;
    std::vector<std::int32_t> generated_ids;
    std::string text;  // decoded generated_ids only
    bool hit_end = false;
};

// Samples up to max_new_tokens continuations of the prompt. An empty prompt
// is seeded with END_OF_TEXT so the model starts from a document boundary.
inline GenerationResult generate(ParameterStore<float>& params, const Tokenizer& tokenizer,
                                 std::string_view prompt, const SamplingConfig& cfg) {
    cfg.validate();
    GenerationResult result;
    result.prompt_ids = tokenizer.encode(prompt);
    if (result.prompt_ids.empty()) {
        result.prompt_ids.push_back(Tokenizer::kEndOfText);
    }

    std::vector<std::int32_t> ids = result.prompt_ids;
    Rng rng(cfg.seed);
    for (std::size_t n = 0; n < cfg.max_new_tokens; ++n) {
        std::vector<double> dist =
            next_token_distribution(params, ids, cfg.temperature, cfg.top_k);
        double r = rng.next_double();
        double cum = 0.0;
        std::size_t picked = 0;
        bool done = false;
        for (std::size_t j = 0; j < dist.size(); ++j) {
            if (dist[j] == 0.0) continue;
            cum += dist[j];
            picked = j;
            if (r < cum) {
                done = true;
                break;
            }
        }
        (void)done;  // r can exceed cum by rounding; the last candidate wins
        std::int32_t id = static_cast<std::int32_t>(picked);
        ids.push_back(id);
        result.generated_ids.push_back(id);
        if (cfg.stop_at_end_of_text && id == Tokenizer::kEndOfText) {
            result.hit_end = true;
            break;
        }
    }
    result.text = tokenizer.decode(result.generated_ids);
    return result;
}

}  // namespace aglm
