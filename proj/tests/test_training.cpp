#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "aglm/model.hpp"
#include "aglm/training.hpp"

#include "support.hpp"

using aglm::ModelConfig;
using aglm::OptimizerState;
using aglm::ParameterStore;
using aglm::TrainConfig;

static ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.context_length = 8;
    cfg.embed_dim = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.dropout = 0.0;
    return cfg;
}

static std::vector<std::int32_t> repeating_ids(std::size_t n) {
    std::vector<std::int32_t> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(static_cast<std::int32_t>(i % 8) + 1);
    return ids;
}

TEST_CASE("make_windows covers the stream without running past the end") {
    REQUIRE(aglm::make_windows(10, 3, 3) == std::vector<std::size_t>{0, 3, 6});
    REQUIRE(aglm::make_windows(4, 3, 3) == std::vector<std::size_t>{0});
    REQUIRE(aglm::make_windows(3, 3, 3).empty());
    REQUIRE(aglm::make_windows(6, 3, 1) == std::vector<std::size_t>{0, 1, 2});
    REQUIRE(aglm::make_windows(10, 3, 0) == std::vector<std::size_t>{0, 3, 6});  // 0 = context
}

TEST_CASE("windowed batches pair each token with its successor") {
    std::vector<std::int32_t> ids{10, 11, 12, 13, 14, 15, 16};
    std::vector<std::size_t> starts{0, 2};
    std::vector<std::int32_t> targets;
    aglm::TokenBatch batch = aglm::detail::gather_batch(ids, starts, 0, 2, 3, targets);
    REQUIRE(batch.batch == 2);
    REQUIRE(batch.seq == 3);
    REQUIRE(batch.ids == std::vector<std::int32_t>{10, 11, 12, 12, 13, 14});
    REQUIRE(targets == std::vector<std::int32_t>{11, 12, 13, 13, 14, 15});
}

TEST_CASE("weight decay applies to matrices but never embeddings or vectors") {
    CHECK(aglm::decays("layers.0.attn.qkv_weight", 2));
    CHECK(aglm::decays("layers.3.ffn.w1", 2));
    CHECK_FALSE(aglm::decays("token_embedding", 2));
    CHECK_FALSE(aglm::decays("positional_embedding", 2));
    CHECK_FALSE(aglm::decays("layers.0.ffn.b1", 1));
    CHECK_FALSE(aglm::decays("final_ln.gain", 1));
}

TEST_CASE("the first adam step moves each weight by about the learning rate") {
    auto store = ParameterStore<float>::init(toy_config(), 3);
    store.ensure_grads();
    for (auto& e : store.entries()) e.grad.fill(0.5f);
    auto before = store.clone();
    auto opt = OptimizerState<float>::zeros_like(store);

    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.0;
    cfg.grad_clip = 0.0;  // disabled
    double norm = aglm::adamw_step(store, opt, cfg);
    REQUIRE(norm == Catch::Approx(0.5 * std::sqrt(1864.0)).epsilon(1e-9));
    REQUIRE(opt.step == 1);
    for (std::size_t e = 0; e < store.entries().size(); ++e) {
        const auto& now = store.entries()[e].value;
        const auto& was = before.entries()[e].value;
        for (std::size_t i = 0; i < now.numel(); ++i) {
            // m-hat = g, v-hat = g^2, so the update is lr * g / (|g| + eps)
            REQUIRE(static_cast<double>(was.at(i)) - static_cast<double>(now.at(i)) ==
                    Catch::Approx(0.1).epsilon(1e-6));
        }
    }
}

TEST_CASE("gradient clipping rescales the global norm") {
    auto store = ParameterStore<float>::init(toy_config(), 3);
    store.ensure_grads();
    for (auto& e : store.entries()) e.grad.fill(1.0f);
    auto before = store.clone();
    auto opt = OptimizerState<float>::zeros_like(store);

    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.0;
    cfg.grad_clip = 1.0;
    double norm = aglm::adamw_step(store, opt, cfg);
    REQUIRE(norm == Catch::Approx(std::sqrt(1864.0)));
    // After clipping, every gradient is 1/norm; adam still normalizes it away,
    // so the step size is unchanged but the stored moments reflect clipping.
    double clipped = 1.0 / std::sqrt(1864.0);
    REQUIRE(static_cast<double>(opt.m.front().at(0)) == Catch::Approx(0.1 * clipped));
    for (std::size_t e = 0; e < store.entries().size(); ++e) {
        const auto& now = store.entries()[e].value;
        const auto& was = before.entries()[e].value;
        REQUIRE(static_cast<double>(was.at(0)) - static_cast<double>(now.at(0)) ==
                Catch::Approx(0.1).epsilon(1e-4));
    }
}

TEST_CASE("weight decay is decoupled and skips embeddings") {
    auto store = ParameterStore<float>::init(toy_config(), 4);
    store.ensure_grads();
    store.zero_grads();  // zero gradient isolates the decay term
    auto before = store.clone();
    auto opt = OptimizerState<float>::zeros_like(store);

    TrainConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.5;
    double norm = aglm::adamw_step(store, opt, cfg);
    REQUIRE(norm == 0.0);

    const auto& emb_before = before.find("token_embedding").value;
    const auto& emb_after = store.find("token_embedding").value;
    for (std::size_t i = 0; i < emb_after.numel(); ++i) {
        REQUIRE(emb_after.at(i) == emb_before.at(i));
    }
    const auto& w_before = before.find("layers.0.ffn.w1").value;
    const auto& w_after = store.find("layers.0.ffn.w1").value;
    for (std::size_t i = 0; i < w_after.numel(); ++i) {
        REQUIRE(static_cast<double>(w_after.at(i)) ==
                Catch::Approx(static_cast<double>(w_before.at(i)) * (1.0 - 0.05)).margin(1e-8));
    }
}

TEST_CASE("non-finite gradients raise a numeric error naming the parameter") {
    auto store = ParameterStore<float>::init(toy_config(), 5);
    store.ensure_grads();
    store.zero_grads();
    store.find("layers.1.ffn.b2").grad.at(0) = std::numeric_limits<float>::infinity();
    auto opt = OptimizerState<float>::zeros_like(store);
    try {
        aglm::adamw_step(store, opt, TrainConfig{});
        FAIL("expected an error");
    } catch (const aglm::Error& e) {
        REQUIRE(e.exit_code() == 4);
        REQUIRE(std::string(e.what()).find("layers.1.ffn.b2") != std::string::npos);
    }
}

TEST_CASE("adamw requires gradients and a matching optimizer") {
    auto store = ParameterStore<float>::init(toy_config(), 5);
    auto opt = OptimizerState<float>::zeros_like(store);
    REQUIRE_THROWS_AS(aglm::adamw_step(store, opt, TrainConfig{}), aglm::Error);
    store.ensure_grads();
    OptimizerState<float> wrong;
    REQUIRE_THROWS_AS(aglm::adamw_step(store, wrong, TrainConfig{}), aglm::Error);
}

TEST_CASE("evaluate reports log-vocab loss for a uniform-logit model") {
    auto store = ParameterStore<float>::zeros(toy_config());
    auto ids = repeating_ids(100);
    auto r = aglm::evaluate(store, ids);
    REQUIRE(r.loss == Catch::Approx(std::log(11.0)).epsilon(1e-6));
    REQUIRE(r.perplexity == Catch::Approx(std::exp(r.loss)).epsilon(1e-12));
    REQUIRE(r.windows == 12);  // floor((100 - 1) / 8)
}

TEST_CASE("evaluate rejects splits shorter than one window") {
    auto store = ParameterStore<float>::zeros(toy_config());
    try {
        aglm::evaluate(store, repeating_ids(8));
        FAIL("expected an error");
    } catch (const aglm::Error& e) {
        REQUIRE(e.exit_code() == 2);
        REQUIRE(std::string(e.what()).find("8 tokens") != std::string::npos);
    }
}

TEST_CASE("training reduces loss on a repeating stream and is deterministic") {
    TrainConfig cfg;
    cfg.learning_rate = 3e-3;
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.eval_interval = 10;
    cfg.early_stop_patience = 0;
    cfg.weight_decay = 0.0;
    auto ids = repeating_ids(400);
    auto val = repeating_ids(50);

    auto run = [&]() {
        auto params = ParameterStore<float>::init(toy_config(), 7);
        return aglm::train(std::move(params), ids, val, cfg);
    };
    auto r1 = run();
    auto r2 = run();

    REQUIRE(r1.stop_reason == "completed");
    REQUIRE(r1.steps == 2 * 13);  // ceil(49 windows / batch 4) per epoch
    REQUIRE(!r1.history.empty());
    REQUIRE(r1.history.back().val_loss < std::log(11.0));
    for (const auto& p : r1.history) {
        REQUIRE(p.val_perplexity == Catch::Approx(std::exp(p.val_loss)).epsilon(1e-12));
        REQUIRE(p.epoch >= 1);
    }
    REQUIRE(r1.history.back().step == r1.steps);

    REQUIRE(r1.steps == r2.steps);
    REQUIRE(r1.history.size() == r2.history.size());
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
        REQUIRE(r1.history[i].val_loss == r2.history[i].val_loss);
        REQUIRE(r1.history[i].train_loss == r2.history[i].train_loss);
    }
    for (std::size_t e = 0; e < r1.params.entries().size(); ++e) {
        const auto& a = r1.params.entries()[e].value;
        const auto& b = r2.params.entries()[e].value;
        for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(a.at(i) == b.at(i));
    }
}

TEST_CASE("a stalled run stops early and restores the best weights") {
    TrainConfig cfg;
    cfg.learning_rate = 1e-12;  // no meaningful progress
    cfg.batch_size = 4;
    cfg.epochs = 50;
    cfg.eval_interval = 1;
    cfg.early_stop_patience = 2;
    cfg.min_improvement = 1e-4;
    auto ids = repeating_ids(200);
    auto val = repeating_ids(50);
    auto params = ParameterStore<float>::init(toy_config(), 7);
    auto r = aglm::train(std::move(params), ids, val, cfg);

    REQUIRE(r.stop_reason == "early_stopped");
    REQUIRE(r.steps == 3);  // two strikes after the first evaluation
    REQUIRE(r.best_step <= 3);
    for (std::size_t e = 0; e < r.params.entries().size(); ++e) {
        const auto& a = r.params.entries()[e].value;
        const auto& b = r.best_params.entries()[e].value;
        for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(a.at(i) == b.at(i));
    }
}

TEST_CASE("max_steps caps the run with a final evaluation") {
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 4;
    cfg.epochs = 100;
    cfg.eval_interval = 2;
    cfg.max_steps = 5;
    cfg.early_stop_patience = 0;
    auto r = aglm::train(ParameterStore<float>::init(toy_config(), 7), repeating_ids(300),
                         repeating_ids(50), cfg);
    REQUIRE(r.stop_reason == "max_steps");
    REQUIRE(r.steps == 5);
    REQUIRE(r.history.back().step == 5);
    std::vector<std::size_t> eval_steps;
    for (const auto& p : r.history) eval_steps.push_back(p.step);
    REQUIRE(eval_steps == std::vector<std::size_t>{2, 4, 5});
}

TEST_CASE("training rejects splits without a full window") {
    TrainConfig cfg;
    auto params = ParameterStore<float>::init(toy_config(), 7);
    REQUIRE_THROWS_AS(aglm::train(std::move(params), repeating_ids(5), repeating_ids(50), cfg),
                      aglm::Error);
    auto params2 = ParameterStore<float>::init(toy_config(), 7);
    REQUIRE_THROWS_AS(aglm::train(std::move(params2), repeating_ids(300), repeating_ids(5), cfg),
                      aglm::Error);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    REQUIRE_THROWS_AS(cfg.validate(), aglm::Error);
    cfg = TrainConfig{};
    cfg.beta2 = 1.0;
    REQUIRE_THROWS_AS(cfg.validate(), aglm::Error);
    cfg = TrainConfig{};
    cfg.eval_interval = 0;
    REQUIRE_THROWS_AS(cfg.validate(), aglm::Error);
}
