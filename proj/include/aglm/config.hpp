// Run configuration: a flat UTF-8 "key = value" file with full-line "#"
// comments and dotted section prefixes (model.embed_dim = 768). Unknown keys
// are a hard error so a typo can never silently fall back to a default.
// Per-section seeds are optional and inherit the global seed when unset.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "aglm/corpus.hpp"
#include "aglm/errors.hpp"
#include "aglm/generation.hpp"
#include "aglm/model.hpp"
#include "aglm/training.hpp"

namespace aglm {

struct RunConfig {
    std::uint64_t seed = 42;
    std::optional<std::string> work_dir;  // final value resolved by the CLI
    std::string corpus_dir = "corpus";

    bool strip_page_numbers = true;
    std::vector<std::string> strip_lines;
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    std::optional<std::uint64_t> corpus_seed;

    std::size_t tokenizer_vocab = 50257;

    ModelConfig model{};  // vocab_size 0 = adopt the tokenizer's vocabulary
    TrainConfig train{};
    SamplingConfig sample{};
    std::optional<std::uint64_t> train_seed;
    std::optional<std::uint64_t> sample_seed;

    RunConfig() { model.vocab_size = 0; }

    CleanRules clean_rules() const {
        CleanRules rules;
        rules.strip_page_numbers = strip_page_numbers;
        rules.strip_literals = strip_lines;
        return rules;
    }

    SplitSpec split_spec() const {
        SplitSpec spec;
        spec.train_fraction = train_fraction;
        spec.val_fraction = val_fraction;
        spec.test_fraction = test_fraction;
        spec.seed = corpus_seed.value_or(seed);
        return spec;
    }

    TrainConfig train_config() const {
        TrainConfig cfg = train;
        cfg.seed = train_seed.value_or(seed);
        return cfg;
    }

    SamplingConfig sampling_config() const {
        SamplingConfig cfg = sample;
        cfg.seed = sample_seed.value_or(seed);
        return cfg;
    }
};

namespace detail {

[[noreturn]] inline void config_error(std::string_view context, std::size_t line,
                                      std::string_view message) {
    fail(Error::Kind::input, "config ", std::string(context), " line ", line, ": ",
         std::string(message));
}

inline std::uint64_t parse_config_u64(std::string_view s, std::string_view context,
                                      std::size_t line, std::string_view key) {
    if (s.empty() || s.size() > 20) {
        config_error(context, line, detail::cat("bad integer for ", std::string(key)));
    }
    std::uint64_t v = 0;
    for (char c : s) {
        if (c < '0' || c > '9') {
            config_error(context, line, detail::cat("bad integer for ", std::string(key)));
        }
        std::uint64_t next = v * 10 + static_cast<std::uint64_t>(c - '0');
        if (next < v) {
            config_error(context, line, detail::cat("integer overflow for ", std::string(key)));
        }
        v = next;
    }
    return v;
}

inline double parse_config_double(std::string_view s, std::string_view context, std::size_t line,
                                  std::string_view key) {
    std::string buf(s);
    char* end = nullptr;
    double v = std::strtod(buf.c_str(), &end);
    if (buf.empty() || end != buf.c_str() + buf.size() || !std::isfinite(v)) {
        config_error(context, line, detail::cat("bad number for ", std::string(key)));
    }
    return v;
}

inline bool parse_config_bool(std::string_view s, std::string_view context, std::size_t line,
                              std::string_view key) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    config_error(context, line,
                 detail::cat("bad boolean for ", std::string(key), " (use true/false)"));
}

}  // namespace detail

// Applies one key/value pair; context and line feed error messages.
inline void apply_config_entry(RunConfig& cfg, std::string_view key, std::string_view value,
                               std::string_view context, std::size_t line) {
    using detail::parse_config_bool;
    using detail::parse_config_double;
    using detail::parse_config_u64;
    auto u64 = [&](std::string_view v) { return parse_config_u64(v, context, line, key); };
    auto num = [&](std::string_view v) { return parse_config_double(v, context, line, key); };
    auto flag = [&](std::string_view v) { return parse_config_bool(v, context, line, key); };
    auto size = [&](std::string_view v) { return static_cast<std::size_t>(u64(v)); };

    if (key == "seed") {
        cfg.seed = u64(value);
    } else if (key == "work_dir") {
        cfg.work_dir = std::string(value);
    } else if (key == "corpus_dir") {
        cfg.corpus_dir = std::string(value);
    } else if (key == "corpus.train_fraction") {
        cfg.train_fraction = num(value);
    } else if (key == "corpus.val_fraction") {
        cfg.val_fraction = num(value);
    } else if (key == "corpus.test_fraction") {
        cfg.test_fraction = num(value);
    } else if (key == "corpus.seed") {
        cfg.corpus_seed = u64(value);
    } else if (key == "corpus.strip_line") {
        cfg.strip_lines.emplace_back(value);
    } else if (key == "corpus.strip_page_numbers") {
        cfg.strip_page_numbers = flag(value);
    } else if (key == "tokenizer.vocab_size") {
        cfg.tokenizer_vocab = size(value);
    } else if (key == "model.vocab_size") {
        cfg.model.vocab_size = size(value);
    } else if (key == "model.context_length") {
        cfg.model.context_length = size(value);
    } else if (key == "model.embed_dim") {
        cfg.model.embed_dim = size(value);
    } else if (key == "model.n_heads") {
        cfg.model.n_heads = size(value);
    } else if (key == "model.n_layers") {
        cfg.model.n_layers = size(value);
    } else if (key == "model.dropout") {
        cfg.model.dropout = num(value);
    } else if (key == "model.qkv_bias") {
        cfg.model.qkv_bias = flag(value);
    } else if (key == "model.ffn_mult") {
        cfg.model.ffn_mult = size(value);
    } else if (key == "train.learning_rate") {
        cfg.train.learning_rate = num(value);
    } else if (key == "train.batch_size") {
        cfg.train.batch_size = size(value);
    } else if (key == "train.epochs") {
        cfg.train.epochs = size(value);
    } else if (key == "train.max_steps") {
        cfg.train.max_steps = size(value);
    } else if (key == "train.weight_decay") {
        cfg.train.weight_decay = num(value);
    } else if (key == "train.beta1") {
        cfg.train.beta1 = num(value);
    } else if (key == "train.beta2") {
        cfg.train.beta2 = num(value);
    } else if (key == "train.adam_eps") {
        cfg.train.adam_eps = num(value);
    } else if (key == "train.grad_clip") {
        cfg.train.grad_clip = num(value);
    } else if (key == "train.eval_interval") {
        cfg.train.eval_interval = size(value);
    } else if (key == "train.early_stop_patience") {
        cfg.train.early_stop_patience = size(value);
    } else if (key == "train.min_improvement") {
        cfg.train.min_improvement = num(value);
    } else if (key == "train.window_stride") {
        cfg.train.window_stride = size(value);
    } else if (key == "train.seed") {
        cfg.train_seed = u64(value);
    } else if (key == "sample.max_new_tokens") {
        cfg.sample.max_new_tokens = size(value);
    } else if (key == "sample.temperature") {
        cfg.sample.temperature = num(value);
    } else if (key == "sample.top_k") {
        cfg.sample.top_k = size(value);
    } else if (key == "sample.stop_at_end_of_text") {
        cfg.sample.stop_at_end_of_text = flag(value);
    } else if (key == "sample.seed") {
        cfg.sample_seed = u64(value);
    } else {
        detail::config_error(context, line,
                             detail::cat("unknown key \"", std::string(key), "\""));
    }
}

inline void parse_config_text(RunConfig& cfg, std::string_view text, std::string_view context) {
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        std::string_view raw =
            eol == std::string_view::npos ? text.substr(pos) : text.substr(pos, eol - pos);
        ++line_no;
        std::string_view line = detail::trim(raw);
        if (!line.empty() && line[0] != '#') {
            std::size_t eq = line.find('=');
            if (eq == std::string_view::npos) {
                detail::config_error(context, line_no, "expected \"key = value\"");
            }
            std::string_view key = detail::trim(line.substr(0, eq));
            std::string_view value = detail::trim(line.substr(eq + 1));
            if (key.empty()) {
                detail::config_error(context, line_no, "empty key");
            }
            apply_config_entry(cfg, key, value, context, line_no);
        }
        if (eol == std::string_view::npos) break;
        pos = eol + 1;
    }
}

inline RunConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        fail(Error::Kind::input, "cannot open config file \"", path.string(), "\"");
    }
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) {
        fail(Error::Kind::input, "failed while reading config file \"", path.string(), "\"");
    }
    RunConfig cfg;
    parse_config_text(cfg, text, path.string());
    return cfg;
}

}  // namespace aglm
