// Checkpoint container: magic "AGLM", a format version, a length-prefixed
// JSON header (model config, train config, tokenizer fingerprint, step, stop
// reason), then named float32 tensor records. Parameters appear sorted by
// name; when optimizer state is included, each parameter's Adam moments
// follow as adam_m.<name> / adam_v.<name> in the same order. All integers are
// little-endian; floats are serialized bit-exactly, so save -> load -> save
// reproduces the file byte for byte. Every structural violation on load is an
// integrity error.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "aglm/errors.hpp"
#include "aglm/model.hpp"
#include "aglm/training.hpp"

namespace aglm {

inline constexpr char kCheckpointMagic[4] = {'A', 'G', 'L', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json model_to_json(const ModelConfig& cfg) {
    return {{"vocab_size", cfg.vocab_size},     {"context_length", cfg.context_length},
            {"embed_dim", cfg.embed_dim},       {"n_heads", cfg.n_heads},
            {"n_layers", cfg.n_layers},         {"dropout", cfg.dropout},
            {"qkv_bias", cfg.qkv_bias},         {"ffn_mult", cfg.ffn_mult}};
}

inline nlohmann::json train_to_json(const TrainConfig& cfg) {
    return {{"learning_rate", cfg.learning_rate},
            {"batch_size", cfg.batch_size},
            {"epochs", cfg.epochs},
            {"max_steps", cfg.max_steps},
            {"weight_decay", cfg.weight_decay},
            {"beta1", cfg.beta1},
            {"beta2", cfg.beta2},
            {"adam_eps", cfg.adam_eps},
            {"grad_clip", cfg.grad_clip},
            {"eval_interval", cfg.eval_interval},
            {"early_stop_patience", cfg.early_stop_patience},
            {"min_improvement", cfg.min_improvement},
            {"window_stride", cfg.window_stride},
            {"seed", cfg.seed}};
}

namespace detail {

inline void require_keys(const nlohmann::json& j, std::initializer_list<const char*> keys,
                         const char* what) {
    if (!j.is_object()) {
        fail(Error::Kind::integrity, "checkpoint header: ", what, " is not an object");
    }
    for (const char* k : keys) {
        if (!j.contains(k)) {
            fail(Error::Kind::integrity, "checkpoint header: ", what, " is missing \"", k, "\"");
        }
    }
    if (j.size() != keys.size()) {
        fail(Error::Kind::integrity, "checkpoint header: ", what, " has unexpected keys");
    }
}

template <typename V>
V get_field(const nlohmann::json& j, const char* key, const char* what) {
    try {
        return j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        fail(Error::Kind::integrity, "checkpoint header: ", what, ".", key, " has a bad value");
    }
}

}  // namespace detail

inline ModelConfig model_from_json(const nlohmann::json& j) {
    detail::require_keys(j,
                         {"vocab_size", "context_length", "embed_dim", "n_heads", "n_layers",
                          "dropout", "qkv_bias", "ffn_mult"},
                         "model");
    ModelConfig cfg;
    cfg.vocab_size = detail::get_field<std::size_t>(j, "vocab_size", "model");
    cfg.context_length = detail::get_field<std::size_t>(j, "context_length", "model");
    cfg.embed_dim = detail::get_field<std::size_t>(j, "embed_dim", "model");
    cfg.n_heads = detail::get_field<std::size_t>(j, "n_heads", "model");
    cfg.n_layers = detail::get_field<std::size_t>(j, "n_layers", "model");
    cfg.dropout = detail::get_field<double>(j, "dropout", "model");
    cfg.qkv_bias = detail::get_field<bool>(j, "qkv_bias", "model");
    cfg.ffn_mult = detail::get_field<std::size_t>(j, "ffn_mult", "model");
    return cfg;
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
    detail::require_keys(j,
                         {"learning_rate", "batch_size", "epochs", "max_steps", "weight_decay",
                          "beta1", "beta2", "adam_eps", "grad_clip", "eval_interval",
                          "early_stop_patience", "min_improvement", "window_stride", "seed"},
                         "train");
    TrainConfig cfg;
    cfg.learning_rate = detail::get_field<double>(j, "learning_rate", "train");
    cfg.batch_size = detail::get_field<std::size_t>(j, "batch_size", "train");
    cfg.epochs = detail::get_field<std::size_t>(j, "epochs", "train");
    cfg.max_steps = detail::get_field<std::size_t>(j, "max_steps", "train");
    cfg.weight_decay = detail::get_field<double>(j, "weight_decay", "train");
    cfg.beta1 = detail::get_field<double>(j, "beta1", "train");
    cfg.beta2 = detail::get_field<double>(j, "beta2", "train");
    cfg.adam_eps = detail::get_field<double>(j, "adam_eps", "train");
    cfg.grad_clip = detail::get_field<double>(j, "grad_clip", "train");
    cfg.eval_interval = detail::get_field<std::size_t>(j, "eval_interval", "train");
    cfg.early_stop_patience = detail::get_field<std::size_t>(j, "early_stop_patience", "train");
    cfg.min_improvement = detail::get_field<double>(j, "min_improvement", "train");
    cfg.window_stride = detail::get_field<std::size_t>(j, "window_stride", "train");
    cfg.seed = detail::get_field<std::uint64_t>(j, "seed", "train");
    return cfg;
}

struct CheckpointMeta {
    TrainConfig train;
    std::string tokenizer_sha256;
    std::uint64_t step = 0;
    std::string stop_reason;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_floats(std::string& out, const Tensor<float>& t) {
    std::size_t base = out.size();
    out.resize(base + t.numel() * 4);
    char* dst = out.data() + base;
    for (float f : t.data()) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        dst[0] = static_cast<char>(bits & 0xff);
        dst[1] = static_cast<char>((bits >> 8) & 0xff);
        dst[2] = static_cast<char>((bits >> 16) & 0xff);
        dst[3] = static_cast<char>((bits >> 24) & 0xff);
        dst += 4;
    }
}

inline void put_record(std::string& out, const std::string& name, const Tensor<float>& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    put_floats(out, t);
}

struct Cursor {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) {
            fail(Error::Kind::integrity, "checkpoint is truncated at byte ", pos);
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 8;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    void floats_into(Tensor<float>& t) {
        need(t.numel() * 4);
        float* dst = t.ptr();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) {
                bits |= static_cast<std::uint32_t>(
                            static_cast<unsigned char>(buf[pos + i * 4 + b]))
                        << (8 * b);
            }
            std::memcpy(dst + i, &bits, 4);
        }
        pos += t.numel() * 4;
    }
};

// Reads one record that must match the expected name and shape.
inline void read_record(Cursor& cur, const std::string& expected_name, Tensor<float>& into) {
    std::uint32_t name_len = cur.u32();
    std::string name = cur.bytes(name_len);
    if (name != expected_name) {
        fail(Error::Kind::integrity, "checkpoint record \"", name, "\" where \"", expected_name,
             "\" was expected");
    }
    std::uint32_t rank = cur.u32();
    if (rank != into.rank()) {
        fail(Error::Kind::integrity, "checkpoint record \"", name, "\" has rank ", rank,
             ", expected ", into.rank());
    }
    for (std::size_t i = 0; i < rank; ++i) {
        std::uint64_t d = cur.u64();
        if (d != into.dim(i)) {
            fail(Error::Kind::integrity, "checkpoint record \"", name, "\" dim ", i, " is ", d,
                 ", expected ", into.dim(i));
        }
    }
    cur.floats_into(into);
}

inline std::vector<std::size_t> sorted_entry_order(const ParameterStore<float>& store) {
    std::vector<std::size_t> order(store.entries().size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return store.entries()[a].name < store.entries()[b].name;
    });
    return order;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const ParameterStore<float>& params,
                            const OptimizerState<float>* opt, const CheckpointMeta& meta) {
    nlohmann::json header;
    header["model"] = model_to_json(params.config());
    header["train"] = train_to_json(meta.train);
    header["tokenizer_sha256"] = meta.tokenizer_sha256;
    header["step"] = meta.step;
    header["stop_reason"] = meta.stop_reason;
    header["has_optimizer"] = opt != nullptr;
    std::string header_bytes = header.dump();

    std::string out;
    out.append(kCheckpointMagic, 4);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(header_bytes.size()));
    out.append(header_bytes);

    std::vector<std::size_t> order = detail::sorted_entry_order(params);
    for (std::size_t i : order) {
        const auto& e = params.entries()[i];
        detail::put_record(out, e.name, e.value);
    }
    if (opt != nullptr) {
        if (opt->m.size() != params.entries().size()) {
            fail(Error::Kind::contract, "optimizer state does not match the parameter store");
        }
        for (std::size_t i : order) {
            const auto& e = params.entries()[i];
            detail::put_record(out, "adam_m." + e.name, opt->m[i]);
            detail::put_record(out, "adam_v." + e.name, opt->v[i]);
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        fail(Error::Kind::input, "cannot write checkpoint \"", path.string(), "\"");
    }
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    f.flush();
    if (!f) {
        fail(Error::Kind::input, "failed while writing checkpoint \"", path.string(), "\"");
    }
}

struct LoadedCheckpoint {
    ParameterStore<float> params;
    std::optional<OptimizerState<float>> opt;
    CheckpointMeta meta;
};

namespace detail {

inline std::string read_file_bytes(const std::filesystem::path& path, const char* what) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        fail(Error::Kind::input, "cannot open ", what, " \"", path.string(), "\"");
    }
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) {
        fail(Error::Kind::input, "failed while reading ", what, " \"", path.string(), "\"");
    }
    return data;
}

inline nlohmann::json parse_checkpoint_header(Cursor& cur) {
    std::string magic = cur.bytes(4);
    if (magic != std::string(kCheckpointMagic, 4)) {
        fail(Error::Kind::integrity, "not a checkpoint file (bad magic)");
    }
    std::uint32_t version = cur.u32();
    if (version != kCheckpointVersion) {
        fail(Error::Kind::integrity, "unsupported checkpoint version ", version);
    }
    std::uint32_t header_len = cur.u32();
    std::string header_bytes = cur.bytes(header_len);
    nlohmann::json header = nlohmann::json::parse(header_bytes, nullptr, false);
    if (header.is_discarded()) {
        fail(Error::Kind::integrity, "checkpoint header is not valid JSON");
    }
    require_keys(header,
                 {"model", "train", "tokenizer_sha256", "step", "stop_reason", "has_optimizer"},
                 "header");
    return header;
}

}  // namespace detail

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::string data = detail::read_file_bytes(path, "checkpoint");
    detail::Cursor cur{data};
    nlohmann::json header = detail::parse_checkpoint_header(cur);

    ModelConfig mcfg = model_from_json(header.at("model"));
    try {
        mcfg.validate();
    } catch (const Error& e) {
        fail(Error::Kind::integrity, "checkpoint model config is invalid: ", e.what());
    }
    CheckpointMeta meta;
    meta.train = train_from_json(header.at("train"));
    meta.tokenizer_sha256 =
        detail::get_field<std::string>(header, "tokenizer_sha256", "header");
    meta.step = detail::get_field<std::uint64_t>(header, "step", "header");
    meta.stop_reason = detail::get_field<std::string>(header, "stop_reason", "header");
    bool has_optimizer = detail::get_field<bool>(header, "has_optimizer", "header");

    ParameterStore<float> params = ParameterStore<float>::zeros(mcfg);
    std::vector<std::size_t> order = detail::sorted_entry_order(params);
    for (std::size_t i : order) {
        auto& e = params.entries()[i];
        detail::read_record(cur, e.name, e.value);
    }
    std::optional<OptimizerState<float>> opt;
    if (has_optimizer) {
        OptimizerState<float> state = OptimizerState<float>::zeros_like(params);
        state.step = meta.step;
        for (std::size_t i : order) {
            const auto& e = params.entries()[i];
            detail::read_record(cur, "adam_m." + e.name, state.m[i]);
            detail::read_record(cur, "adam_v." + e.name, state.v[i]);
        }
        opt = std::move(state);
    }
    if (cur.pos != data.size()) {
        fail(Error::Kind::integrity, "checkpoint has ", data.size() - cur.pos,
             " trailing bytes after the last record");
    }
    return LoadedCheckpoint{std::move(params), std::move(opt), std::move(meta)};
}

// Header only, for inspection; validates the container framing but not the
// tensor records.
inline nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
    std::string data = detail::read_file_bytes(path, "checkpoint");
    detail::Cursor cur{data};
    return detail::parse_checkpoint_header(cur);
}

}  // namespace aglm
