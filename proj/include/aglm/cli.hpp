// Command-line surface. run() is the whole program: it parses arguments,
// loads the optional config file, dispatches one subcommand, and maps every
// failure onto the documented exit codes (0 ok, 1 usage, 2 input, 3
// integrity, 4 numeric). Progress goes to err, machine-readable results to
// out, so tests can drive it in-process with string streams.
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "aglm/checkpoint.hpp"
#include "aglm/config.hpp"
#include "aglm/corpus.hpp"
#include "aglm/errors.hpp"
#include "aglm/generation.hpp"
#include "aglm/model.hpp"
#include "aglm/sha256.hpp"
#include "aglm/tokenizer.hpp"
#include "aglm/training.hpp"

namespace aglm::cli {

namespace detail {

namespace fs = std::filesystem;

inline std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline std::string read_text_file(const fs::path& path, const char* what) {
    return aglm::detail::read_file_bytes(path, what);
}

inline void write_file(const fs::path& path, std::string_view content, const char* what) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        fail(Error::Kind::input, "cannot write ", what, " \"", path.string(), "\"");
    }
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    f.flush();
    if (!f) {
        fail(Error::Kind::input, "failed while writing ", what, " \"", path.string(), "\"");
    }
}

struct Paths {
    fs::path work;

    fs::path train_split() const { return work / "train.txt"; }
    fs::path val_split() const { return work / "val.txt"; }
    fs::path test_split() const { return work / "test.txt"; }
    fs::path manifest() const { return work / "split_manifest.json"; }
    fs::path tokenizer() const { return work / "tokenizer.txt"; }
    fs::path latest() const { return work / "latest.ckpt"; }
    fs::path best() const { return work / "best.ckpt"; }
    fs::path report() const { return work / "report.csv"; }

    fs::path split(const std::string& name) const { return work / (name + ".txt"); }
};

// Explicit flag beats the config file, which beats AGLM_WORK_DIR, which
// beats the "work" default.
inline fs::path resolve_work_dir(const std::string& flag, const RunConfig& cfg) {
    if (!flag.empty()) return flag;
    if (cfg.work_dir) return *cfg.work_dir;
    if (const char* env = std::getenv("AGLM_WORK_DIR"); env != nullptr && env[0] != '\0') {
        return env;
    }
    return "work";
}

inline fs::path resolve_checkpoint(const std::string& flag, const Paths& paths) {
    if (!flag.empty()) return flag;
    std::error_code ec;
    if (fs::exists(paths.best(), ec)) return paths.best();
    if (fs::exists(paths.latest(), ec)) return paths.latest();
    fail(Error::Kind::input, "no checkpoint in \"", paths.work.string(), "\" (looked for \"",
         paths.best().string(), "\" and \"", paths.latest().string(), "\")");
}

// Token stream for one split file: encoded text plus a document-end marker.
inline std::vector<std::int32_t> encode_split(const Tokenizer& tok, const std::string& text) {
    std::vector<std::int32_t> ids = tok.encode(text);
    ids.push_back(Tokenizer::kEndOfText);
    return ids;
}

struct LoadedTokenizer {
    Tokenizer tokenizer;
    std::string sha256;
};

inline LoadedTokenizer load_tokenizer(const Paths& paths) {
    std::string bytes = read_text_file(paths.tokenizer(), "tokenizer file");
    LoadedTokenizer lt{Tokenizer::parse(bytes), sha256_hex(bytes)};
    return lt;
}

// A checkpoint records the hash of the tokenizer it was trained with; eval
// and generate refuse to pair it with any other tokenizer.
inline void check_tokenizer_hash(const LoadedTokenizer& tok, const CheckpointMeta& meta,
                                 const Paths& paths) {
    if (tok.sha256 != meta.tokenizer_sha256) {
        fail(Error::Kind::integrity, "tokenizer file \"", paths.tokenizer().string(),
             "\" does not match the checkpoint (hash ", tok.sha256, ", checkpoint expects ",
             meta.tokenizer_sha256, ")");
    }
}

inline int cmd_prepare(const RunConfig& cfg, const Paths& paths, const std::string& corpus_flag,
                       std::ostream& out, std::ostream& err) {
    fs::path corpus_dir = corpus_flag.empty() ? fs::path(cfg.corpus_dir) : fs::path(corpus_flag);
    std::error_code ec;
    if (!fs::is_directory(corpus_dir, ec)) {
        fail(Error::Kind::input, "corpus directory \"", corpus_dir.string(),
             "\" does not exist");
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(corpus_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".txt") {
            files.push_back(entry.path());
        }
    }
    if (files.empty()) {
        fail(Error::Kind::input, "corpus directory \"", corpus_dir.string(),
             "\" contains no .txt files");
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });

    CleanRules rules = cfg.clean_rules();
    std::vector<CorpusDocument> docs;
    std::size_t paragraphs = 0;
    for (const fs::path& file : files) {
        std::string text = read_text_file(file, "corpus document");
        CorpusDocument doc;
        doc.name = file.filename().string();
        doc.paragraphs = clean_document(doc.name, text, rules);
        paragraphs += doc.paragraphs.size();
        err << "cleaned " << doc.name << ": " << doc.paragraphs.size() << " paragraphs\n";
        docs.push_back(std::move(doc));
    }

    SplitResult split = split_corpus(docs, cfg.split_spec());
    fs::create_directories(paths.work);
    write_file(paths.train_split(), split.train_text, "training split");
    write_file(paths.val_split(), split.val_text, "validation split");
    write_file(paths.test_split(), split.test_text, "test split");
    write_file(paths.manifest(), split.manifest_json, "split manifest");

    out << "documents=" << docs.size() << " paragraphs=" << paragraphs
        << " train_bytes=" << split.train_text.size() << " val_bytes=" << split.val_text.size()
        << " test_bytes=" << split.test_text.size() << "\n";
    return 0;
}

inline int cmd_train_tokenizer(const RunConfig& cfg, const Paths& paths, std::ostream& out,
                               std::ostream& err) {
    std::string text = read_text_file(paths.train_split(), "training split");
    err << "training tokenizer on " << text.size() << " bytes (target vocab "
        << cfg.tokenizer_vocab << ")\n";
    Tokenizer tok = Tokenizer::train(text, cfg.tokenizer_vocab);
    fs::create_directories(paths.work);
    write_file(paths.tokenizer(), tok.serialize(), "tokenizer file");
    out << "vocab_size=" << tok.vocab_size() << " merges=" << tok.merge_count() << "\n";
    return 0;
}

inline ModelConfig resolve_model_config(const RunConfig& cfg, const Tokenizer& tok) {
    ModelConfig mcfg = cfg.model;
    if (mcfg.vocab_size == 0) {
        mcfg.vocab_size = tok.vocab_size();
    } else if (mcfg.vocab_size != tok.vocab_size()) {
        fail(Error::Kind::input, "model.vocab_size ", mcfg.vocab_size,
             " does not match the tokenizer vocabulary ", tok.vocab_size());
    }
    mcfg.validate();
    return mcfg;
}

inline int cmd_train(const RunConfig& cfg, const Paths& paths, std::ostream& out,
                     std::ostream& err) {
    LoadedTokenizer tok = load_tokenizer(paths);
    std::vector<std::int32_t> train_ids =
        encode_split(tok.tokenizer, read_text_file(paths.train_split(), "training split"));
    std::vector<std::int32_t> val_ids =
        encode_split(tok.tokenizer, read_text_file(paths.val_split(), "validation split"));

    ModelConfig mcfg = resolve_model_config(cfg, tok.tokenizer);
    TrainConfig tcfg = cfg.train_config();
    tcfg.validate();

    err << "model: " << count_params(mcfg) << " params, vocab " << mcfg.vocab_size
        << ", context " << mcfg.context_length << "\n";
    err << "data: " << train_ids.size() << " train tokens, " << val_ids.size()
        << " val tokens\n";

    ParameterStore<float> params = ParameterStore<float>::init(mcfg, cfg.seed);
    auto on_eval = [&err](const EvalPoint& p) {
        err << "step=" << p.step << " epoch=" << p.epoch << " train_loss="
            << fixed6(p.train_loss) << " val_loss=" << fixed6(p.val_loss)
            << " val_perplexity=" << fixed6(p.val_perplexity) << "\n";
    };
    TrainResult<float> result = train(std::move(params), train_ids, val_ids, tcfg, on_eval);

    std::string csv = "step,epoch,train_loss,val_loss,val_perplexity\n";
    for (const EvalPoint& p : result.history) {
        csv += std::to_string(p.step) + "," + std::to_string(p.epoch) + "," +
               fixed6(p.train_loss) + "," + fixed6(p.val_loss) + "," +
               fixed6(p.val_perplexity) + "\n";
    }
    fs::create_directories(paths.work);
    write_file(paths.report(), csv, "training report");

    CheckpointMeta meta;
    meta.train = tcfg;
    meta.tokenizer_sha256 = tok.sha256;
    meta.step = result.steps;
    meta.stop_reason = result.stop_reason;
    save_checkpoint(paths.latest(), result.params, &result.opt, meta);

    CheckpointMeta best_meta = meta;
    best_meta.step = result.best_step;
    save_checkpoint(paths.best(), result.best_params, &result.best_opt, best_meta);

    out << "steps=" << result.steps << " best_step=" << result.best_step
        << " best_val_loss=" << fixed6(result.best_val_loss)
        << " best_val_perplexity=" << fixed6(std::exp(result.best_val_loss))
        << " stop=" << result.stop_reason << "\n";
    return 0;
}

inline int cmd_eval(const RunConfig& cfg, const Paths& paths, const std::string& checkpoint_flag,
                    const std::string& split, std::ostream& out, std::ostream& err) {
    fs::path ckpt_path = resolve_checkpoint(checkpoint_flag, paths);
    LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
    LoadedTokenizer tok = load_tokenizer(paths);
    check_tokenizer_hash(tok, ckpt.meta, paths);

    std::string label = split + " split";
    std::string text = read_text_file(paths.split(split), label.c_str());
    std::vector<std::int32_t> ids = encode_split(tok.tokenizer, text);
    err << "evaluating " << ckpt_path.string() << " on " << split << " (" << ids.size()
        << " tokens)\n";
    EvalResult r = evaluate(ckpt.params, ids, cfg.train.batch_size);
    out << "loss=" << fixed6(r.loss) << " perplexity=" << fixed6(r.perplexity) << "\n";
    return 0;
}

inline int cmd_generate(const RunConfig& cfg, const Paths& paths,
                        const std::string& checkpoint_flag,
                        const std::vector<std::string>& prompts, std::ostream& out,
                        std::ostream& err) {
    fs::path ckpt_path = resolve_checkpoint(checkpoint_flag, paths);
    LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
    LoadedTokenizer tok = load_tokenizer(paths);
    check_tokenizer_hash(tok, ckpt.meta, paths);

    SamplingConfig scfg = cfg.sampling_config();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        SamplingConfig one = scfg;
        one.seed = scfg.seed + i;  // each prompt gets its own stream
        err << "prompt " << (i + 1) << "/" << prompts.size() << ": " << prompts[i].size()
            << " bytes\n";
        GenerationResult r = generate(ckpt.params, tok.tokenizer, prompts[i], one);
        out << r.text << "\n";
    }
    return 0;
}

inline int cmd_inspect(const Paths& paths, const std::string& checkpoint_flag,
                       std::ostream& out) {
    fs::path ckpt_path = resolve_checkpoint(checkpoint_flag, paths);
    nlohmann::json header = read_checkpoint_header(ckpt_path);
    out << header.dump(2) << "\n";
    return 0;
}

}  // namespace detail

// In-process entry point; main() forwards to this.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"offline GPT-style language model pipeline"};
    app.fallthrough();

    std::string config_path;
    std::uint64_t seed_val = 0;
    std::string work_dir_flag;
    bool deterministic = true;
    app.add_option("--config", config_path, "config file (key = value lines)");
    auto* seed_opt = app.add_option("--seed", seed_val, "global seed override");
    app.add_option("--work-dir", work_dir_flag, "artifact directory");
    app.add_flag("--deterministic", deterministic,
                 "run fully deterministically (always on; flag kept for scripting)");

    auto* prepare = app.add_subcommand("prepare", "clean the corpus and write the splits");
    std::string corpus_flag;
    prepare->add_option("--corpus-dir", corpus_flag, "directory of .txt documents");

    auto* train_tok =
        app.add_subcommand("train-tokenizer", "learn BPE merges from the training split");

    auto* train_cmd = app.add_subcommand("train", "train the model and write checkpoints");

    auto* eval_cmd = app.add_subcommand("eval", "report loss and perplexity on a split");
    std::string eval_split = "test";
    std::string eval_ckpt;
    eval_cmd->add_option("--split", eval_split, "train, val, or test (default test)")
        ->check(CLI::IsMember({"train", "val", "test"}));
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint path (default best, then latest)");

    auto* gen_cmd = app.add_subcommand("generate", "sample continuations for prompts");
    std::vector<std::string> prompt_args;
    std::string prompt_file;
    std::string gen_ckpt;
    double temperature_val = 0.0;
    std::uint64_t max_new_val = 0;
    std::uint64_t top_k_val = 0;
    gen_cmd->add_option("--prompt", prompt_args, "prompt text (repeatable)");
    gen_cmd->add_option("--prompt-file", prompt_file, "file with one prompt per line");
    gen_cmd->add_option("--checkpoint", gen_ckpt, "checkpoint path (default best, then latest)");
    auto* temp_opt = gen_cmd->add_option("--temperature", temperature_val, "sampling temperature");
    auto* max_new_opt = gen_cmd->add_option("--max-new-tokens", max_new_val, "tokens to sample");
    auto* top_k_opt = gen_cmd->add_option("--top-k", top_k_val, "keep only the k best logits");

    auto* inspect_cmd = app.add_subcommand("inspect", "print a checkpoint's header as JSON");
    std::string inspect_ckpt;
    inspect_cmd->add_option("--checkpoint", inspect_ckpt,
                            "checkpoint path (default best, then latest)");

    app.require_subcommand(1);

    std::vector<const char*> argv;
    argv.push_back("aglm");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        RunConfig cfg;
        if (!config_path.empty()) cfg = load_config_file(config_path);
        if (seed_opt->count() > 0) cfg.seed = seed_val;
        (void)deterministic;  // the pipeline has no nondeterministic mode

        detail::Paths paths{detail::resolve_work_dir(work_dir_flag, cfg)};

        if (app.got_subcommand(prepare)) {
            return detail::cmd_prepare(cfg, paths, corpus_flag, out, err);
        }
        if (app.got_subcommand(train_tok)) {
            return detail::cmd_train_tokenizer(cfg, paths, out, err);
        }
        if (app.got_subcommand(train_cmd)) {
            return detail::cmd_train(cfg, paths, out, err);
        }
        if (app.got_subcommand(eval_cmd)) {
            return detail::cmd_eval(cfg, paths, eval_ckpt, eval_split, out, err);
        }
        if (app.got_subcommand(gen_cmd)) {
            if (temp_opt->count() > 0) cfg.sample.temperature = temperature_val;
            if (max_new_opt->count() > 0) {
                cfg.sample.max_new_tokens = static_cast<std::size_t>(max_new_val);
            }
            if (top_k_opt->count() > 0) cfg.sample.top_k = static_cast<std::size_t>(top_k_val);
            std::vector<std::string> prompts = prompt_args;
            if (!prompt_file.empty()) {
                std::string text = detail::read_text_file(prompt_file, "prompt file");
                std::size_t pos = 0;
                while (pos < text.size()) {
                    std::size_t eol = text.find('\n', pos);
                    std::size_t end = eol == std::string::npos ? text.size() : eol;
                    std::string line = text.substr(pos, end - pos);
                    if (!line.empty() && line.back() == '\r') line.pop_back();
                    if (!line.empty()) prompts.push_back(std::move(line));
                    if (eol == std::string::npos) break;
                    pos = eol + 1;
                }
            }
            if (prompts.empty()) {
                fail(Error::Kind::usage, "generate needs at least one --prompt or --prompt-file");
            }
            return detail::cmd_generate(cfg, paths, gen_ckpt, prompts, out, err);
        }
        if (app.got_subcommand(inspect_cmd)) {
            return detail::cmd_inspect(paths, inspect_ckpt, out);
        }
        fail(Error::Kind::usage, "no subcommand selected");
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace aglm::cli
