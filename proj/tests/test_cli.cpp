// End-to-end coverage of the command-line surface: the full
// prepare/train-tokenizer/train/eval/generate/inspect pipeline on a tiny
// corpus, plus the exit-code contract for usage, input, and integrity
// failures. Everything runs in-process through cli::run so the tests can
// capture both streams.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "aglm/cli.hpp"
#include "aglm/tokenizer.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using support::CliResult;
using support::run_cli;

namespace {

std::string make_document(int doc, int paragraphs) {
    static const char* subjects[] = {"the reactor core", "the moderator loop",
                                     "the pressure tube", "the control room",
                                     "the turbine hall"};
    static const char* verbs[] = {"holds", "measures", "feeds", "monitors", "balances"};
    static const char* objects[] = {"delayed neutrons", "the coolant flow", "the steam drum",
                                    "the feedwater pumps", "the graphite stack"};
    std::string text;
    for (int p = 0; p < paragraphs; ++p) {
        int k = doc * 31 + p;
        text += subjects[k % 5];
        text += ' ';
        text += verbs[(k / 5) % 5];
        text += ' ';
        text += objects[(k / 7) % 5];
        text += " while ";
        text += subjects[(k + 2) % 5];
        text += ' ';
        text += verbs[(k + 3) % 5];
        text += ' ';
        text += objects[(k + 1) % 5];
        text += " every shift.\n\n";
    }
    return text;
}

// One shared tiny pipeline. Building it once keeps the suite fast; tests
// that need a broken work dir copy it instead of mutating it.
struct Pipeline {
    support::TempDir tmp;
    fs::path corpus_dir;
    fs::path work_dir;
    fs::path config_path;
    CliResult prepare;
    CliResult train_tokenizer;
    CliResult train;

    Pipeline() {
        corpus_dir = tmp / "corpus";
        work_dir = tmp / "work";
        fs::create_directories(corpus_dir);
        for (int d = 0; d < 3; ++d) {
            support::write_file(corpus_dir / ("doc" + std::to_string(d) + ".txt"),
                                make_document(d, 36));
        }
        config_path = tmp / "run.cfg";
        support::write_file(config_path, config_text());

        prepare = run_cli({"--config", config_path.string(), "prepare"});
        train_tokenizer = run_cli({"--config", config_path.string(), "train-tokenizer"});
        train = run_cli({"--config", config_path.string(), "train"});
    }

    std::string config_text() const {
        std::string text;
        text += "# tiny end-to-end run\n";
        text += "seed = 7\n";
        text += "corpus_dir = " + corpus_dir.string() + "\n";
        text += "work_dir = " + work_dir.string() + "\n";
        text += "tokenizer.vocab_size = 300\n";
        text += "model.context_length = 16\n";
        text += "model.embed_dim = 16\n";
        text += "model.n_heads = 2\n";
        text += "model.n_layers = 1\n";
        text += "model.dropout = 0.0\n";
        text += "train.learning_rate = 0.003\n";
        text += "train.batch_size = 2\n";
        text += "train.epochs = 1\n";
        text += "train.max_steps = 6\n";
        text += "train.eval_interval = 3\n";
        text += "train.early_stop_patience = 0\n";
        text += "sample.max_new_tokens = 8\n";
        text += "sample.temperature = 0.8\n";
        text += "sample.top_k = 5\n";
        return text;
    }

    std::vector<std::string> args(std::initializer_list<std::string> rest) const {
        std::vector<std::string> a{"--config", config_path.string()};
        a.insert(a.end(), rest.begin(), rest.end());
        return a;
    }
};

Pipeline& pipeline() {
    static Pipeline p;
    return p;
}

// Copies the fixture's artifacts so a test can corrupt them freely.
fs::path copy_work_dir(const fs::path& into) {
    fs::create_directories(into);
    fs::copy(pipeline().work_dir, into,
             fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    return into;
}

}  // namespace

TEST_CASE("prepare cleans the corpus and writes the splits") {
    Pipeline& p = pipeline();
    INFO(p.prepare.err);
    REQUIRE(p.prepare.code == 0);
    REQUIRE(p.prepare.out.substr(0, 26) == "documents=3 paragraphs=108");
    REQUIRE(p.prepare.out.find(" train_bytes=") != std::string::npos);
    REQUIRE(p.prepare.out.find(" val_bytes=") != std::string::npos);
    REQUIRE(p.prepare.out.find(" test_bytes=") != std::string::npos);
    REQUIRE(p.prepare.out.back() == '\n');
    REQUIRE(p.prepare.err.find("cleaned doc0.txt: 36 paragraphs") != std::string::npos);
    REQUIRE(p.prepare.err.find("cleaned doc2.txt: 36 paragraphs") != std::string::npos);

    for (const char* name : {"train.txt", "val.txt", "test.txt", "split_manifest.json"}) {
        CAPTURE(name);
        REQUIRE(fs::exists(p.work_dir / name));
    }
    auto manifest = nlohmann::json::parse(support::read_file(p.work_dir / "split_manifest.json"));
    REQUIRE(manifest.at("blocks").size() == 108);
    REQUIRE(manifest.at("seed").get<std::uint64_t>() == 7);

    std::string train_text = support::read_file(p.work_dir / "train.txt");
    std::string val_text = support::read_file(p.work_dir / "val.txt");
    REQUIRE(!train_text.empty());
    REQUIRE(!val_text.empty());
    REQUIRE(train_text.size() > 6 * val_text.size());
}

TEST_CASE("prepare writes identical splits when rerun") {
    Pipeline& p = pipeline();
    fs::path other = p.tmp / "work-again";
    CliResult r = run_cli(p.args({"--work-dir", other.string(), "prepare"}));
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.out == p.prepare.out);
    for (const char* name : {"train.txt", "val.txt", "test.txt", "split_manifest.json"}) {
        CAPTURE(name);
        REQUIRE(support::read_file(other / name) == support::read_file(p.work_dir / name));
    }
}

TEST_CASE("train-tokenizer reports the learned vocabulary") {
    Pipeline& p = pipeline();
    INFO(p.train_tokenizer.err);
    REQUIRE(p.train_tokenizer.code == 0);
    REQUIRE(p.train_tokenizer.out.substr(0, 11) == "vocab_size=");
    std::size_t vocab = std::stoul(p.train_tokenizer.out.substr(11));
    std::size_t merges_pos = p.train_tokenizer.out.find(" merges=");
    REQUIRE(merges_pos != std::string::npos);
    std::size_t merges = std::stoul(p.train_tokenizer.out.substr(merges_pos + 8));
    REQUIRE(vocab > 257);
    REQUIRE(vocab <= 300);
    REQUIRE(merges == vocab - 257);

    std::string serialized = support::read_file(p.work_dir / "tokenizer.txt");
    REQUIRE(serialized.substr(0, 7) == "bpe-v1 ");
    aglm::Tokenizer tok = aglm::Tokenizer::parse(serialized);
    REQUIRE(tok.vocab_size() == vocab);
}

TEST_CASE("train writes checkpoints and a report") {
    Pipeline& p = pipeline();
    INFO(p.train.err);
    REQUIRE(p.train.code == 0);
    REQUIRE(p.train.out.substr(0, 8) == "steps=6 ");
    REQUIRE(p.train.out.find(" stop=max_steps") != std::string::npos);
    REQUIRE(p.train.out.find(" best_val_loss=") != std::string::npos);
    REQUIRE(p.train.err.find("model: ") != std::string::npos);
    REQUIRE(p.train.err.find("data: ") != std::string::npos);
    REQUIRE(p.train.err.find("step=3 ") != std::string::npos);
    REQUIRE(p.train.err.find("step=6 ") != std::string::npos);

    REQUIRE(fs::exists(p.work_dir / "latest.ckpt"));
    REQUIRE(fs::exists(p.work_dir / "best.ckpt"));
    std::string csv = support::read_file(p.work_dir / "report.csv");
    REQUIRE(csv.substr(0, csv.find('\n')) == "step,epoch,train_loss,val_loss,val_perplexity");
    REQUIRE(csv.find("\n3,") != std::string::npos);
    REQUIRE(csv.find("\n6,") != std::string::npos);
}

TEST_CASE("eval reports loss and matching perplexity") {
    Pipeline& p = pipeline();
    CliResult r = run_cli(p.args({"eval", "--split", "val"}));
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(r.err.find("best.ckpt") != std::string::npos);  // best wins by default

    REQUIRE(r.out.substr(0, 5) == "loss=");
    double loss = std::stod(r.out.substr(5));
    std::size_t ppl_pos = r.out.find(" perplexity=");
    REQUIRE(ppl_pos != std::string::npos);
    double ppl = std::stod(r.out.substr(ppl_pos + 12));
    REQUIRE(loss > 0.0);
    REQUIRE(loss < 20.0);
    REQUIRE(ppl == Catch::Approx(std::exp(loss)).epsilon(1e-4));

    // The default split is test; both must resolve without a flag.
    CliResult test_split = run_cli(p.args({"eval"}));
    REQUIRE(test_split.code == 0);
    REQUIRE(test_split.err.find(" on test ") != std::string::npos);
}

TEST_CASE("generate emits one line per prompt and obeys the seed") {
    Pipeline& p = pipeline();
    CliResult r = run_cli(p.args({"generate", "--prompt", "the reactor core",
                                  "--prompt", "delayed"}));
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(std::count(r.out.begin(), r.out.end(), '\n') == 2);
    REQUIRE(r.err.find("prompt 1/2") != std::string::npos);
    REQUIRE(r.err.find("prompt 2/2") != std::string::npos);

    CliResult again = run_cli(p.args({"generate", "--prompt", "the reactor core",
                                      "--prompt", "delayed"}));
    REQUIRE(again.out == r.out);  // same seed, same text

    // Greedy decoding ignores the seed entirely.
    CliResult g1 = run_cli(p.args({"--seed", "1", "generate", "--temperature", "0",
                                   "--prompt", "the reactor core"}));
    CliResult g2 = run_cli(p.args({"--seed", "2", "generate", "--temperature", "0",
                                   "--prompt", "the reactor core"}));
    REQUIRE(g1.code == 0);
    REQUIRE(g1.out == g2.out);
}

TEST_CASE("generate reads prompts from a file") {
    Pipeline& p = pipeline();
    fs::path prompt_file = p.tmp / "prompts.txt";
    support::write_file(prompt_file, "the moderator loop\n\nthe turbine hall\r\n");
    CliResult r = run_cli(p.args({"generate", "--prompt-file", prompt_file.string()}));
    INFO(r.err);
    REQUIRE(r.code == 0);
    REQUIRE(std::count(r.out.begin(), r.out.end(), '\n') == 2);  // blank line skipped

    CliResult mixed = run_cli(p.args({"generate", "--prompt", "extra",
                                      "--prompt-file", prompt_file.string()}));
    REQUIRE(mixed.code == 0);
    REQUIRE(std::count(mixed.out.begin(), mixed.out.end(), '\n') == 3);
}

TEST_CASE("inspect prints the checkpoint header as JSON") {
    Pipeline& p = pipeline();
    CliResult r = run_cli(p.args({"inspect"}));
    INFO(r.err);
    REQUIRE(r.code == 0);
    auto header = nlohmann::json::parse(r.out);
    REQUIRE(header.at("has_optimizer").get<bool>());
    REQUIRE(header.at("stop_reason").get<std::string>() == "max_steps");
    REQUIRE(header.at("model").at("context_length").get<std::size_t>() == 16);
    REQUIRE(header.at("train").at("batch_size").get<std::size_t>() == 2);
    REQUIRE(header.at("tokenizer_sha256").get<std::string>().size() == 64);

    CliResult latest = run_cli(p.args({"inspect", "--checkpoint",
                                       (p.work_dir / "latest.ckpt").string()}));
    REQUIRE(latest.code == 0);
    auto latest_header = nlohmann::json::parse(latest.out);
    REQUIRE(latest_header.at("step").get<std::uint64_t>() == 6);
}

TEST_CASE("the seed flag changes training and the run is otherwise deterministic") {
    Pipeline& p = pipeline();
    fs::path fast_cfg = p.tmp / "fast.cfg";
    support::write_file(fast_cfg, p.config_text() +
                                      "train.max_steps = 1\ntrain.eval_interval = 1\n");

    auto train_into = [&](const std::string& name, const std::string& seed) {
        fs::path dir = copy_work_dir(p.tmp / name);
        CliResult r = run_cli({"--config", fast_cfg.string(), "--work-dir", dir.string(),
                               "--seed", seed, "train"});
        INFO(r.err);
        REQUIRE(r.code == 0);
        return std::pair<fs::path, CliResult>{dir, r};
    };

    auto [d1, r1] = train_into("seed-a", "1");
    auto [d2, r2] = train_into("seed-b", "2");
    auto [d3, r3] = train_into("seed-a-again", "1");

    REQUIRE(r1.out == r3.out);
    REQUIRE(support::read_file(d1 / "best.ckpt") == support::read_file(d3 / "best.ckpt"));
    REQUIRE(support::read_file(d1 / "report.csv") == support::read_file(d3 / "report.csv"));
    REQUIRE(r1.out != r2.out);  // different init, different loss
}

TEST_CASE("usage problems exit with code 1") {
    Pipeline& p = pipeline();

    CliResult none = run_cli({});
    REQUIRE(none.code == 1);
    REQUIRE(none.err.find("error:") != std::string::npos);

    CliResult unknown = run_cli({"--bogus", "train"});
    REQUIRE(unknown.code == 1);

    CliResult bad_split = run_cli(p.args({"eval", "--split", "bogus"}));
    REQUIRE(bad_split.code == 1);

    CliResult no_prompt = run_cli(p.args({"generate"}));
    REQUIRE(no_prompt.code == 1);
    REQUIRE(no_prompt.err.find("at least one --prompt") != std::string::npos);

    CliResult help = run_cli({"--help"});
    REQUIRE(help.code == 0);
    REQUIRE(help.out.find("prepare") != std::string::npos);
    REQUIRE(help.out.find("generate") != std::string::npos);
}

TEST_CASE("input problems exit with code 2") {
    Pipeline& p = pipeline();

    CliResult missing_corpus =
        run_cli({"--work-dir", (p.tmp / "w1").string(), "prepare", "--corpus-dir",
                 (p.tmp / "no-such-corpus").string()});
    REQUIRE(missing_corpus.code == 2);
    REQUIRE(missing_corpus.err.find("does not exist") != std::string::npos);

    fs::path empty_corpus = p.tmp / "empty-corpus";
    fs::create_directories(empty_corpus);
    support::write_file(empty_corpus / "notes.md", "not a corpus file\n");
    CliResult no_txt = run_cli({"--work-dir", (p.tmp / "w2").string(), "prepare",
                                "--corpus-dir", empty_corpus.string()});
    REQUIRE(no_txt.code == 2);
    REQUIRE(no_txt.err.find("no .txt files") != std::string::npos);

    CliResult no_split = run_cli({"--work-dir", (p.tmp / "w3").string(), "train-tokenizer"});
    REQUIRE(no_split.code == 2);
    REQUIRE(no_split.err.find("training split") != std::string::npos);

    CliResult no_ckpt = run_cli({"--work-dir", (p.tmp / "w4").string(), "eval"});
    REQUIRE(no_ckpt.code == 2);
    REQUIRE(no_ckpt.err.find("no checkpoint") != std::string::npos);

    fs::path bad_cfg = p.tmp / "bad.cfg";
    support::write_file(bad_cfg, "bogus = 1\n");
    CliResult unknown_key = run_cli({"--config", bad_cfg.string(), "train"});
    REQUIRE(unknown_key.code == 2);
    REQUIRE(unknown_key.err.find("unknown key \"bogus\"") != std::string::npos);
    REQUIRE(unknown_key.err.find("line 1") != std::string::npos);

    CliResult no_cfg = run_cli({"--config", (p.tmp / "no-such.cfg").string(), "train"});
    REQUIRE(no_cfg.code == 2);
    REQUIRE(no_cfg.err.find("cannot open config file") != std::string::npos);

    fs::path mismatch_cfg = p.tmp / "mismatch.cfg";
    support::write_file(mismatch_cfg, p.config_text() + "model.vocab_size = 9999\n");
    CliResult mismatch = run_cli({"--config", mismatch_cfg.string(), "train"});
    REQUIRE(mismatch.code == 2);
    REQUIRE(mismatch.err.find("does not match the tokenizer vocabulary") != std::string::npos);

    CliResult bad_temp = run_cli(p.args({"generate", "--prompt", "x", "--temperature=-1"}));
    REQUIRE(bad_temp.code == 2);
    REQUIRE(bad_temp.err.find("temperature") != std::string::npos);
}

TEST_CASE("a tokenizer swap after training exits with code 3") {
    Pipeline& p = pipeline();
    fs::path dir = copy_work_dir(p.tmp / "swapped");
    // Valid tokenizer, different bytes: the checkpoint hash no longer matches.
    aglm::Tokenizer other = aglm::Tokenizer::train("aaaa bbbb aaaa bbbb", 259);
    support::write_file(dir / "tokenizer.txt", other.serialize());

    CliResult r = run_cli({"--work-dir", dir.string(), "eval", "--split", "val"});
    REQUIRE(r.code == 3);
    REQUIRE(r.err.find("does not match the checkpoint") != std::string::npos);

    CliResult g = run_cli({"--work-dir", dir.string(), "generate", "--prompt", "x"});
    REQUIRE(g.code == 3);
}

TEST_CASE("work dir resolution prefers flag, then config, then environment") {
    Pipeline& p = pipeline();

    // Environment only: the error message names the env-provided directory.
    fs::path env_dir = p.tmp / "env-work";
    setenv("AGLM_WORK_DIR", env_dir.string().c_str(), 1);
    CliResult from_env = run_cli({"eval"});
    REQUIRE(from_env.code == 2);
    REQUIRE(from_env.err.find(env_dir.string()) != std::string::npos);

    // Config file beats the environment.
    CliResult from_cfg = run_cli(p.args({"inspect"}));
    REQUIRE(from_cfg.code == 0);

    // Flag beats both.
    fs::path flag_dir = p.tmp / "flag-work";
    CliResult from_flag = run_cli(p.args({"--work-dir", flag_dir.string(), "eval"}));
    REQUIRE(from_flag.code == 2);
    REQUIRE(from_flag.err.find(flag_dir.string()) != std::string::npos);
    unsetenv("AGLM_WORK_DIR");

    // Without any setting the default is "work".
    CliResult fallback = run_cli({"inspect", "--checkpoint",
                                  (p.work_dir / "best.ckpt").string()});
    REQUIRE(fallback.code == 0);
}
