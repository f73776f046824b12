// memlab command-line driver. Links the C API only; run-directory layout,
// TOML config, locking, digests, and report assembly live here.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "memlab.h"
#include "sha256.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

namespace {

struct CliError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] void die(const std::string& msg) { throw CliError(msg); }

void check(memlab_status st, const std::string& what) {
    if (st != MEMLAB_OK) {
        die(what + ": " + memlab_status_name(st) + ": " + memlab_last_error());
    }
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) die("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_atomic(const fs::path& p, const std::string& text) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) die("cannot write " + tmp.string());
        out << text;
    }
    fs::rename(tmp, p);
}

std::string file_digest(const fs::path& p) { return sha256::hex_digest(read_file(p)); }

// RAII run-directory lock + manifest record
class RunScope {
public:
    RunScope(fs::path run_dir, std::string command, json config)
        : run_dir_(std::move(run_dir)),
          command_(std::move(command)),
          config_(std::move(config)),
          start_(Clock::now()) {
        fs::create_directories(run_dir_);
        lock_path_ = run_dir_ / ".lock";
        lock_fd_ = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (lock_fd_ < 0) {
            die("run directory is locked (" + lock_path_.string() +
                " exists); another command may be running — remove the lock file "
                "if it is stale");
        }
        const std::string pid = std::to_string(::getpid()) + "\n";
        (void)!::write(lock_fd_, pid.c_str(), pid.size());
    }

    ~RunScope() {
        if (lock_fd_ >= 0) {
            ::close(lock_fd_);
            std::error_code ec;
            fs::remove(lock_path_, ec);
        }
    }

    const fs::path& dir() const { return run_dir_; }

    // validates the input against any manifest that lists it, then records it
    void input(const fs::path& p, const std::string& hint = "") {
        if (!fs::exists(p)) {
            std::string msg = "missing prerequisite artifact: " + p.string();
            if (!hint.empty()) msg += " (" + hint + ")";
            die(msg);
        }
        const std::string digest = file_digest(p);
        verify_against_manifest(p, digest);
        inputs_[p.string()] = digest;
    }

    void output(const fs::path& p) {
        if (!fs::exists(p)) die("expected output missing: " + p.string());
        outputs_[p.string()] = file_digest(p);
    }

    void stage(const std::string& name, double seconds) { durations_[name] = seconds; }
    void result(json r) { result_ = std::move(r); }

    void finalize() {
        durations_["total"] =
            std::chrono::duration<double>(Clock::now() - start_).count();
        json record;
        record["command"] = command_;
        record["config"] = config_;
        record["durations_s"] = durations_;
        record["inputs"] = inputs_;
        record["outputs"] = outputs_;
        if (!result_.is_null()) record["result"] = result_;

        const fs::path mpath = run_dir_ / "manifest.json";
        json manifest;
        if (fs::exists(mpath)) {
            manifest = json::parse(read_file(mpath), nullptr, false);
            if (manifest.is_discarded() || !manifest.contains("runs")) {
                manifest = json{{"runs", json::array()}};
            }
        } else {
            manifest = json{{"runs", json::array()}};
        }
        manifest["runs"].push_back(record);
        write_file_atomic(mpath, manifest.dump(2) + "\n");
    }

private:
    void verify_against_manifest(const fs::path& p, const std::string& digest) {
        // the producing manifest lives in the run directory, which may be the
        // file's parent or grandparent (checkpoints/ subdirectory)
        const fs::path canon = fs::weakly_canonical(p);
        std::optional<std::string> expected;
        for (const fs::path dir : {p.parent_path(), p.parent_path().parent_path()}) {
            const fs::path mpath = dir / "manifest.json";
            if (dir.empty() || !fs::exists(mpath)) continue;
            json manifest = json::parse(read_file(mpath), nullptr, false);
            if (manifest.is_discarded() || !manifest.contains("runs")) continue;
            // newest record wins
            for (const auto& run : manifest["runs"]) {
                if (!run.contains("outputs")) continue;
                for (const auto& [path, dig] : run["outputs"].items()) {
                    if (fs::weakly_canonical(fs::path(path)) == canon) {
                        expected = dig.get<std::string>();
                    }
                }
            }
        }
        if (expected && *expected != digest) {
            die("artifact digest mismatch for " + p.string() +
                " (stale or modified since it was produced)");
        }
    }

    fs::path run_dir_;
    fs::path lock_path_;
    int lock_fd_ = -1;
    std::string command_;
    json config_;
    Clock::time_point start_;
    std::map<std::string, double> durations_;
    std::map<std::string, std::string> inputs_, outputs_;
    json result_;
};

double elapsed(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string json_result(memlab_status st, const std::string& what,
                        char* buf) {
    check(st, what);
    return std::string(buf);
}

// owned model handle
struct ModelHandle {
    memlab_model* m = nullptr;
    ~ModelHandle() { memlab_model_free(m); }
    memlab_model** out() { return &m; }
};

struct CorpusHandle {
    memlab_corpus* c = nullptr;
    ~CorpusHandle() { memlab_corpus_free(c); }
};

// ---------------------------------------------------------------------------
// option bundles shared by several subcommands

struct CorpusArgs {
    std::string data, vocab, splits;

    void add_to(CLI::App* cmd, const fs::path& run) {
        cmd->add_option("--data", data, "corpus data file (.txt or .jsonl)");
        cmd->add_option("--vocab", vocab, "vocabulary JSON path");
        cmd->add_option("--splits", splits, "split manifest JSONL path");
        (void)run;
    }

    CorpusHandle open(RunScope& scope) const {
        CorpusHandle h;
        const fs::path run = scope.dir();
        const std::string d = data.empty() ? (run / "data.txt").string() : data;
        const std::string v = vocab.empty() ? (run / "vocab.json").string() : vocab;
        const std::string s = splits.empty() ? (run / "splits.jsonl").string() : splits;
        scope.input(d, "provide --data or run `memlab corpus build` first");
        scope.input(v, "run `memlab corpus build` first");
        scope.input(s, "run `memlab corpus build` first");
        check(memlab_corpus_open(d.c_str(), v.c_str(), s.c_str(), &h.c), "corpus open");
        return h;
    }
};

struct ModelArchArgs {
    int layers = 4, heads = 4, d_model = 128, d_ff = 512, context = 256;
    uint64_t seed = 0;

    void add_to(CLI::App* cmd, const std::string& prefix, int l, int h, int dm, int df) {
        layers = l; heads = h; d_model = dm; d_ff = df;
        cmd->add_option("--" + prefix + "layers", layers, "transformer layers")
            ->capture_default_str();
        cmd->add_option("--" + prefix + "heads", heads, "attention heads")
            ->capture_default_str();
        cmd->add_option("--" + prefix + "d-model", d_model, "model width")
            ->capture_default_str();
        cmd->add_option("--" + prefix + "d-ff", d_ff, "feed-forward width")
            ->capture_default_str();
        cmd->add_option("--" + prefix + "context", context, "context length")
            ->capture_default_str();
        cmd->add_option("--" + prefix + "seed", seed, "init seed")->capture_default_str();
    }

    json to_json(int vocab_size) const {
        return json{{"n_layers", layers},   {"n_heads", heads},
                    {"d_model", d_model},   {"d_ff", d_ff},
                    {"context_len", context}, {"vocab_size", vocab_size},
                    {"seed", seed}};
    }
};

struct InducerCfgArgs {
    int max_it = 10, pool_capacity = 256, finetune_epochs = 8;
    double finetune_lr = 5e-4;
    int rank = 8;
    double alpha = 16.0;
    int top_k = 48, beams = 4;
    double lambda = 0.1;
    int max_prompt_len = 16, trials = 5;
    double tau = 1.0;
    bool no_rejection = false;
    uint64_t seed = 0;

    void add_to(CLI::App* cmd, const std::string& px = "") {
        auto n = [&](const char* name) { return "--" + px + name; };
        cmd->add_option(n("max-it"), max_it, "training iterations")->capture_default_str();
        cmd->add_option(n("pool-capacity"), pool_capacity, "prompt pool capacity")
            ->capture_default_str();
        cmd->add_option(n("ft-epochs"), finetune_epochs, "adapter fine-tune epochs")
            ->capture_default_str();
        cmd->add_option(n("ft-lr"), finetune_lr, "adapter fine-tune learning rate")
            ->capture_default_str();
        cmd->add_option(n("rank"), rank, "adapter rank")->capture_default_str();
        cmd->add_option(n("alpha"), alpha, "adapter alpha")->capture_default_str();
        cmd->add_option(n("top-k"), top_k, "next-token proposals per step")
            ->capture_default_str();
        cmd->add_option(n("beams"), beams, "beam count")->capture_default_str();
        cmd->add_option(n("lambda"), lambda, "readability weight")->capture_default_str();
        cmd->add_option(n("max-prompt-len"), max_prompt_len, "prompt length budget")
            ->capture_default_str();
        cmd->add_option(n("tau"), tau, "beam selection temperature")->capture_default_str();
        cmd->add_flag(n("no-rejection"), no_rejection,
                      "admit every candidate to the pool (ablation)");
        cmd->add_option(n("seed"), seed, "search seed")->capture_default_str();
    }

    json to_json() const {
        return json{{"max_it", max_it},
                    {"pool_capacity", pool_capacity},
                    {"finetune_epochs", finetune_epochs},
                    {"finetune_lr", finetune_lr},
                    {"adapter_rank", rank},
                    {"adapter_alpha", alpha},
                    {"top_k", top_k},
                    {"beams", beams},
                    {"lambda", lambda},
                    {"max_prompt_len", max_prompt_len},
                    {"trials", trials},
                    {"tau", tau},
                    {"rejection_sampling", !no_rejection},
                    {"seed", seed}};
    }
};

// ---------------------------------------------------------------------------
// report: consolidate completed runs

struct ScoreRowLite {
    std::string sample_id;
    int trial = 0;
    double score = 0.0;
};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur.push_back('"');
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

std::vector<ScoreRowLite> parse_scores_csv(const fs::path& p) {
    std::istringstream in(read_file(p));
    std::string line;
    std::vector<ScoreRowLite> rows;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        auto f = split_csv_line(line);
        if (f.size() < 4) continue;
        rows.push_back({f[0], std::atoi(f[1].c_str()), std::atof(f[2].c_str())});
    }
    return rows;
}

void run_report(const std::vector<std::string>& run_dirs, const fs::path& out_dir) {
    if (run_dirs.empty()) die("report: no run directories given");
    fs::create_directories(out_dir);

    const std::vector<int> budgets = {1, 5, 10, 20, 30};
    std::string summary_csv = "run,method,budget,avg_mem,hit_rate\n";
    std::string summary_txt;
    std::string timing_csv = "method,cum_seconds,mem\n";
    struct TimingRow {
        std::string method;
        double t, mem;
    };
    std::vector<TimingRow> timing_rows;
    size_t completed = 0;

    for (const auto& dir : run_dirs) {
        const fs::path run(dir);
        const fs::path mpath = run / "manifest.json";
        if (!fs::exists(mpath)) die("report: no manifest in " + dir);
        json manifest = json::parse(read_file(mpath), nullptr, false);
        if (manifest.is_discarded()) die("report: bad manifest in " + dir);
        ++completed;

        // extraction tables: per-method, per-budget best-of-k aggregates
        for (const auto& rec : manifest["runs"]) {
            if (rec.value("command", "") != "extract") continue;
            const std::string method = rec["result"].value("method", "?");
            const fs::path scores = run / rec["result"].value("scores_file", "scores.csv");
            if (!fs::exists(scores)) continue;
            auto rows = parse_scores_csv(scores);
            std::map<std::string, std::vector<ScoreRowLite>> by_sample;
            int max_trial = 0;
            for (auto& r : rows) {
                by_sample[r.sample_id].push_back(r);
                max_trial = std::max(max_trial, r.trial + 1);
            }
            for (int budget : budgets) {
                // single-trial methods (e.g. the P-S baseline) are flat across
                // budgets; everything else reports budgets it actually ran
                if (max_trial > 1 && budget > max_trial) continue;
                double sum = 0.0;
                size_t hits = 0;
                for (const auto& [id, list] : by_sample) {
                    double best = 0.0;
                    for (const auto& r : list) {
                        if (r.trial < budget) best = std::max(best, r.score);
                    }
                    sum += best;
                    if (best == 1.0) ++hits;
                }
                const double n = static_cast<double>(by_sample.size());
                summary_csv += fs::path(dir).filename().string() + "," + method + "," +
                               std::to_string(budget) + "," +
                               std::to_string(100.0 * sum / n) + "," +
                               std::to_string(100.0 * static_cast<double>(hits) / n) +
                               "\n";
            }
        }

        // timing rows from gcg traces
        std::vector<fs::path> trace_files;
        for (const auto& rec : manifest["runs"]) {
            if (rec.value("command", "") == "gcg" && rec.contains("result")) {
                trace_files.push_back(run / rec["result"].value("trace_file", "trace.csv"));
            }
        }
        if (trace_files.empty() && fs::exists(run / "trace.csv")) {
            trace_files.push_back(run / "trace.csv");
        }
        for (const fs::path& trace : trace_files) {
            if (!fs::exists(trace)) continue;
            std::istringstream in(read_file(trace));
            std::string line;
            bool header = true;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                if (header) {
                    header = false;
                    continue;
                }
                auto f = split_csv_line(line);
                if (f.size() < 5) continue;
                timing_rows.push_back({f[4], std::atof(f[3].c_str()),
                                       std::atof(f[2].c_str())});
            }
        }
    }
    if (completed == 0) die("report: no completed runs");

    std::sort(timing_rows.begin(), timing_rows.end(),
              [](const TimingRow& a, const TimingRow& b) {
                  if (a.t != b.t) return a.t < b.t;
                  return a.method < b.method;
              });
    for (const auto& r : timing_rows) {
        timing_csv += r.method + "," + std::to_string(r.t) + "," +
                      std::to_string(r.mem) + "\n";
    }

    summary_txt = "extraction summary (per method and trial budget)\n" + summary_csv;
    write_file_atomic(out_dir / "summary.csv", summary_csv);
    write_file_atomic(out_dir / "timing.csv", timing_csv);
    write_file_atomic(out_dir / "summary.txt", summary_txt);
    std::printf("%s", summary_txt.c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"memlab: train tiny LMs, induce extraction prompts, measure "
                 "memorization, and audit datasets"};
    app.set_config("--config", "", "TOML config file (flags override values)");
    app.allow_config_extras(false);
    app.require_subcommand(1);

    std::string run_dir;
    {
        const char* root = std::getenv("MEMLAB_RUN_ROOT");
        run_dir = (root ? std::string(root) : "runs") + "/default";
    }
    int threads = 0;
    app.add_option("--run", run_dir, "run directory for artifacts")
        ->capture_default_str();
    app.add_option("--threads", threads, "thread budget (0 = hardware)")
        ->capture_default_str();

    // ---- corpus ----
    auto* corpus_cmd = app.add_subcommand("corpus", "corpus construction");
    corpus_cmd->require_subcommand(1);

    auto* synth = corpus_cmd->add_subcommand("synth", "write a synthetic corpus");
    std::string synth_out;
    size_t synth_records = 200;
    uint64_t synth_seed = 1;
    std::string synth_style = "pairs";
    synth->add_option("--out", synth_out, "output data file");
    synth->add_option("--records", synth_records, "record count")->capture_default_str();
    synth->add_option("--seed", synth_seed, "generator seed")->capture_default_str();
    synth->add_option("--style", synth_style, "pairs|plain")->capture_default_str();

    auto* build = corpus_cmd->add_subcommand("build", "tokenize, pair, and split");
    std::string build_data, build_mode = "word";
    double build_ratio = 0.5;
    std::vector<double> build_fractions = {0.8, 0.1, 0.1};
    uint64_t build_seed = 0;
    int build_context = 256;
    build->add_option("--data", build_data, "input data file")->required();
    build->add_option("--mode", build_mode, "char|word")->capture_default_str();
    build->add_option("--split-ratio", build_ratio, "prefix fraction")
        ->capture_default_str();
    build->add_option("--fractions", build_fractions, "train,test,validation")
        ->expected(3);
    build->add_option("--seed", build_seed, "partition seed")->capture_default_str();
    build->add_option("--context-len", build_context, "truncation length")
        ->capture_default_str();

    // ---- target ----
    auto* target_cmd = app.add_subcommand("target", "target model training");
    target_cmd->require_subcommand(1);

    auto* ttrain = target_cmd->add_subcommand("train", "train the target LM");
    CorpusArgs ttrain_corpus;
    ttrain_corpus.add_to(ttrain, run_dir);
    ModelArchArgs ttrain_arch;
    ttrain_arch.add_to(ttrain, "", 4, 4, 128, 512);
    std::string ttrain_out;
    int ttrain_epochs = 200, ttrain_batch = 8, ttrain_stream = 48, ttrain_dup = 1;
    double ttrain_lr = 1e-3;
    bool ttrain_no_pack = false;
    uint64_t ttrain_seed = 0;
    std::vector<std::string> ttrain_splits = {"train", "test", "validation"};
    ttrain->add_option("--out", ttrain_out, "checkpoint path");
    ttrain->add_option("--epochs", ttrain_epochs, "epochs")->capture_default_str();
    ttrain->add_option("--lr", ttrain_lr, "learning rate")->capture_default_str();
    ttrain->add_option("--batch", ttrain_batch, "batch size")->capture_default_str();
    ttrain->add_option("--stream-len", ttrain_stream, "packed stream length")
        ->capture_default_str();
    ttrain->add_option("--dup", ttrain_dup, "record copies per epoch")
        ->capture_default_str();
    ttrain->add_flag("--no-pack", ttrain_no_pack, "train on raw records, no packing");
    ttrain->add_option("--train-seed", ttrain_seed, "training seed")
        ->capture_default_str();
    ttrain->add_option("--train-splits", ttrain_splits,
                       "splits the target memorizes");

    auto* tfine = target_cmd->add_subcommand("finetune", "LoRA-finetune a checkpoint");
    CorpusArgs tfine_corpus;
    tfine_corpus.add_to(tfine, run_dir);
    std::string tfine_in, tfine_out, tfine_split = "train";
    int tfine_epochs = 8, tfine_rank = 8, tfine_batch = 8;
    double tfine_lr = 5e-4, tfine_alpha = 16.0;
    uint64_t tfine_seed = 0;
    tfine->add_option("--in", tfine_in, "input checkpoint")->required();
    tfine->add_option("--out", tfine_out, "output checkpoint");
    tfine->add_option("--split", tfine_split, "pair split")->capture_default_str();
    tfine->add_option("--epochs", tfine_epochs, "epochs")->capture_default_str();
    tfine->add_option("--lr", tfine_lr, "learning rate")->capture_default_str();
    tfine->add_option("--rank", tfine_rank, "adapter rank")->capture_default_str();
    tfine->add_option("--alpha", tfine_alpha, "adapter alpha")->capture_default_str();
    tfine->add_option("--batch", tfine_batch, "batch size")->capture_default_str();
    tfine->add_option("--seed", tfine_seed, "seed")->capture_default_str();

    // ---- inducer ----
    auto* inducer_cmd = app.add_subcommand("inducer", "memory-inducing model");
    inducer_cmd->require_subcommand(1);
    auto* itrain = inducer_cmd->add_subcommand("train", "train the inducer");
    CorpusArgs itrain_corpus;
    itrain_corpus.add_to(itrain, run_dir);
    std::string itrain_target, itrain_out, itrain_base_out, itrain_split = "train";
    std::string itrain_base_model;
    ModelArchArgs itrain_arch;
    itrain_arch.add_to(itrain, "ind-", 2, 4, 64, 256);
    InducerCfgArgs itrain_cfg;
    itrain_cfg.add_to(itrain);
    itrain->add_option("--target", itrain_target, "target checkpoint");
    itrain->add_option("--base-model", itrain_base_model,
                       "pre-trained readability model checkpoint (defaults to a "
                       "snapshot of the fresh inducer)");
    itrain->add_option("--out", itrain_out, "inducer checkpoint path");
    itrain->add_option("--base-out", itrain_base_out, "readability snapshot path");
    itrain->add_option("--split", itrain_split, "training split")->capture_default_str();

    // ---- extract ----
    auto* extract = app.add_subcommand("extract", "best-of-k extraction over a split");
    CorpusArgs ex_corpus;
    ex_corpus.add_to(extract, run_dir);
    std::string ex_target, ex_inducer, ex_base, ex_split = "test", ex_baseline, ex_out;
    int ex_trials = 5;
    uint64_t ex_seed = 0;
    InducerCfgArgs ex_cfg;
    ex_cfg.add_to(extract);
    ModelArchArgs ex_arch;
    ex_arch.add_to(extract, "ind-", 2, 4, 64, 256);
    extract->add_option("--target", ex_target, "target checkpoint");
    extract->add_option("--inducer", ex_inducer, "trained inducer checkpoint");
    extract->add_option("--base", ex_base, "readability snapshot checkpoint");
    extract->add_option("--split", ex_split, "evaluation split")->capture_default_str();
    extract->add_option("--baseline", ex_baseline,
                        "ps|untrained (omit for the trained inducer)");
    extract->add_option("--trials", ex_trials, "best-of-k trials")
        ->capture_default_str();
    extract->add_option("--extract-seed", ex_seed, "trial seed family")
        ->capture_default_str();
    double ex_epsilon = -1.0;
    extract->add_option("--epsilon", ex_epsilon,
                        "also report the share of samples with best score >= 1-epsilon");
    extract->add_option("--scores", ex_out, "scores CSV path");

    // ---- gcg ----
    auto* gcg = app.add_subcommand("gcg", "coordinate-gradient prompt refinement");
    CorpusArgs g_corpus;
    g_corpus.add_to(gcg, run_dir);
    std::string g_target, g_inducer, g_base, g_split = "test", g_out;
    bool g_warm = false, g_cold = false;
    int g_samples = 20, g_steps = 100, g_ntokens = 16, g_topk = 48, g_batch = 64;
    bool g_literal = false;
    uint64_t g_seed = 0;
    InducerCfgArgs g_cfg;
    g_cfg.add_to(gcg);
    gcg->add_option("--target", g_target, "target checkpoint");
    gcg->add_flag("--warm", g_warm, "warm start from inducer prompts");
    gcg->add_flag("--cold", g_cold, "cold start from random tokens");
    gcg->add_option("--inducer", g_inducer, "trained inducer checkpoint (warm)");
    gcg->add_option("--base", g_base, "readability snapshot checkpoint (warm)");
    gcg->add_option("--split", g_split, "evaluation split")->capture_default_str();
    gcg->add_option("--samples", g_samples, "samples to optimize")->capture_default_str();
    gcg->add_option("--steps", g_steps, "optimization steps")->capture_default_str();
    gcg->add_option("--n-tokens", g_ntokens, "cold-start prompt length")
        ->capture_default_str();
    gcg->add_option("--gcg-top-k", g_topk, "gradient candidates per position")
        ->capture_default_str();
    gcg->add_option("--gcg-batch", g_batch, "mutants per step")->capture_default_str();
    gcg->add_flag("--literal-update", g_literal,
                  "take the best mutant unconditionally (no incumbent)");
    gcg->add_option("--induce-trials", g_cfg.trials,
                    "best-of-k trials for the warm-start induction")
        ->capture_default_str();
    gcg->add_option("--gcg-seed", g_seed, "search seed")->capture_default_str();
    gcg->add_option("--trace", g_out, "trace CSV path");

    // ---- audit ----
    auto* audit = app.add_subcommand("audit", "dataset-level memorization audit");
    CorpusArgs a_corpus;
    a_corpus.add_to(audit, run_dir);
    std::string a_trained, a_untrained, a_inducer, a_base, a_eval = "test", a_out;
    double a_alpha = 0.05;
    int a_trials = 5;
    uint64_t a_seed = 0;
    ModelArchArgs a_proxy;
    a_proxy.add_to(audit, "proxy-", 4, 4, 128, 512);
    ModelArchArgs a_ind;
    a_ind.add_to(audit, "ind-", 2, 4, 64, 256);
    InducerCfgArgs a_cfg;
    a_cfg.add_to(audit, "search-");
    int a_epochs = 120, a_batch = 8, a_stream = 48;
    double a_lr = 1e-3;
    audit->add_option("--suspect-trained", a_trained, "suspect checkpoint (trained)")
        ->required();
    audit->add_option("--suspect-untrained", a_untrained,
                      "suspect checkpoint (untrained)")
        ->required();
    audit->add_option("--inducer", a_inducer, "reuse a trained inducer checkpoint");
    audit->add_option("--base", a_base, "readability snapshot for the reused inducer");
    audit->add_option("--alpha", a_alpha, "significance level")->capture_default_str();
    audit->add_option("--audit-trials", a_trials, "best-of-k trials per sample")
        ->capture_default_str();
    audit->add_option("--eval-split", a_eval, "scored split")->capture_default_str();
    audit->add_option("--audit-seed", a_seed, "audit seed")->capture_default_str();
    audit->add_option("--proxy-epochs", a_epochs, "proxy training epochs")
        ->capture_default_str();
    audit->add_option("--proxy-lr", a_lr, "proxy learning rate")->capture_default_str();
    audit->add_option("--proxy-batch", a_batch, "proxy batch size")
        ->capture_default_str();
    audit->add_option("--proxy-stream-len", a_stream, "proxy stream length")
        ->capture_default_str();
    audit->add_option("--report", a_out, "audit report JSON path");

    // ---- report ----
    auto* report = app.add_subcommand("report", "consolidate completed runs");
    std::vector<std::string> rep_runs;
    std::string rep_out;
    report->add_option("runs", rep_runs, "run directories")->required();
    report->add_option("--out", rep_out, "report output directory");

    CLI11_PARSE(app, argc, argv);
    memlab_set_threads(threads);
    const fs::path run(run_dir);

    try {

    auto config_snapshot = [&](CLI::App* cmd) {
        json j;
        for (const auto* opt : cmd->get_options()) {
            if (opt->get_name().empty() || opt->count() == 0) continue;
            std::string key = opt->get_name();
            while (!key.empty() && key.front() == '-') key.erase(key.begin());
            j[key] = opt->as<std::string>();
        }
        return j;
    };

    if (synth->parsed()) {
        RunScope scope(run, "corpus synth", config_snapshot(synth));
        const std::string out =
            synth_out.empty() ? (run / "data.txt").string() : synth_out;
        json opts = {{"records", synth_records}, {"seed", synth_seed},
                     {"style", synth_style}};
        check(memlab_corpus_synth(out.c_str(), opts.dump().c_str()), "corpus synth");
        scope.output(out);
        scope.finalize();
        std::printf("wrote %s\n", out.c_str());
        return 0;
    }

    if (build->parsed()) {
        RunScope scope(run, "corpus build", config_snapshot(build));
        scope.input(build_data);
        json opts = {{"mode", build_mode},
                     {"split_ratio", build_ratio},
                     {"fractions", build_fractions},
                     {"seed", build_seed},
                     {"context_len", build_context}};
        CorpusHandle h;
        check(memlab_corpus_build(build_data.c_str(), opts.dump().c_str(), &h.c),
              "corpus build");
        const std::string vocab = (run / "vocab.json").string();
        const std::string splits = (run / "splits.jsonl").string();
        check(memlab_corpus_save(h.c, vocab.c_str(), splits.c_str()), "corpus save");
        // keep a copy of the data next to the artifacts so later stages are
        // self-contained
        const fs::path data_copy = run / "data.txt";
        if (fs::path(build_data) != data_copy) {
            write_file_atomic(data_copy, read_file(build_data));
        }
        char info[512];
        size_t len = 0;
        check(memlab_corpus_info(h.c, info, sizeof(info), &len), "corpus info");
        scope.output(vocab);
        scope.output(splits);
        scope.output(data_copy);
        scope.result(json::parse(info));
        scope.finalize();
        std::printf("%s\n", info);
        return 0;
    }

    if (ttrain->parsed()) {
        RunScope scope(run, "target train", config_snapshot(ttrain));
        auto corpus = ttrain_corpus.open(scope);
        char info[512];
        size_t len = 0;
        check(memlab_corpus_info(corpus.c, info, sizeof(info), &len), "corpus info");
        const int vocab_size = json::parse(info)["vocab_size"].get<int>();

        ModelHandle model;
        check(memlab_model_create(ttrain_arch.to_json(vocab_size).dump().c_str(),
                                  model.out()),
              "model create");
        json topts = {{"epochs", ttrain_epochs},
                      {"lr", ttrain_lr},
                      {"batch_size", ttrain_batch},
                      {"pack", !ttrain_no_pack},
                      {"stream_len", ttrain_stream},
                      {"dup", ttrain_dup},
                      {"seed", ttrain_seed},
                      {"splits", ttrain_splits}};
        const auto t0 = Clock::now();
        check(memlab_model_train(model.m, corpus.c, topts.dump().c_str()),
              "target train");
        scope.stage("train", elapsed(t0));

        const std::string out = ttrain_out.empty()
                                    ? (run / "checkpoints" / "target.ckpt").string()
                                    : ttrain_out;
        fs::create_directories(fs::path(out).parent_path());
        check(memlab_model_save(model.m, out.c_str()), "model save");
        scope.output(out);
        scope.finalize();
        std::printf("trained target -> %s\n", out.c_str());
        return 0;
    }

    if (tfine->parsed()) {
        RunScope scope(run, "target finetune", config_snapshot(tfine));
        auto corpus = tfine_corpus.open(scope);
        scope.input(tfine_in, "run `memlab target train` first");
        ModelHandle model;
        check(memlab_model_load(tfine_in.c_str(), model.out()), "model load");
        json fopts = {{"split", tfine_split}, {"epochs", tfine_epochs},
                      {"lr", tfine_lr},       {"rank", tfine_rank},
                      {"alpha", tfine_alpha}, {"batch_size", tfine_batch},
                      {"seed", tfine_seed}};
        const auto t0 = Clock::now();
        check(memlab_model_finetune(model.m, corpus.c, fopts.dump().c_str()),
              "target finetune");
        scope.stage("finetune", elapsed(t0));
        const std::string out = tfine_out.empty()
                                    ? (run / "checkpoints" / "target_ft.ckpt").string()
                                    : tfine_out;
        fs::create_directories(fs::path(out).parent_path());
        check(memlab_model_save(model.m, out.c_str()), "model save");
        scope.output(out);
        scope.finalize();
        std::printf("finetuned target -> %s\n", out.c_str());
        return 0;
    }

    if (itrain->parsed()) {
        RunScope scope(run, "inducer train", config_snapshot(itrain));
        auto corpus = itrain_corpus.open(scope);
        const std::string target_path =
            itrain_target.empty() ? (run / "checkpoints" / "target.ckpt").string()
                                  : itrain_target;
        scope.input(target_path, "run `memlab target train` first");
        ModelHandle target;
        check(memlab_model_load(target_path.c_str(), target.out()), "target load");

        char info[512];
        size_t len = 0;
        check(memlab_corpus_info(corpus.c, info, sizeof(info), &len), "corpus info");
        const int vocab_size = json::parse(info)["vocab_size"].get<int>();
        ModelHandle inducer;
        check(memlab_model_create(itrain_arch.to_json(vocab_size).dump().c_str(),
                                  inducer.out()),
              "inducer create");

        json icfg = itrain_cfg.to_json();
        icfg["split"] = itrain_split;
        const std::string pool = (run / "pool.jsonl").string();
        const std::string diag = (run / "train_diag.csv").string();
        ModelHandle base_model;
        if (!itrain_base_model.empty()) {
            scope.input(itrain_base_model, "train one with `memlab target train`");
            check(memlab_model_load(itrain_base_model.c_str(), base_model.out()),
                  "base model load");
        }
        ModelHandle base;
        const auto t0 = Clock::now();
        check(memlab_inducer_train(inducer.m, target.m, corpus.c, base_model.m,
                                   icfg.dump().c_str(), pool.c_str(), diag.c_str(),
                                   base.out()),
              "inducer train");
        scope.stage("train", elapsed(t0));

        const std::string out = itrain_out.empty()
                                    ? (run / "checkpoints" / "inducer.ckpt").string()
                                    : itrain_out;
        const std::string base_out =
            itrain_base_out.empty() ? (run / "checkpoints" / "base.ckpt").string()
                                    : itrain_base_out;
        fs::create_directories(fs::path(out).parent_path());
        check(memlab_model_save(inducer.m, out.c_str()), "inducer save");
        check(memlab_model_save(base.m, base_out.c_str()), "base save");
        scope.output(out);
        scope.output(base_out);
        scope.output(pool);
        scope.output(diag);
        scope.finalize();
        std::printf("trained inducer -> %s\n", out.c_str());
        return 0;
    }

    if (extract->parsed()) {
        RunScope scope(run, "extract", config_snapshot(extract));
        auto corpus = ex_corpus.open(scope);
        const std::string target_path =
            ex_target.empty() ? (run / "checkpoints" / "target.ckpt").string()
                              : ex_target;
        scope.input(target_path, "run `memlab target train` first");
        ModelHandle target;
        check(memlab_model_load(target_path.c_str(), target.out()), "target load");

        std::string method = "induced";
        ModelHandle inducer, base;
        if (ex_baseline == "ps") {
            method = "ps";
        } else if (ex_baseline == "untrained") {
            method = "untrained";
            char info[512];
            size_t len = 0;
            check(memlab_corpus_info(corpus.c, info, sizeof(info), &len), "corpus info");
            const int vocab_size = json::parse(info)["vocab_size"].get<int>();
            check(memlab_model_create(ex_arch.to_json(vocab_size).dump().c_str(),
                                      inducer.out()),
                  "untrained inducer create");
            check(memlab_model_create(ex_arch.to_json(vocab_size).dump().c_str(),
                                      base.out()),
                  "untrained base create");
        } else if (!ex_baseline.empty()) {
            die("unknown --baseline: " + ex_baseline);
        } else {
            const std::string ipath =
                ex_inducer.empty() ? (run / "checkpoints" / "inducer.ckpt").string()
                                   : ex_inducer;
            const std::string bpath =
                ex_base.empty() ? (run / "checkpoints" / "base.ckpt").string() : ex_base;
            scope.input(ipath, "run `memlab inducer train` first");
            scope.input(bpath, "run `memlab inducer train` first");
            check(memlab_model_load(ipath.c_str(), inducer.out()), "inducer load");
            check(memlab_model_load(bpath.c_str(), base.out()), "base load");
        }

        json cfg = {{"method", method},
                    {"split", ex_split},
                    {"trials", ex_trials},
                    {"seed", ex_seed},
                    {"inducer", ex_cfg.to_json()}};
        if (ex_epsilon >= 0.0) cfg["epsilon"] = ex_epsilon;
        const std::string scores =
            ex_out.empty() ? (run / "scores.csv").string() : ex_out;
        char result[1024];
        size_t len = 0;
        const auto t0 = Clock::now();
        check(memlab_extract(target.m, inducer.m, base.m, corpus.c, cfg.dump().c_str(),
                             scores.c_str(), result, sizeof(result), &len),
              "extract");
        scope.stage("extract", elapsed(t0));
        scope.output(scores);
        json res = json::parse(result);
        res["scores_file"] = fs::path(scores).filename().string();
        scope.result(res);
        scope.finalize();
        std::printf("%s\n", result);
        return 0;
    }

    if (gcg->parsed()) {
        RunScope scope(run, "gcg", config_snapshot(gcg));
        if (g_warm == g_cold) die("choose exactly one of --warm / --cold");
        auto corpus = g_corpus.open(scope);
        const std::string target_path =
            g_target.empty() ? (run / "checkpoints" / "target.ckpt").string() : g_target;
        scope.input(target_path, "run `memlab target train` first");
        ModelHandle target;
        check(memlab_model_load(target_path.c_str(), target.out()), "target load");

        ModelHandle inducer, base;
        if (g_warm) {
            const std::string ipath =
                g_inducer.empty() ? (run / "checkpoints" / "inducer.ckpt").string()
                                  : g_inducer;
            const std::string bpath =
                g_base.empty() ? (run / "checkpoints" / "base.ckpt").string() : g_base;
            scope.input(ipath, "run `memlab inducer train` first");
            scope.input(bpath, "run `memlab inducer train` first");
            check(memlab_model_load(ipath.c_str(), inducer.out()), "inducer load");
            check(memlab_model_load(bpath.c_str(), base.out()), "base load");
        }

        json cfg = {{"arm", g_warm ? "warm" : "cold"},
                    {"split", g_split},
                    {"samples", g_samples},
                    {"n_tokens", g_ntokens},
                    {"num_steps", g_steps},
                    {"top_k", g_topk},
                    {"batch", g_batch},
                    {"include_current", !g_literal},
                    {"seed", g_seed},
                    {"inducer", g_cfg.to_json()}};
        const std::string trace = g_out.empty() ? (run / "trace.csv").string() : g_out;
        char result[1024];
        size_t len = 0;
        const auto t0 = Clock::now();
        check(memlab_gcg(target.m, inducer.m, base.m, corpus.c, cfg.dump().c_str(),
                         trace.c_str(), result, sizeof(result), &len),
              "gcg");
        scope.stage("gcg", elapsed(t0));
        scope.output(trace);
        json gres = json::parse(result);
        gres["trace_file"] = fs::path(trace).filename().string();
        scope.result(gres);
        scope.finalize();
        std::printf("%s\n", result);
        return 0;
    }

    if (audit->parsed()) {
        RunScope scope(run, "audit", config_snapshot(audit));
        auto corpus = a_corpus.open(scope);
        scope.input(a_trained, "train the suspect first (`memlab target train`)");
        scope.input(a_untrained, "create it with `memlab target train --epochs 0`");
        ModelHandle trained, untrained;
        check(memlab_model_load(a_trained.c_str(), trained.out()), "suspect load");
        check(memlab_model_load(a_untrained.c_str(), untrained.out()),
              "suspect load");
        ModelHandle inducer, base;
        if (!a_inducer.empty()) {
            scope.input(a_inducer);
            check(memlab_model_load(a_inducer.c_str(), inducer.out()), "inducer load");
            if (!a_base.empty()) {
                scope.input(a_base);
                check(memlab_model_load(a_base.c_str(), base.out()), "base load");
            }
        }

        json cfg = {{"alpha", a_alpha},
                    {"trials", a_trials},
                    {"eval_split", a_eval},
                    {"seed", a_seed},
                    {"proxy", a_proxy.to_json(0)},
                    {"proxy_train",
                     {{"epochs", a_epochs},
                      {"lr", a_lr},
                      {"batch_size", a_batch},
                      {"stream_len", a_stream}}},
                    {"inducer_model", a_ind.to_json(0)},
                    {"inducer", a_cfg.to_json()}};
        cfg["proxy"].erase("vocab_size");
        cfg["inducer_model"].erase("vocab_size");

        const std::string report_path =
            a_out.empty() ? (run / "audit.json").string() : a_out;
        std::string result(1 << 16, '\0');
        size_t len = 0;
        const auto t0 = Clock::now();
        check(memlab_audit(corpus.c, trained.m, untrained.m, inducer.m, base.m,
                           cfg.dump().c_str(), report_path.c_str(), result.data(),
                           result.size(), &len),
              "audit");
        result.resize(len);
        scope.stage("audit", elapsed(t0));
        scope.output(report_path);
        const json rep = json::parse(result);
        scope.result(rep);
        scope.finalize();

        std::printf("Proxy Mem | Suspect Mem (T) | p (Proxy vs T) | Suspect Mem (U) | "
                    "p (Proxy vs U) | Verdict\n");
        std::printf("%.2f | %.2f | %.4g | %.2f | %.4g | %s\n",
                    100.0 * rep["arms"]["proxy"]["mean"].get<double>(),
                    100.0 * rep["arms"]["suspect_trained"]["mean"].get<double>(),
                    rep["p_proxy_vs_trained"].get<double>(),
                    100.0 * rep["arms"]["suspect_untrained"]["mean"].get<double>(),
                    rep["p_proxy_vs_untrained"].get<double>(),
                    rep["verdict"].get<std::string>().c_str());
        return 0;
    }

    if (report->parsed()) {
        const fs::path out = rep_out.empty() ? (run / "report") : fs::path(rep_out);
        run_report(rep_runs, out);
        return 0;
    }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }

    return 0;
}
