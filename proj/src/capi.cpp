#include "memlab.h"

#include <cstring>
#include <string>

#include "json.hpp"

#include "audit.hpp"
#include "checkpoint.hpp"
#include "corpus.hpp"
#include "gcg.hpp"
#include "inducer.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "stats.hpp"
#include "training.hpp"
#include "util.hpp"

using json = nlohmann::ordered_json;
namespace ml = memlab;

struct memlab_corpus {
    ml::corpus::Corpus c;
};

struct memlab_model {
    ml::lm::Model m;
};

namespace {

thread_local std::string t_last_error;

memlab_status to_status(ml::Errc c) {
    switch (c) {
        case ml::Errc::invalid_argument: return MEMLAB_ERR_INVALID_ARGUMENT;
        case ml::Errc::io: return MEMLAB_ERR_IO;
        case ml::Errc::format: return MEMLAB_ERR_FORMAT;
        case ml::Errc::state: return MEMLAB_ERR_STATE;
        case ml::Errc::numeric: return MEMLAB_ERR_NUMERIC;
        case ml::Errc::internal: return MEMLAB_ERR_INTERNAL;
    }
    return MEMLAB_ERR_INTERNAL;
}

template <typename Fn>
memlab_status guarded(Fn&& fn) {
    try {
        fn();
        t_last_error.clear();
        return MEMLAB_OK;
    } catch (const ml::Error& e) {
        t_last_error = e.what();
        return to_status(e.code());
    } catch (const std::exception& e) {
        t_last_error = e.what();
        return MEMLAB_ERR_INTERNAL;
    } catch (...) {
        t_last_error = "unknown error";
        return MEMLAB_ERR_INTERNAL;
    }
}

void require(bool cond, const char* what) {
    if (!cond) ml::fail(ml::Errc::invalid_argument, what);
}

json parse_options(const char* text, std::initializer_list<const char*> allowed) {
    if (text == nullptr || *text == '\0') return json::object();
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        ml::fail(ml::Errc::format, "options must be a JSON object");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                known = true;
                break;
            }
        }
        if (!known) ml::fail(ml::Errc::format, "unknown option key: " + it.key());
    }
    return j;
}

void copy_out(const std::string& s, char* buf, size_t cap, size_t* len) {
    if (len) *len = s.size();
    if (buf == nullptr || cap == 0) return;
    if (cap < s.size() + 1) ml::fail(ml::Errc::invalid_argument, "buffer too small");
    std::memcpy(buf, s.data(), s.size());
    buf[s.size()] = '\0';
}

std::vector<int> to_ids(const int32_t* ids, size_t n) {
    std::vector<int> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = ids[i];
    return out;
}

ml::ind::InducerConfig parse_inducer_config(const json& j) {
    ml::ind::InducerConfig c;
    c.max_it = j.value("max_it", c.max_it);
    c.pool_capacity = j.value("pool_capacity", c.pool_capacity);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
    c.adapter_rank = j.value("adapter_rank", c.adapter_rank);
    c.adapter_alpha = j.value("adapter_alpha", c.adapter_alpha);
    c.top_k = j.value("top_k", c.top_k);
    c.beams = j.value("beams", c.beams);
    c.lambda = j.value("lambda", c.lambda);
    c.max_prompt_len = j.value("max_prompt_len", c.max_prompt_len);
    c.trials = j.value("trials", c.trials);
    c.tau = j.value("tau", c.tau);
    c.rejection_sampling = j.value("rejection_sampling", c.rejection_sampling);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

constexpr std::initializer_list<const char*> kInducerKeys = {
    "max_it", "pool_capacity", "finetune_epochs", "finetune_lr", "adapter_rank",
    "adapter_alpha", "top_k", "beams", "lambda", "max_prompt_len", "trials",
    "tau", "rejection_sampling", "seed", "split"};

ml::lm::CorpusTrainOptions parse_train_options(const json& j) {
    ml::lm::CorpusTrainOptions o;
    o.epochs = j.value("epochs", o.epochs);
    o.lr = j.value("lr", o.lr);
    o.batch_size = j.value("batch_size", o.batch_size);
    o.pack = j.value("pack", o.pack);
    o.stream_len = j.value("stream_len", o.stream_len);
    o.dup = j.value("dup", o.dup);
    o.seed = j.value("seed", o.seed);
    if (j.contains("splits")) {
        o.include_train = o.include_test = o.include_validation = false;
        for (const auto& s : j["splits"]) {
            switch (ml::corpus::split_from_string(s.get<std::string>())) {
                case ml::corpus::Split::Train: o.include_train = true; break;
                case ml::corpus::Split::Test: o.include_test = true; break;
                case ml::corpus::Split::Validation: o.include_validation = true; break;
            }
        }
    }
    return o;
}

}  // namespace

extern "C" {

const char* memlab_version(void) { return "0.1.0"; }

const char* memlab_status_name(memlab_status s) {
    switch (s) {
        case MEMLAB_OK: return "ok";
        case MEMLAB_ERR_INVALID_ARGUMENT: return "invalid_argument";
        case MEMLAB_ERR_IO: return "io";
        case MEMLAB_ERR_FORMAT: return "format";
        case MEMLAB_ERR_STATE: return "state";
        case MEMLAB_ERR_NUMERIC: return "numeric";
        case MEMLAB_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* memlab_last_error(void) { return t_last_error.c_str(); }

void memlab_set_threads(int n) { ml::set_threads(n); }

/* --- corpus --------------------------------------------------------------- */

memlab_status memlab_corpus_build(const char* data_path, const char* options_json,
                                  memlab_corpus** out) {
    return guarded([&] {
        require(data_path && out, "data_path and out are required");
        json j = parse_options(options_json, {"mode", "split_ratio", "fractions",
                                              "seed", "context_len"});
        ml::corpus::BuildOptions opts;
        opts.mode = ml::corpus::token_mode_from_string(j.value("mode", "char"));
        opts.split_ratio = j.value("split_ratio", opts.split_ratio);
        opts.seed = j.value("seed", opts.seed);
        opts.context_len = j.value("context_len", opts.context_len);
        if (j.contains("fractions")) {
            const auto& f = j["fractions"];
            require(f.is_array() && f.size() == 3, "fractions must have 3 entries");
            opts.fractions = {f[0].get<double>(), f[1].get<double>(), f[2].get<double>()};
        }
        *out = new memlab_corpus{ml::corpus::build_corpus_from_file(data_path, opts)};
    });
}

memlab_status memlab_corpus_synth(const char* out_path, const char* options_json) {
    return guarded([&] {
        require(out_path != nullptr, "out_path required");
        json j = parse_options(options_json, {"records", "seed", "style"});
        const size_t n = j.value("records", size_t{200});
        const uint64_t seed = j.value("seed", uint64_t{1});
        const std::string style = j.value("style", "pairs");
        std::vector<ml::corpus::RawRecord> records;
        if (style == "pairs") records = ml::corpus::synth_pairs_corpus(n, seed);
        else if (style == "plain") records = ml::corpus::synth_plain_corpus(n, seed);
        else ml::fail(ml::Errc::invalid_argument, "style must be pairs or plain");
        ml::write_file_atomic(out_path, ml::corpus::records_to_text(records));
    });
}

memlab_status memlab_corpus_open(const char* data_path, const char* vocab_path,
                                 const char* splits_path, memlab_corpus** out) {
    return guarded([&] {
        require(data_path && vocab_path && splits_path && out, "all paths required");
        *out = new memlab_corpus{ml::corpus::open_corpus(data_path, vocab_path, splits_path)};
    });
}

memlab_status memlab_corpus_save(const memlab_corpus* c, const char* vocab_path,
                                 const char* splits_path) {
    return guarded([&] {
        require(c && vocab_path && splits_path, "corpus and paths required");
        ml::corpus::save_corpus(c->c, vocab_path, splits_path);
    });
}

memlab_status memlab_corpus_info(const memlab_corpus* c, char* buf, size_t cap,
                                 size_t* len) {
    return guarded([&] {
        require(c != nullptr, "corpus required");
        json j;
        j["vocab_size"] = c->c.vocab.size();
        j["mode"] = ml::corpus::token_mode_name(c->c.vocab.mode());
        j["pairs"] = c->c.pairs.size();
        j["train"] = c->c.train.size();
        j["test"] = c->c.test.size();
        j["validation"] = c->c.validation.size();
        copy_out(j.dump(), buf, cap, len);
    });
}

memlab_status memlab_corpus_encode(const memlab_corpus* c, const char* text,
                                   int32_t* ids, size_t cap, size_t* len) {
    return guarded([&] {
        require(c && text, "corpus and text required");
        const auto enc = c->c.vocab.encode(text);
        if (len) *len = enc.size();
        if (ids == nullptr || cap == 0) return;
        require(cap >= enc.size(), "buffer too small");
        for (size_t i = 0; i < enc.size(); ++i) ids[i] = enc[i];
    });
}

memlab_status memlab_corpus_decode(const memlab_corpus* c, const int32_t* ids,
                                   size_t n, char* buf, size_t cap, size_t* len) {
    return guarded([&] {
        require(c != nullptr, "corpus required");
        require(n == 0 || ids != nullptr, "ids required");
        copy_out(c->c.vocab.decode(to_ids(ids, n)), buf, cap, len);
    });
}

void memlab_corpus_free(memlab_corpus* c) { delete c; }

/* --- models ----------------------------------------------------------------- */

memlab_status memlab_model_create(const char* config_json, memlab_model** out) {
    return guarded([&] {
        require(config_json && out, "config and out required");
        *out = new memlab_model{ml::lm::init_model(ml::lm::ModelConfig::from_json(config_json))};
    });
}

memlab_status memlab_model_load(const char* path, memlab_model** out) {
    return guarded([&] {
        require(path && out, "path and out required");
        *out = new memlab_model{ml::lm::load_model(path)};
    });
}

memlab_status memlab_model_save(const memlab_model* m, const char* path) {
    return guarded([&] {
        require(m && path, "model and path required");
        ml::lm::save_model(m->m, path);
    });
}

memlab_status memlab_model_info(const memlab_model* m, char* buf, size_t cap,
                                size_t* len) {
    return guarded([&] {
        require(m != nullptr, "model required");
        json j;
        j["config"] = json::parse(m->m.cfg.to_json());
        j["params"] = ml::lm::param_count(m->m);
        j["adapters"] = m->m.adapters.has_value();
        copy_out(j.dump(), buf, cap, len);
    });
}

memlab_status memlab_model_train(memlab_model* m, const memlab_corpus* c,
                                 const char* options_json) {
    return guarded([&] {
        require(m && c, "model and corpus required");
        json j = parse_options(options_json, {"epochs", "lr", "batch_size", "pack",
                                              "stream_len", "dup", "seed", "splits"});
        ml::lm::train_on_corpus(m->m, c->c, parse_train_options(j));
    });
}

memlab_status memlab_model_finetune(memlab_model* m, const memlab_corpus* c,
                                    const char* options_json) {
    return guarded([&] {
        require(m && c, "model and corpus required");
        json j = parse_options(options_json, {"split", "epochs", "lr", "rank", "alpha",
                                              "batch_size", "seed"});
        ml::lm::FinetuneOptions o;
        o.epochs = j.value("epochs", o.epochs);
        o.lr = j.value("lr", o.lr);
        o.rank = j.value("rank", o.rank);
        o.alpha = j.value("alpha", o.alpha);
        o.batch_size = j.value("batch_size", o.batch_size);
        o.seed = j.value("seed", o.seed);
        const auto split = ml::corpus::split_from_string(j.value("split", "train"));
        std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
        for (size_t idx : c->c.split(split)) {
            pairs.emplace_back(c->c.pairs[idx].x, c->c.pairs[idx].y);
        }
        ml::lm::finetune_adapters(m->m, pairs, o);
    });
}

memlab_status memlab_model_loss(const memlab_model* m, const int32_t* context,
                                size_t n_context, const int32_t* target,
                                size_t n_target, double* loss) {
    return guarded([&] {
        require(m && loss, "model and out pointer required");
        require(n_context == 0 || context != nullptr, "context required");
        require(target != nullptr, "target required");
        *loss = ml::lm::conditional_loss(m->m, to_ids(context, n_context),
                                         to_ids(target, n_target));
    });
}

memlab_status memlab_model_logprob(const memlab_model* m, const int32_t* seq,
                                   size_t n, double* logprob) {
    return guarded([&] {
        require(m && seq && logprob, "model, seq, out pointer required");
        *logprob = ml::lm::sequence_logprob(m->m, to_ids(seq, n));
    });
}

memlab_status memlab_model_generate(const memlab_model* m, const int32_t* prompt,
                                    size_t n, const char* options_json,
                                    int32_t* out_ids, size_t cap, size_t* len) {
    return guarded([&] {
        require(m != nullptr, "model required");
        require(n == 0 || prompt != nullptr, "prompt required");
        json j = parse_options(options_json,
                               {"max_new_tokens", "top_k", "temperature", "greedy", "seed"});
        ml::lm::GenerationParams p;
        p.max_new_tokens = j.value("max_new_tokens", p.max_new_tokens);
        p.top_k = j.value("top_k", p.top_k);
        p.temperature = j.value("temperature", p.temperature);
        p.greedy = j.value("greedy", p.greedy);
        p.rng_seed = j.value("seed", p.rng_seed);
        const auto out = ml::lm::generate(m->m, to_ids(prompt, n), p);
        if (len) *len = out.size();
        if (out_ids == nullptr || cap == 0) return;
        require(cap >= out.size(), "buffer too small");
        for (size_t i = 0; i < out.size(); ++i) out_ids[i] = out[i];
    });
}

void memlab_model_free(memlab_model* m) { delete m; }

/* --- pipeline ----------------------------------------------------------------- */

memlab_status memlab_inducer_train(memlab_model* inducer, const memlab_model* target,
                                   const memlab_corpus* c,
                                   const memlab_model* base_model,
                                   const char* config_json,
                                   const char* pool_jsonl_path,
                                   const char* diag_csv_path, memlab_model** base_out) {
    return guarded([&] {
        require(inducer && target && c, "inducer, target, corpus required");
        json j = parse_options(config_json, kInducerKeys);
        const auto icfg = parse_inducer_config(j);
        const auto split = ml::corpus::split_from_string(j.value("split", "train"));
        auto res = ml::ind::train_inducer(inducer->m, target->m, c->c, split, icfg,
                                          base_model ? &base_model->m : nullptr);
        if (pool_jsonl_path) {
            ml::write_file_atomic(pool_jsonl_path, res.pool.to_jsonl(c->c.vocab));
        }
        if (diag_csv_path) {
            ml::write_file_atomic(diag_csv_path, ml::ind::diags_to_csv(res.diags));
        }
        if (base_out) *base_out = new memlab_model{std::move(res.base)};
    });
}

memlab_status memlab_extract(const memlab_model* target, const memlab_model* inducer,
                             const memlab_model* base, const memlab_corpus* c,
                             const char* config_json, const char* scores_csv_path,
                             char* result_json, size_t cap, size_t* len) {
    return guarded([&] {
        require(target && c, "target and corpus required");
        json j = parse_options(config_json,
                               {"method", "split", "trials", "seed", "epsilon", "inducer"});
        ml::ind::ExtractConfig cfg;
        cfg.method = ml::ind::extract_method_from_string(j.value("method", "induced"));
        cfg.split = ml::corpus::split_from_string(j.value("split", "test"));
        cfg.trials = j.value("trials", cfg.trials);
        cfg.seed = j.value("seed", cfg.seed);
        if (j.contains("inducer")) cfg.icfg = parse_inducer_config(j["inducer"]);

        auto res = ml::ind::run_extract(target->m, inducer ? &inducer->m : nullptr,
                                        base ? &base->m : nullptr, c->c, cfg);
        if (scores_csv_path) {
            ml::write_file_atomic(scores_csv_path, ml::metrics::score_rows_to_csv(res.rows));
        }
        json out;
        out["method"] = ml::ind::extract_method_name(cfg.method);
        out["trials"] = cfg.trials;
        out["n"] = res.report.n;
        out["avg_mem"] = res.report.avg_mem;
        out["hit_rate"] = res.report.hit_rate;
        if (j.contains("epsilon")) {
            // flexible-memorization filter: fraction of samples whose best
            // score clears 1 - epsilon
            const double eps = j["epsilon"].get<double>();
            require(eps >= 0.0 && eps <= 1.0, "epsilon must be in [0,1]");
            size_t flex = 0;
            for (double v : res.report.scores) {
                if (v >= 1.0 - eps) ++flex;
            }
            out["epsilon"] = eps;
            out["flexible_rate"] =
                100.0 * static_cast<double>(flex) / static_cast<double>(res.report.n);
        }
        copy_out(out.dump(), result_json, cap, len);
    });
}

memlab_status memlab_gcg(const memlab_model* target, const memlab_model* inducer,
                         const memlab_model* base, const memlab_corpus* c,
                         const char* config_json, const char* trace_csv_path,
                         char* result_json, size_t cap, size_t* len) {
    return guarded([&] {
        require(target && c, "target and corpus required");
        json j = parse_options(config_json,
                               {"arm", "split", "samples", "n_tokens", "num_steps",
                                "top_k", "batch", "include_current", "seed", "inducer"});
        const std::string arm = j.value("arm", "cold");
        require(arm == "cold" || arm == "warm", "arm must be cold or warm");
        const auto split = ml::corpus::split_from_string(j.value("split", "test"));
        ml::gcg::GcgConfig g;
        g.n_tokens = j.value("n_tokens", g.n_tokens);
        g.num_steps = j.value("num_steps", g.num_steps);
        g.top_k = j.value("top_k", g.top_k);
        g.batch = j.value("batch", g.batch);
        g.include_current = j.value("include_current", g.include_current);
        g.seed = j.value("seed", g.seed);
        ml::ind::InducerConfig icfg;
        if (j.contains("inducer")) icfg = parse_inducer_config(j["inducer"]);
        if (arm == "warm") require(inducer && base, "warm arm requires inducer and base");

        const auto& indices = c->c.split(split);
        require(!indices.empty(), "empty split");
        size_t n = indices.size();
        if (j.contains("samples")) {
            n = std::min<size_t>(n, j["samples"].get<size_t>());
        }

        std::vector<ml::gcg::GcgTrace> traces;
        double sum_loss = 0.0, sum_mem = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const auto& sample = c->c.pairs[indices[i]];
            ml::gcg::GcgConfig gs = g;
            gs.seed = ml::Rng::derive(g.seed, sample.id);
            ml::gcg::GcgResult r;
            if (arm == "warm") {
                ml::ind::InducerConfig is = icfg;
                is.seed = ml::Rng::derive(icfg.seed, sample.id);
                r = ml::gcg::warm_start_extract(inducer->m, target->m, base->m, sample,
                                                c->c.vocab, is, gs);
            } else {
                r = ml::gcg::gcg_optimize(target->m, std::nullopt, sample, c->c.vocab, gs);
            }
            sum_loss += r.loss;
            sum_mem += r.trace.steps.back().mem;
            traces.push_back(std::move(r.trace));
        }
        if (trace_csv_path) {
            ml::write_file_atomic(trace_csv_path, ml::gcg::traces_to_csv(traces));
        }
        json out;
        out["arm"] = arm;
        out["n"] = n;
        out["avg_final_loss"] = sum_loss / static_cast<double>(n);
        out["avg_final_mem"] = sum_mem / static_cast<double>(n);
        copy_out(out.dump(), result_json, cap, len);
    });
}

memlab_status memlab_audit(const memlab_corpus* c, const memlab_model* suspect_trained,
                           const memlab_model* suspect_untrained,
                           const memlab_model* inducer, const memlab_model* base,
                           const char* config_json, const char* report_json_path,
                           char* result_json, size_t cap, size_t* len) {
    return guarded([&] {
        require(c && suspect_trained && suspect_untrained,
                "corpus and both suspect models required");
        json j = parse_options(config_json, {"alpha", "trials", "eval_split", "seed",
                                             "proxy", "proxy_train", "inducer_model",
                                             "inducer"});
        ml::audit::AuditConfig cfg;
        cfg.alpha = j.value("alpha", cfg.alpha);
        cfg.trials = j.value("trials", cfg.trials);
        cfg.eval_split = ml::corpus::split_from_string(j.value("eval_split", "test"));
        cfg.seed = j.value("seed", cfg.seed);
        auto model_cfg_with_vocab = [&](json mj) {
            if (!mj.contains("vocab_size") || mj["vocab_size"].get<int>() == 0) {
                mj["vocab_size"] = c->c.vocab.size();
            }
            return ml::lm::ModelConfig::from_json(mj.dump());
        };
        if (j.contains("proxy")) {
            cfg.proxy_cfg = model_cfg_with_vocab(j["proxy"]);
        } else {
            cfg.proxy_cfg.vocab_size = c->c.vocab.size();
        }
        if (j.contains("proxy_train")) cfg.proxy_train = parse_train_options(j["proxy_train"]);
        if (j.contains("inducer_model")) {
            cfg.inducer_cfg = model_cfg_with_vocab(j["inducer_model"]);
        } else {
            cfg.inducer_cfg.vocab_size = c->c.vocab.size();
        }
        if (j.contains("inducer")) cfg.icfg = parse_inducer_config(j["inducer"]);

        auto rep = ml::audit::run_audit(c->c, cfg, suspect_trained->m,
                                        suspect_untrained->m,
                                        inducer ? &inducer->m : nullptr,
                                        base ? &base->m : nullptr);
        const std::string out = rep.to_json();
        if (report_json_path) ml::write_file_atomic(report_json_path, out);
        copy_out(out, result_json, cap, len);
    });
}

/* --- metrics & stats ---------------------------------------------------------- */

memlab_status memlab_mem_score(const char* generated, const char* reference,
                               double* score) {
    return guarded([&] {
        require(generated && reference && score, "all arguments required");
        *score = ml::metrics::mem_score(generated, reference).value();
    });
}

memlab_status memlab_lcs_length(const char* a, const char* b, size_t* length) {
    return guarded([&] {
        require(a && b && length, "all arguments required");
        *length = ml::metrics::lcs_length(ml::split_words(a), ml::split_words(b));
    });
}

memlab_status memlab_ztest(const double* a, size_t na, const double* b, size_t nb,
                           double* z, double* p) {
    return guarded([&] {
        require(a && b && z && p, "all arguments required");
        ml::stats::ScoreSample sa, sb;
        sa.scores.assign(a, a + na);
        sb.scores.assign(b, b + nb);
        const auto r = ml::stats::two_sample_ztest(sa, sb);
        *z = r.z;
        *p = r.p;
    });
}

}  // extern "C"
