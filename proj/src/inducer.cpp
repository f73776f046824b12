#include "inducer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "training.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace memlab::ind {

using json = nlohmann::ordered_json;

void InducerConfig::validate() const {
    if (beams < 1) fail(Errc::invalid_argument, "beams must be >= 1");
    if (top_k < beams) fail(Errc::invalid_argument, "top_k must be >= beams");
    if (lambda < 0.0) fail(Errc::invalid_argument, "lambda must be >= 0");
    if (max_prompt_len < 1) fail(Errc::invalid_argument, "max_prompt_len must be >= 1");
    if (max_it < 0) fail(Errc::invalid_argument, "max_it must be >= 0");
    if (pool_capacity < 1) fail(Errc::invalid_argument, "pool capacity must be >= 1");
    if (tau <= 0.0) fail(Errc::invalid_argument, "tau must be > 0");
    if (trials < 1) fail(Errc::invalid_argument, "trials must be >= 1");
}

namespace {

std::vector<int> concat(std::span<const int> a, std::span<const int> b) {
    std::vector<int> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

// eval item for L(y | [p, x]) on the target (mean CE over y)
lm::EvalItem target_item(std::span<const int> p, std::span<const int> x,
                         std::span<const int> y) {
    lm::EvalItem item;
    const std::vector<int> ctx = concat(p, x);
    item.input.push_back(lm::kBosId);
    item.input.insert(item.input.end(), ctx.begin(), ctx.end());
    item.input.insert(item.input.end(), y.begin(), y.end() - 1);
    item.labels.assign(item.input.size(), -1);
    for (size_t t = 0; t < y.size(); ++t) item.labels[ctx.size() + t] = y[t];
    return item;
}

// eval item for -log P_base([p, x]) (sum CE over the whole sequence)
lm::EvalItem base_item(std::span<const int> p, std::span<const int> x) {
    lm::EvalItem item;
    const std::vector<int> seq = concat(p, x);
    item.input.push_back(lm::kBosId);
    item.input.insert(item.input.end(), seq.begin(), seq.end() - 1);
    item.labels = seq;
    return item;
}

void check_context(const lm::Model& target, size_t p, size_t x, size_t y) {
    if (p + x + y > static_cast<size_t>(target.cfg.context_len)) {
        fail(Errc::invalid_argument, "prompt + prefix + target exceeds context length");
    }
}

struct Expansion {
    std::vector<int> prompt;
    int last_token = -1;
    double loss = 0.0;
};

// One beam-search step: propose top_k one-token extensions per beam from the
// inducer conditioned on [x, beam_prompt]. Deterministic mode takes the k
// highest-probability tokens; stochastic mode samples k distinct tokens from
// the inducer's distribution (Gumbel top-k = sampling without replacement).
std::vector<Expansion> expand_beams(const lm::Model& inducer, const lm::Model& target,
                                    const lm::Model& base,
                                    const std::vector<std::vector<int>>& beams,
                                    std::span<const int> x, std::span<const int> y,
                                    const InducerConfig& cfg, Rng* rng) {
    const int V = inducer.cfg.vocab_size;
    const int k = std::min(cfg.top_k, V);

    std::vector<Expansion> exps;
    for (const auto& beam : beams) {
        std::vector<int> cond;
        cond.push_back(lm::kBosId);
        cond.insert(cond.end(), x.begin(), x.end());
        cond.insert(cond.end(), beam.begin(), beam.end());
        lm::Mat logits = lm::forward_logits(inducer, cond);
        const int last = static_cast<int>(cond.size()) - 1;

        std::vector<double> score(static_cast<size_t>(V));
        for (int v = 0; v < V; ++v) score[static_cast<size_t>(v)] = logits(last, v);
        if (rng) {
            for (auto& s : score) {
                double u;
                do {
                    u = rng->real();
                } while (u <= 0.0);
                s += -std::log(-std::log(u));
            }
        }
        std::vector<int> order(static_cast<size_t>(V));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return score[static_cast<size_t>(a)] > score[static_cast<size_t>(b)];
        });
        for (int i = 0; i < k; ++i) {
            Expansion e;
            e.prompt = beam;
            e.prompt.push_back(order[static_cast<size_t>(i)]);
            e.last_token = order[static_cast<size_t>(i)];
            exps.push_back(std::move(e));
        }
    }

    // drop exact duplicates (identical prompts across beams)
    std::vector<Expansion> unique;
    for (auto& e : exps) {
        bool dup = false;
        for (const auto& u : unique) {
            if (u.prompt == e.prompt) {
                dup = true;
                break;
            }
        }
        if (!dup) unique.push_back(std::move(e));
    }

    std::vector<lm::EvalItem> titems, bitems;
    titems.reserve(unique.size());
    for (const auto& e : unique) titems.push_back(target_item(e.prompt, x, y));
    auto tce = lm::batched_ce(target, titems);
    std::vector<lm::CeSum> bce;
    if (cfg.lambda > 0.0) {
        bitems.reserve(unique.size());
        for (const auto& e : unique) bitems.push_back(base_item(e.prompt, x));
        bce = lm::batched_ce(base, bitems);
    }
    for (size_t i = 0; i < unique.size(); ++i) {
        unique[i].loss = tce[i].mean();
        if (cfg.lambda > 0.0) unique[i].loss += cfg.lambda * bce[i].sum;
    }
    return unique;
}

struct SearchBest {
    std::vector<int> prompt;
    double loss = std::numeric_limits<double>::infinity();
};

CandidateResult finish_candidate(const lm::Model& target, const corpus::SamplePair& sample,
                                 const corpus::Vocabulary& vocab, SearchBest best) {
    CandidateResult r = score_prompt(target, sample, vocab, std::move(best.prompt));
    r.loss = best.loss;
    return r;
}

CandidateResult beam_search(const lm::Model& inducer, const lm::Model& target,
                            const lm::Model& base, const corpus::SamplePair& sample,
                            const corpus::Vocabulary& vocab, const InducerConfig& cfg,
                            int beams_n, double tau, std::optional<uint64_t> seed) {
    cfg.validate();
    check_context(target, static_cast<size_t>(cfg.max_prompt_len), sample.x.size(),
                  sample.y.size());

    const std::span<const int> x(sample.x), y(sample.y);
    Rng rng(seed.value_or(0));
    const bool deterministic = !seed.has_value() || tau < 1e-9;

    // the empty prompt is the admitted baseline
    SearchBest best;
    best.prompt = {};
    best.loss = combined_loss(target, base, {}, x, y, cfg.lambda);

    std::vector<std::vector<int>> beams(static_cast<size_t>(beams_n));
    for (int step = 0; step < cfg.max_prompt_len; ++step) {
        auto exps = expand_beams(inducer, target, base, beams, x, y, cfg,
                                 deterministic ? nullptr : &rng);
        if (exps.empty()) break;

        // global best over every visited prefix, ties to earliest (which is
        // the lowest token id within a beam's proposals)
        size_t arg = 0;
        for (size_t i = 1; i < exps.size(); ++i) {
            if (exps[i].loss < exps[arg].loss ||
                (exps[i].loss == exps[arg].loss &&
                 exps[i].last_token < exps[arg].last_token)) {
                arg = i;
            }
        }
        if (exps[arg].loss < best.loss) {
            best.prompt = exps[arg].prompt;
            best.loss = exps[arg].loss;
        }

        // survivor selection
        std::vector<std::vector<int>> next;
        if (deterministic) {
            // argmin ordering; with beams_n == 1 this is the greedy append
            std::vector<size_t> order(exps.size());
            std::iota(order.begin(), order.end(), size_t{0});
            std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
                if (exps[a].loss != exps[b].loss) return exps[a].loss < exps[b].loss;
                return exps[a].last_token < exps[b].last_token;
            });
            for (size_t i = 0; i < order.size() && next.size() < static_cast<size_t>(beams_n); ++i) {
                next.push_back(exps[order[i]].prompt);
            }
        } else {
            // sample without replacement from softmax(-loss / tau)
            double min_loss = exps[0].loss;
            for (const auto& e : exps) min_loss = std::min(min_loss, e.loss);
            std::vector<double> w(exps.size());
            for (size_t i = 0; i < exps.size(); ++i) {
                w[i] = std::exp((min_loss - exps[i].loss) / tau);
            }
            std::vector<bool> taken(exps.size(), false);
            for (int b = 0; b < beams_n && static_cast<size_t>(b) < exps.size(); ++b) {
                double total = 0.0;
                for (size_t i = 0; i < exps.size(); ++i) {
                    if (!taken[i]) total += w[i];
                }
                size_t pick = exps.size();
                if (total > 0.0) {
                    const double r = rng.real() * total;
                    double acc = 0.0;
                    for (size_t i = 0; i < exps.size(); ++i) {
                        if (taken[i]) continue;
                        acc += w[i];
                        if (r < acc) {
                            pick = i;
                            break;
                        }
                    }
                }
                if (pick == exps.size()) {
                    // all remaining weights underflowed; take the best remaining
                    double bl = std::numeric_limits<double>::infinity();
                    for (size_t i = 0; i < exps.size(); ++i) {
                        if (!taken[i] && exps[i].loss < bl) {
                            bl = exps[i].loss;
                            pick = i;
                        }
                    }
                }
                taken[pick] = true;
                next.push_back(exps[pick].prompt);
            }
        }
        beams = std::move(next);
    }
    return finish_candidate(target, sample, vocab, std::move(best));
}

}  // namespace

double combined_loss(const lm::Model& target, const lm::Model& base,
                     std::span<const int> p, std::span<const int> x,
                     std::span<const int> y, double lambda) {
    check_context(target, p.size(), x.size(), y.size());
    const std::vector<int> ctx = concat(p, x);
    double loss = lm::conditional_loss(target, ctx, y);
    if (lambda > 0.0) {
        loss += lambda * (-lm::sequence_logprob(base, ctx));
    }
    return loss;
}

CandidateResult score_prompt(const lm::Model& target, const corpus::SamplePair& sample,
                             const corpus::Vocabulary& vocab, std::vector<int> prompt) {
    if (target.cfg.vocab_size != vocab.size()) {
        fail(Errc::invalid_argument, "model vocabulary size (" +
                                         std::to_string(target.cfg.vocab_size) +
                                         ") does not match the corpus (" +
                                         std::to_string(vocab.size()) + ")");
    }
    CandidateResult r;
    const std::vector<int> ctx = concat(prompt, sample.x);

    const auto ref_words = split_words(vocab.decode(sample.y));
    lm::GenerationParams gp;
    gp.greedy = true;
    gp.max_new_tokens =
        static_cast<int>(std::ceil(metrics::kScoreSlackMargin *
                                   static_cast<double>(sample.y.size()))) + 2;
    const std::vector<int> gen = lm::generate(target, ctx, gp);

    auto gen_words = split_words(normalize_text(vocab.decode(gen)));
    const size_t budget = metrics::scored_word_budget(ref_words.size());
    if (gen_words.size() > budget) gen_words.resize(budget);

    std::string gen_text;
    for (size_t i = 0; i < gen_words.size(); ++i) {
        if (i) gen_text.push_back(' ');
        gen_text += gen_words[i];
    }
    r.generated_text = gen_text;
    r.mem = metrics::mem_score(gen_text, vocab.decode(sample.y));
    r.prompt = std::move(prompt);
    return r;
}

CandidateResult generate_candidate_prompt(const lm::Model& inducer,
                                          const lm::Model& target,
                                          const lm::Model& base,
                                          const corpus::SamplePair& sample,
                                          const corpus::Vocabulary& vocab,
                                          const InducerConfig& cfg) {
    return beam_search(inducer, target, base, sample, vocab, cfg, 1, 0.0, std::nullopt);
}

CandidateResult generate_candidate_prompt_beam(const lm::Model& inducer,
                                               const lm::Model& target,
                                               const lm::Model& base,
                                               const corpus::SamplePair& sample,
                                               const corpus::Vocabulary& vocab,
                                               const InducerConfig& cfg,
                                               uint64_t seed) {
    return beam_search(inducer, target, base, sample, vocab, cfg, cfg.beams, cfg.tau,
                       seed);
}

// --- prompt pool -------------------------------------------------------------

bool PromptPool::update(PromptPoolEntry entry) {
    if (!std::isfinite(entry.combined_loss)) {
        fail(Errc::invalid_argument, "pool entry with non-finite loss");
    }
    auto& list = by_sample_[entry.sample_id];
    if (rejection_ && !list.empty()) {
        double best_loss = list.front().combined_loss;
        double best_mem = 0.0;
        for (const auto& e : list) best_mem = std::max(best_mem, e.mem.value());
        const bool improves_loss = entry.combined_loss < best_loss;
        const bool improves_mem = entry.mem.value() > best_mem;
        if (!improves_loss && !improves_mem) return false;
    }
    auto pos = std::lower_bound(
        list.begin(), list.end(), entry.combined_loss,
        [](const PromptPoolEntry& e, double loss) { return e.combined_loss < loss; });
    list.insert(pos, std::move(entry));
    ++size_;
    while (size_ > static_cast<size_t>(capacity_)) evict_worst();
    return true;
}

void PromptPool::evict_worst() {
    // worst combined_loss among samples holding more than one entry; if every
    // sample holds a single entry, fall back to the global worst
    std::map<std::string, std::vector<PromptPoolEntry>>::iterator victim = by_sample_.end();
    bool victim_multi = false;
    double victim_loss = -std::numeric_limits<double>::infinity();
    for (auto it = by_sample_.begin(); it != by_sample_.end(); ++it) {
        const bool multi = it->second.size() > 1;
        const double worst = it->second.back().combined_loss;
        if ((multi && !victim_multi) ||
            (multi == victim_multi && worst > victim_loss)) {
            victim = it;
            victim_multi = multi;
            victim_loss = worst;
        }
    }
    if (victim == by_sample_.end()) fail(Errc::internal, "evict on empty pool");
    victim->second.pop_back();
    if (victim->second.empty()) by_sample_.erase(victim);
    --size_;
}

double PromptPool::mean_best_loss() const {
    if (by_sample_.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [id, list] : by_sample_) s += list.front().combined_loss;
    return s / static_cast<double>(by_sample_.size());
}

double PromptPool::mean_best_mem() const {
    if (by_sample_.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [id, list] : by_sample_) {
        double best = 0.0;
        for (const auto& e : list) best = std::max(best, e.mem.value());
        s += best;
    }
    return s / static_cast<double>(by_sample_.size());
}

std::vector<std::pair<std::vector<int>, std::vector<int>>> PromptPool::finetune_pairs(
    const corpus::Corpus& c) const {
    std::map<std::string, const corpus::SamplePair*> by_id;
    for (const auto& p : c.pairs) by_id[p.id] = &p;
    std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
    for (const auto& [id, list] : by_sample_) {
        auto it = by_id.find(id);
        if (it == by_id.end()) fail(Errc::state, "pool sample missing from corpus: " + id);
        for (const auto& e : list) {
            if (e.prompt.empty()) continue;
            pairs.emplace_back(it->second->x, e.prompt);
        }
    }
    return pairs;
}

std::string PromptPool::to_jsonl(const corpus::Vocabulary& vocab) const {
    std::string out;
    for (const auto& [id, list] : by_sample_) {
        for (const auto& e : list) {
            json j;
            j["sample_id"] = e.sample_id;
            j["prompt_ids"] = e.prompt;
            j["prompt_text"] = vocab.decode(e.prompt);
            j["loss"] = e.combined_loss;
            j["mem"] = e.mem.value();
            j["iteration"] = e.iteration;
            out += j.dump();
            out.push_back('\n');
        }
    }
    return out;
}

std::string diags_to_csv(const std::vector<IterationDiag>& diags) {
    std::string out = "iteration,mean_best_loss,mean_best_mem,pool_size,accepted\n";
    for (const auto& d : diags) {
        out += std::to_string(d.iteration) + ',' + fmt_double(d.mean_best_loss) + ',' +
               fmt_double(d.mean_best_mem) + ',' + std::to_string(d.pool_size) + ',' +
               std::to_string(d.accepted) + '\n';
    }
    return out;
}

// --- training loop -----------------------------------------------------------

TrainInducerResult train_inducer(lm::Model& inducer, const lm::Model& target,
                                 const corpus::Corpus& c, corpus::Split split,
                                 const InducerConfig& cfg, const lm::Model* base_model) {
    cfg.validate();
    if (inducer.cfg.vocab_size != target.cfg.vocab_size ||
        target.cfg.vocab_size != c.vocab.size()) {
        fail(Errc::invalid_argument, "inducer and target must share the corpus vocabulary");
    }
    if (base_model && base_model->cfg.vocab_size != c.vocab.size()) {
        fail(Errc::invalid_argument, "base model vocabulary mismatch");
    }
    const auto& indices = c.split(split);
    if (indices.empty() && cfg.max_it > 0) {
        fail(Errc::invalid_argument, "empty training split");
    }

    // readability model: pre-trained override or pre-iteration-1 snapshot
    TrainInducerResult res{PromptPool(cfg.pool_capacity, cfg.rejection_sampling),
                           {},
                           base_model ? *base_model : inducer};

    for (int it = 1; it <= cfg.max_it; ++it) {
        // Step 1: candidate generation per sample (parallel), pool updates in
        // sample order (serialized owner)
        std::vector<CandidateResult> cands(indices.size());
        ParallelGuard guard;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(thread_budget())
#endif
        for (long i = 0; i < static_cast<long>(indices.size()); ++i) {
            guard.run([&, i] {
                const auto& sample = c.pairs[indices[static_cast<size_t>(i)]];
                const uint64_t seed = Rng::derive(
                    cfg.seed, "cand", static_cast<uint64_t>(it), static_cast<uint64_t>(i));
                cands[static_cast<size_t>(i)] = generate_candidate_prompt_beam(
                    inducer, target, res.base, sample, c.vocab, cfg, seed);
            });
        }
        guard.rethrow_if_any();

        size_t accepted = 0;
        for (size_t i = 0; i < indices.size(); ++i) {
            PromptPoolEntry entry;
            entry.sample_id = c.pairs[indices[i]].id;
            entry.prompt = cands[i].prompt;
            entry.combined_loss = cands[i].loss;
            entry.mem = cands[i].mem;
            entry.iteration = it;
            if (res.pool.update(std::move(entry))) ++accepted;
        }
        if (res.pool.empty()) fail(Errc::state, "prompt pool empty after step 1");

        // Step 2: adapter fine-tuning on pool contents
        auto pairs = res.pool.finetune_pairs(c);
        if (!pairs.empty()) {
            lm::FinetuneOptions fopts;
            fopts.epochs = cfg.finetune_epochs;
            fopts.lr = cfg.finetune_lr;
            fopts.rank = cfg.adapter_rank;
            fopts.alpha = cfg.adapter_alpha;
            fopts.seed = Rng::derive(cfg.seed, "ft", static_cast<uint64_t>(it));
            lm::finetune_adapters(inducer, pairs, fopts);
        }

        IterationDiag d;
        d.iteration = it;
        d.mean_best_loss = res.pool.mean_best_loss();
        d.mean_best_mem = res.pool.mean_best_mem();
        d.pool_size = res.pool.size();
        d.accepted = accepted;
        res.diags.push_back(d);
    }
    return res;
}

// --- best-of-k ----------------------------------------------------------------

BestOfK induce_best_of_k(const lm::Model& inducer, const lm::Model& target,
                         const lm::Model& base, const corpus::SamplePair& sample,
                         const corpus::Vocabulary& vocab, const InducerConfig& cfg,
                         int k, uint64_t seed) {
    if (k < 1) fail(Errc::invalid_argument, "k must be >= 1");
    BestOfK out;
    out.trials.reserve(static_cast<size_t>(k));
    for (int trial = 0; trial < k; ++trial) {
        const uint64_t s =
            Rng::derive(seed, sample.id, static_cast<uint64_t>(trial));
        CandidateResult r =
            generate_candidate_prompt_beam(inducer, target, base, sample, vocab, cfg, s);
        if (out.trials.empty() || r.mem.value() > out.best_mem.value()) {
            out.best_prompt = r.prompt;
            out.best_mem = r.mem;
            out.best_generated = r.generated_text;
        }
        out.trials.push_back(std::move(r));
    }
    return out;
}

ExtractMethod extract_method_from_string(std::string_view s) {
    if (s == "induced") return ExtractMethod::Induced;
    if (s == "ps") return ExtractMethod::PsBaseline;
    if (s == "untrained") return ExtractMethod::UntrainedBaseline;
    fail(Errc::invalid_argument, "unknown extract method: " + std::string(s));
}

const char* extract_method_name(ExtractMethod m) {
    switch (m) {
        case ExtractMethod::Induced: return "induced";
        case ExtractMethod::PsBaseline: return "ps";
        case ExtractMethod::UntrainedBaseline: return "untrained";
    }
    return "?";
}

ExtractResult run_extract(const lm::Model& target, const lm::Model* inducer,
                          const lm::Model* base, const corpus::Corpus& c,
                          const ExtractConfig& cfg) {
    const auto& indices = c.split(cfg.split);
    if (indices.empty()) fail(Errc::invalid_argument, "extract: empty split");
    if (cfg.method != ExtractMethod::PsBaseline && (!inducer || !base)) {
        fail(Errc::invalid_argument, "extract: inducer and base models required");
    }
    if (cfg.trials < 1) fail(Errc::invalid_argument, "extract: trials must be >= 1");
    if (target.cfg.vocab_size != c.vocab.size() ||
        (inducer && inducer->cfg.vocab_size != c.vocab.size())) {
        fail(Errc::invalid_argument, "extract: model/corpus vocabulary mismatch");
    }

    struct PerSample {
        std::vector<metrics::ScoreRow> rows;
        metrics::MemScore best;
    };
    std::vector<PerSample> slots(indices.size());
    ParallelGuard guard;

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(thread_budget())
#endif
    for (long i = 0; i < static_cast<long>(indices.size()); ++i) {
        guard.run([&, i] {
            const auto& sample = c.pairs[indices[static_cast<size_t>(i)]];
            PerSample ps;
            if (cfg.method == ExtractMethod::PsBaseline) {
                CandidateResult r = score_prompt(target, sample, c.vocab, {});
                ps.best = r.mem;
                ps.rows.push_back({sample.id, 0, r.mem, ""});
            } else {
                BestOfK bok = induce_best_of_k(*inducer, target, *base, sample, c.vocab,
                                               cfg.icfg, cfg.trials, cfg.seed);
                ps.best = bok.best_mem;
                for (size_t t = 0; t < bok.trials.size(); ++t) {
                    ps.rows.push_back({sample.id, static_cast<int>(t), bok.trials[t].mem,
                                       c.vocab.decode(bok.trials[t].prompt)});
                }
            }
            slots[static_cast<size_t>(i)] = std::move(ps);
        });
    }
    guard.rethrow_if_any();

    ExtractResult out;
    std::vector<metrics::MemScore> bests;
    for (auto& ps : slots) {
        for (auto& row : ps.rows) out.rows.push_back(std::move(row));
        bests.push_back(ps.best);
    }
    out.report = metrics::aggregate(bests);
    return out;
}

}  // namespace memlab::ind
