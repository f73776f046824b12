#include "audit.hpp"

#include <cmath>

#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace memlab::audit {

using json = nlohmann::ordered_json;

std::string decide_verdict(double p_trained, double p_untrained, double alpha) {
    if (p_untrained >= alpha) return "inconclusive";
    return p_trained > alpha ? "memorized" : "not_memorized";
}

namespace {

ArmStats arm_stats(const std::string& label, const stats::ScoreSample& s) {
    ArmStats a;
    a.label = label;
    a.n = s.n();
    a.mean = s.mean();
    a.stddev = s.stddev();
    return a;
}

stats::ScoreSample score_arm(const std::string& label, const lm::Model& arm_model,
                             const lm::Model& inducer, const lm::Model& base,
                             const corpus::Corpus& c, const AuditConfig& cfg) {
    const auto& indices = c.split(cfg.eval_split);
    stats::ScoreSample s;
    s.label = label;
    s.scores.resize(indices.size());
    ParallelGuard guard;
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(thread_budget())
#endif
    for (long i = 0; i < static_cast<long>(indices.size()); ++i) {
        guard.run([&, i] {
            const auto& sample = c.pairs[indices[static_cast<size_t>(i)]];
            auto bok = ind::induce_best_of_k(inducer, arm_model, base, sample, c.vocab,
                                             cfg.icfg, cfg.trials,
                                             Rng::derive(cfg.seed, label));
            s.scores[static_cast<size_t>(i)] = bok.best_mem.value();
        });
    }
    guard.rethrow_if_any();
    return s;
}

}  // namespace

std::string AuditReport::to_json() const {
    json j;
    auto arm = [](const ArmStats& a) {
        return json{{"label", a.label}, {"n", a.n}, {"mean", a.mean}, {"std", a.stddev}};
    };
    j["alpha"] = alpha;
    j["trials"] = trials;
    j["arms"] = {{"proxy", arm(proxy)},
                 {"suspect_trained", arm(suspect_trained)},
                 {"suspect_untrained", arm(suspect_untrained)}};
    j["z_proxy_vs_trained"] = z_trained;
    j["p_proxy_vs_trained"] = p_trained;
    j["z_proxy_vs_untrained"] = z_untrained;
    j["p_proxy_vs_untrained"] = p_untrained;
    j["verdict"] = verdict;
    return j.dump(2) + "\n";
}

std::string AuditReport::to_table() const {
    auto pct = [](double v) { return fmt_double(100.0 * v); };
    std::string out;
    out += "Proxy Mem | Suspect Mem (T) | p-value (Proxy vs T) | Suspect Mem (U) | p-value (Proxy vs U) | Verdict\n";
    out += pct(proxy.mean) + " | " + pct(suspect_trained.mean) + " | " +
           fmt_double(p_trained) + " | " + pct(suspect_untrained.mean) + " | " +
           fmt_double(p_untrained) + " | " + verdict + "\n";
    return out;
}

AuditReport run_audit(const corpus::Corpus& c, const AuditConfig& cfg,
                      const lm::Model& suspect_trained,
                      const lm::Model& suspect_untrained,
                      const lm::Model* pretrained_inducer,
                      const lm::Model* pretrained_base) {
    if (c.split(cfg.eval_split).size() < 2) {
        fail(Errc::invalid_argument, "audit: eval split needs at least 2 samples");
    }
    if (suspect_trained.cfg.vocab_size != c.vocab.size() ||
        suspect_untrained.cfg.vocab_size != c.vocab.size()) {
        fail(Errc::invalid_argument, "audit: suspect vocabulary mismatch");
    }

    // proxy fine-tuned on the dataset
    lm::ModelConfig pcfg = cfg.proxy_cfg;
    pcfg.vocab_size = c.vocab.size();
    pcfg.seed = Rng::derive(cfg.seed, "proxy");
    lm::Model proxy = lm::init_model(pcfg);
    lm::CorpusTrainOptions topts = cfg.proxy_train;
    topts.seed = Rng::derive(cfg.seed, "proxy-train");
    lm::train_on_corpus(proxy, c, topts);

    // inducer trained against the proxy (or reused, inference-only)
    lm::Model inducer;
    lm::Model base;
    if (pretrained_inducer) {
        inducer = *pretrained_inducer;
        base = pretrained_base ? *pretrained_base
                               : lm::init_model(pretrained_inducer->cfg);
    } else {
        lm::ModelConfig icfg_model = cfg.inducer_cfg;
        icfg_model.vocab_size = c.vocab.size();
        icfg_model.seed = Rng::derive(cfg.seed, "inducer");
        inducer = lm::init_model(icfg_model);
        ind::InducerConfig icfg = cfg.icfg;
        icfg.seed = Rng::derive(cfg.seed, "inducer-train");
        auto tr = ind::train_inducer(inducer, proxy, c, corpus::Split::Train, icfg);
        base = std::move(tr.base);
    }

    AuditReport rep;
    rep.alpha = cfg.alpha;
    rep.trials = cfg.trials;

    auto s_proxy = score_arm("proxy", proxy, inducer, base, c, cfg);
    auto s_trained = score_arm("suspect_trained", suspect_trained, inducer, base, c, cfg);
    auto s_untrained =
        score_arm("suspect_untrained", suspect_untrained, inducer, base, c, cfg);

    rep.proxy = arm_stats("proxy", s_proxy);
    rep.suspect_trained = arm_stats("suspect_trained", s_trained);
    rep.suspect_untrained = arm_stats("suspect_untrained", s_untrained);

    auto zt = stats::two_sample_ztest(s_proxy, s_trained);
    auto zu = stats::two_sample_ztest(s_proxy, s_untrained);
    rep.z_trained = zt.z;
    rep.p_trained = zt.p;
    rep.z_untrained = zu.z;
    rep.p_untrained = zu.p;
    rep.verdict = decide_verdict(rep.p_trained, rep.p_untrained, rep.alpha);
    return rep;
}

}  // namespace memlab::audit
