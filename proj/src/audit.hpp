#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "corpus.hpp"
#include "inducer.hpp"
#include "model.hpp"
#include "stats.hpp"
#include "training.hpp"

namespace memlab::audit {

struct AuditConfig {
    lm::ModelConfig proxy_cfg;            // proxy architecture (vocab filled in)
    lm::CorpusTrainOptions proxy_train;   // proxy fine-tuning on the dataset
    lm::ModelConfig inducer_cfg;
    ind::InducerConfig icfg;
    corpus::Split eval_split = corpus::Split::Test;
    int trials = 5;
    double alpha = 0.05;
    uint64_t seed = 0;
};

struct ArmStats {
    std::string label;
    size_t n = 0;
    double mean = 0.0;
    double stddev = 0.0;
};

struct AuditReport {
    ArmStats proxy, suspect_trained, suspect_untrained;
    double z_trained = 0.0, p_trained = 1.0;
    double z_untrained = 0.0, p_untrained = 1.0;
    double alpha = 0.05;
    int trials = 0;
    std::string verdict;  // memorized | not_memorized | inconclusive

    std::string to_json() const;
    std::string to_table() const;  // human-readable summary
};

// decision rule: the untrained arm must separate (p_untrained < alpha) for the
// audit to be conclusive; then a matching trained arm (p_trained > alpha)
// means the suspect memorized the dataset
std::string decide_verdict(double p_trained, double p_untrained, double alpha);

// Fine-tunes a proxy on the dataset, trains (or reuses) an inducer against
// it, scores every eval-split sample per arm with best-of-k induction, and
// runs the two z-tests.
AuditReport run_audit(const corpus::Corpus& c, const AuditConfig& cfg,
                      const lm::Model& suspect_trained,
                      const lm::Model& suspect_untrained,
                      const lm::Model* pretrained_inducer = nullptr,
                      const lm::Model* pretrained_base = nullptr);

}  // namespace memlab::audit
