#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "inducer.hpp"
#include "model.hpp"

namespace memlab::gcg {

struct GcgConfig {
    int n_tokens = 16;   // prompt length for cold starts
    int num_steps = 100;
    int top_k = 48;      // gradient-ranked candidates per position
    int batch = 64;      // mutants evaluated per step
    bool include_current = true;  // incumbent competes, best loss never regresses
    uint64_t seed = 0;

    void validate() const;
};

struct GcgStep {
    int step = 0;        // 0 = initial prompt
    double loss = 0.0;   // best cross-entropy so far
    double mem = 0.0;
    double cum_seconds = 0.0;
};

struct GcgTrace {
    std::string arm;  // "cold" | "warm"
    double presearch_seconds = 0.0;  // induction time for warm starts
    std::vector<GcgStep> steps;
};

struct GcgResult {
    std::vector<int> prompt;
    double loss = 0.0;
    GcgTrace trace;
};

// Discrete prompt search: per step, rank top_k substitutions per position by
// negative token gradient, evaluate `batch` single-token mutants sampled
// without replacement from the position x candidate grid, keep the argmin.
// Loss is pure cross-entropy of y given [prompt, x].
GcgResult gcg_optimize(const lm::Model& target, std::optional<std::vector<int>> init,
                       const corpus::SamplePair& sample, const corpus::Vocabulary& vocab,
                       const GcgConfig& cfg);

// induce p* with best-of-k, then refine it with gcg_optimize; the trace
// records induction time separately from search time
GcgResult warm_start_extract(const lm::Model& inducer, const lm::Model& target,
                             const lm::Model& base, const corpus::SamplePair& sample,
                             const corpus::Vocabulary& vocab,
                             const ind::InducerConfig& icfg, const GcgConfig& gcfg);

// CSV columns: step, loss, mem, cum_seconds, arm
std::string traces_to_csv(const std::vector<GcgTrace>& traces);

}  // namespace memlab::gcg
