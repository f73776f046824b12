#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "metrics.hpp"
#include "model.hpp"

namespace memlab::ind {

struct InducerConfig {
    int max_it = 10;
    int pool_capacity = 256;
    int finetune_epochs = 8;
    double finetune_lr = 5e-4;
    int adapter_rank = 8;
    double adapter_alpha = 16.0;
    int top_k = 48;
    int beams = 4;
    double lambda = 0.1;      // readability weight
    int max_prompt_len = 16;
    int trials = 5;           // best-of-k default
    double tau = 1.0;         // beam survivor softmax temperature
    bool rejection_sampling = true;  // disabled = ablation mode, pool admits everything
    uint64_t seed = 0;

    void validate() const;
};

// L(y | [p, x]) on the target plus lambda * (-log P_base([p, x]))
double combined_loss(const lm::Model& target, const lm::Model& base,
                     std::span<const int> p, std::span<const int> x,
                     std::span<const int> y, double lambda);

struct CandidateResult {
    std::vector<int> prompt;
    double loss = 0.0;           // combined loss of the returned prompt
    metrics::MemScore mem;       // score of the greedy continuation under the prompt
    std::string generated_text;  // scored continuation (truncated per metric rule)
};

// Greedy candidate search (deterministic): each step proposes top_k
// single-token extensions from the inducer and appends the combined-loss
// argmin (ties to the lowest token id). The empty prompt is admitted as a
// baseline; the returned entry is the best-loss prefix visited.
CandidateResult generate_candidate_prompt(const lm::Model& inducer,
                                          const lm::Model& target,
                                          const lm::Model& base,
                                          const corpus::SamplePair& sample,
                                          const corpus::Vocabulary& vocab,
                                          const InducerConfig& cfg);

// Randomized beam variant: b beams, survivors sampled without replacement
// from softmax(-loss/tau) over all expansions. b=1 with tau -> 0 degenerates
// to the greedy search.
CandidateResult generate_candidate_prompt_beam(const lm::Model& inducer,
                                               const lm::Model& target,
                                               const lm::Model& base,
                                               const corpus::SamplePair& sample,
                                               const corpus::Vocabulary& vocab,
                                               const InducerConfig& cfg,
                                               uint64_t seed);

struct PromptPoolEntry {
    std::string sample_id;
    std::vector<int> prompt;
    double combined_loss = 0.0;
    metrics::MemScore mem;
    int iteration = 0;
};

// Capacity-bounded store of induced prompts, filled by rejection sampling:
// an entry is admitted only if it improves its sample's best loss or best
// score (always admitted when rejection sampling is disabled).
class PromptPool {
public:
    explicit PromptPool(int capacity = 256, bool rejection_sampling = true)
        : capacity_(capacity), rejection_(rejection_sampling) {}

    bool update(PromptPoolEntry entry);

    size_t size() const { return size_; }
    bool empty() const { return size_ == 0; }
    const std::map<std::string, std::vector<PromptPoolEntry>>& entries() const {
        return by_sample_;
    }

    double mean_best_loss() const;
    double mean_best_mem() const;

    // fine-tuning pairs (x -> prompt); empty prompts are skipped
    std::vector<std::pair<std::vector<int>, std::vector<int>>> finetune_pairs(
        const corpus::Corpus& c) const;

    std::string to_jsonl(const corpus::Vocabulary& vocab) const;

private:
    void evict_worst();

    int capacity_;
    bool rejection_;
    size_t size_ = 0;
    std::map<std::string, std::vector<PromptPoolEntry>> by_sample_;  // loss-ascending
};

struct IterationDiag {
    int iteration = 0;
    double mean_best_loss = 0.0;  // mean over samples of their best loss
    double mean_best_mem = 0.0;
    size_t pool_size = 0;
    size_t accepted = 0;
};

std::string diags_to_csv(const std::vector<IterationDiag>& diags);

struct TrainInducerResult {
    PromptPool pool;
    std::vector<IterationDiag> diags;
    lm::Model base;  // frozen pre-training snapshot (readability model)
};

// Alternates candidate generation + pool update with adapter fine-tuning on
// pool contents, max_it times. The target model stays frozen. The readability
// model defaults to a frozen snapshot of the incoming inducer; passing
// base_model overrides it with a pre-trained language model, which makes the
// readability term actually discriminate plausible from implausible prompts.
TrainInducerResult train_inducer(lm::Model& inducer, const lm::Model& target,
                                 const corpus::Corpus& c, corpus::Split split,
                                 const InducerConfig& cfg,
                                 const lm::Model* base_model = nullptr);

struct BestOfK {
    std::vector<int> best_prompt;
    metrics::MemScore best_mem;
    std::string best_generated;
    std::vector<CandidateResult> trials;  // one per trial, in order
};

// k stochastic beam generations with per-trial derived seeds; inference-only.
BestOfK induce_best_of_k(const lm::Model& inducer, const lm::Model& target,
                         const lm::Model& base, const corpus::SamplePair& sample,
                         const corpus::Vocabulary& vocab, const InducerConfig& cfg,
                         int k, uint64_t seed);

// greedy continuation of [prompt, x] scored against y (mem_score rules)
CandidateResult score_prompt(const lm::Model& target, const corpus::SamplePair& sample,
                             const corpus::Vocabulary& vocab, std::vector<int> prompt);

// --- extraction driver -------------------------------------------------------

enum class ExtractMethod { Induced, PsBaseline, UntrainedBaseline };
ExtractMethod extract_method_from_string(std::string_view s);
const char* extract_method_name(ExtractMethod m);

struct ExtractConfig {
    ExtractMethod method = ExtractMethod::Induced;
    corpus::Split split = corpus::Split::Test;
    int trials = 5;
    uint64_t seed = 0;
    InducerConfig icfg;
};

struct ExtractResult {
    std::vector<metrics::ScoreRow> rows;   // one row per (sample, trial)
    metrics::MemReport report;             // over per-sample best
};

// `inducer`/`base` may be null for the P-S baseline; the untrained baseline
// passes a freshly initialized inducer as both.
ExtractResult run_extract(const lm::Model& target, const lm::Model* inducer,
                          const lm::Model* base, const corpus::Corpus& c,
                          const ExtractConfig& cfg);

}  // namespace memlab::ind
