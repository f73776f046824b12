#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "util.hpp"

namespace memlab::lm {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 64;
    int d_ff = 256;
    int context_len = 256;
    int vocab_size = 0;
    uint64_t seed = 0;

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

struct GenerationParams {
    int max_new_tokens = 32;
    int top_k = 0;  // 0 = full distribution
    double temperature = 1.0;
    bool greedy = true;
    uint64_t rng_seed = 0;
};

// Low-rank adapter for one projection: effective W = W + (alpha/rank) * b * a
struct Adapter {
    Mat a;  // [rank, d_in]
    Mat b;  // [d_out, rank], zero-initialized
};

struct AdapterSet {
    int rank = 8;
    double alpha = 16.0;
    // q, k, v, o per layer
    std::vector<std::array<Adapter, 4>> layers;
};

struct Block {
    Mat ln1_gain;  // [1, C]
    Mat wq, wk, wv, wo;  // [C, C], row = output dim
    Mat ln2_gain;  // [1, C]
    Mat w1;  // [F, C]
    Mat w2;  // [C, F]
};

// Decoder-only transformer: token+position embeddings, pre-RMSNorm blocks
// with causal multi-head attention and a GELU MLP, untied output head.
// All arithmetic is double precision.
struct Model {
    ModelConfig cfg;
    Mat wte;  // [V, C]
    Mat wpe;  // [ctx, C]
    std::vector<Block> blocks;
    Mat lnf_gain;  // [1, C]
    Mat wout;  // [V, C]
    std::optional<AdapterSet> adapters;

    int head_dim() const { return cfg.d_model / cfg.n_heads; }
};

struct TensorRef {
    std::string name;
    Mat* tensor;
};

Model init_model(const ModelConfig& cfg);
Model zeros_like(const Model& m);

std::vector<TensorRef> base_tensors(Model& m);
std::vector<TensorRef> adapter_tensors(Model& m);
size_t param_count(const Model& m, bool include_adapters = true);

void attach_adapters(Model& m, int rank, double alpha, uint64_t seed);

// reserved token ids shared with the corpus module
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;

// --- inference ------------------------------------------------------------

// per-position logits for the sequence exactly as given (no implicit BOS)
Mat forward_logits(const Model& m, std::span<const int> ids);

// mean token-level cross-entropy of target given [BOS, context], nats
double conditional_loss(const Model& m, std::span<const int> context,
                        std::span<const int> target);

// sum of token log-probabilities of seq, first token conditioned on BOS
double sequence_logprob(const Model& m, std::span<const int> seq);

std::vector<int> generate(const Model& m, std::span<const int> prompt,
                          const GenerationParams& params);

// Gradient of conditional_loss([seq], target) w.r.t. the one-hot token
// indicator at each requested seq position, expressed per vocabulary entry.
// positions index into seq; the target region is rejected.
Mat token_gradients(const Model& m, std::span<const int> seq,
                    std::span<const int> target, std::span<const int> positions);

// --- batched evaluation (read-only, slot-parallel) -------------------------

struct EvalItem {
    std::vector<int> input;   // fed as-is (caller prepends BOS)
    std::vector<int> labels;  // aligned to input, -1 = ignored
};

struct CeSum {
    double sum = 0.0;
    int count = 0;
    double mean() const { return count == 0 ? 0.0 : sum / count; }
};

std::vector<CeSum> batched_ce(const Model& m, const std::vector<EvalItem>& items);

// --- internals shared with training ----------------------------------------

enum class GradMode { Base, AdapterOnly };

struct SeqBackpropResult {
    double ce_sum = 0.0;
    int label_count = 0;
};

// forward+backward of one (input, labels) pair; loss weight applied per
// labeled position; grads accumulated into `grads` (same shape as model);
// optionally captures d(embedding input) rows into dx0
SeqBackpropResult backprop_sequence(const Model& m, std::span<const int> input,
                                    std::span<const int> labels, double label_weight,
                                    GradMode mode, Model* grads, Mat* dx0);

double ce_from_logits_row(const Mat& logits, int row, int label);

}  // namespace memlab::lm
