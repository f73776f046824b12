#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "corpus.hpp"
#include "model.hpp"

namespace memlab::lm {

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainOptions {
    int steps = 100;
    double lr = 1e-3;
    int batch_size = 8;
    uint64_t seed = 0;
    AdamParams adam;
    std::function<void(int step, double loss)> on_step;  // optional
};

// Full-parameter Adam training on raw token sequences. Deterministic for a
// fixed seed; rejects models with adapters attached (use finetune_adapters).
void train(Model& m, const std::vector<std::vector<int>>& sequences,
           const TrainOptions& opts, std::vector<double>* step_losses = nullptr);

struct FinetuneOptions {
    int epochs = 8;
    double lr = 5e-4;
    int rank = 8;
    double alpha = 16.0;
    int batch_size = 8;
    uint64_t seed = 0;
    AdamParams adam;
};

// LoRA fine-tuning on (context -> target) pairs; attaches zero-initialized
// adapters to the attention projections on first use, base weights frozen,
// loss restricted to target tokens.
void finetune_adapters(Model& m,
                       const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs,
                       const FinetuneOptions& opts,
                       std::vector<double>* epoch_losses = nullptr);

// --- corpus-level convenience (stream packing) ------------------------------

struct CorpusTrainOptions {
    int epochs = 50;
    double lr = 1e-3;
    int batch_size = 8;
    bool pack = true;      // shuffle records into fixed-length streams per epoch
    int stream_len = 48;
    int dup = 1;           // times each record appears per epoch
    uint64_t seed = 0;
    bool include_train = true;
    bool include_test = true;
    bool include_validation = true;
    std::function<void(int step, double loss)> on_step;
};

// records separated by EOS, chunked into stream_len windows, fresh shuffle
// per epoch
std::vector<std::vector<int>> pack_streams(const std::vector<std::vector<int>>& records,
                                           int stream_len, int dup, uint64_t seed,
                                           int epochs);

void train_on_corpus(Model& m, const corpus::Corpus& c, const CorpusTrainOptions& opts,
                     std::vector<double>* step_losses = nullptr);

}  // namespace memlab::lm
