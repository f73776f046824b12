#include "training.hpp"

#include <algorithm>
#include <cmath>

namespace memlab::lm {

namespace {

struct AdamState {
    Model m1, m2;
    long t = 0;
    explicit AdamState(const Model& like) : m1(zeros_like(like)), m2(zeros_like(like)) {}
};

void adam_step(std::vector<TensorRef> params, std::vector<TensorRef> grads,
               std::vector<TensorRef> m1, std::vector<TensorRef> m2, long t,
               double lr, const AdamParams& ap) {
    const double bc1 = 1.0 - std::pow(ap.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(ap.beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        Mat& w = *params[i].tensor;
        Mat& g = *grads[i].tensor;
        Mat& mm = *m1[i].tensor;
        Mat& vv = *m2[i].tensor;
        mm = ap.beta1 * mm + (1.0 - ap.beta1) * g;
        vv = ap.beta2 * vv + (1.0 - ap.beta2) * g.cwiseProduct(g);
        w -= (lr * (mm / bc1).array() / ((vv / bc2).array().sqrt() + ap.eps)).matrix();
    }
}

void zero_tensors(std::vector<TensorRef> refs) {
    for (auto& r : refs) r.tensor->setZero();
}

// input = [BOS] + seq[:-1], labels = seq
void make_lm_item(const std::vector<int>& seq, std::vector<int>& input,
                  std::vector<int>& labels) {
    input.clear();
    input.push_back(kBosId);
    input.insert(input.end(), seq.begin(), seq.end() - 1);
    labels.assign(seq.begin(), seq.end());
}

}  // namespace

void train(Model& m, const std::vector<std::vector<int>>& sequences,
           const TrainOptions& opts, std::vector<double>* step_losses) {
    if (m.adapters) fail(Errc::state, "train: detach adapters first (use finetune_adapters)");
    if (opts.steps < 0) fail(Errc::invalid_argument, "steps must be >= 0");
    if (opts.steps == 0) return;
    if (sequences.empty()) fail(Errc::invalid_argument, "no training sequences");
    if (opts.batch_size < 1) fail(Errc::invalid_argument, "batch_size must be >= 1");
    for (const auto& s : sequences) {
        if (s.empty()) fail(Errc::invalid_argument, "empty training sequence");
        if (static_cast<int>(s.size()) > m.cfg.context_len) {
            fail(Errc::invalid_argument, "training sequence exceeds context length");
        }
    }

    Model grads = zeros_like(m);
    AdamState adam(m);
    std::vector<size_t> order(sequences.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();  // force shuffle on first use
    uint64_t epoch = 0;

    std::vector<int> input, labels;
    for (int step = 1; step <= opts.steps; ++step) {
        // assemble the batch
        std::vector<size_t> batch;
        for (int b = 0; b < opts.batch_size; ++b) {
            if (cursor >= order.size()) {
                Rng rng(Rng::derive(opts.seed, "epoch-order", epoch++));
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }
        size_t total_labels = 0;
        for (size_t idx : batch) total_labels += sequences[idx].size();
        const double w = 1.0 / static_cast<double>(total_labels);

        zero_tensors(base_tensors(grads));
        double ce_sum = 0.0;
        for (size_t idx : batch) {
            make_lm_item(sequences[idx], input, labels);
            auto r = backprop_sequence(m, input, labels, w, GradMode::Base, &grads, nullptr);
            ce_sum += r.ce_sum;
        }
        const double loss = ce_sum / static_cast<double>(total_labels);
        if (!std::isfinite(loss)) fail(Errc::numeric, "non-finite training loss");

        ++adam.t;
        adam_step(base_tensors(m), base_tensors(grads), base_tensors(adam.m1),
                  base_tensors(adam.m2), adam.t, opts.lr, opts.adam);

        if (step_losses) step_losses->push_back(loss);
        if (opts.on_step) opts.on_step(step, loss);
    }
}

void finetune_adapters(Model& m,
                       const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs,
                       const FinetuneOptions& opts, std::vector<double>* epoch_losses) {
    if (pairs.empty()) fail(Errc::invalid_argument, "finetune: no pairs");
    if (opts.epochs < 0) fail(Errc::invalid_argument, "epochs must be >= 0");
    for (const auto& [ctx, tgt] : pairs) {
        if (tgt.empty()) fail(Errc::invalid_argument, "finetune: empty target in pair");
        if (static_cast<int>(ctx.size() + tgt.size()) > m.cfg.context_len) {
            fail(Errc::invalid_argument, "finetune: pair exceeds context length");
        }
    }
    if (!m.adapters) {
        attach_adapters(m, opts.rank, opts.alpha, Rng::derive(opts.seed, "lora"));
    }
    if (opts.epochs == 0) return;

    Model grads = zeros_like(m);
    AdamState adam(m);
    std::vector<size_t> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<int> input, labels;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        Rng rng(Rng::derive(opts.seed, "ft-order", static_cast<uint64_t>(epoch)));
        rng.shuffle(order);
        double epoch_ce = 0.0;
        size_t epoch_labels = 0;
        for (size_t start = 0; start < order.size();
             start += static_cast<size_t>(opts.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(opts.batch_size));
            size_t total_labels = 0;
            for (size_t i = start; i < end; ++i) total_labels += pairs[order[i]].second.size();
            const double w = 1.0 / static_cast<double>(total_labels);

            zero_tensors(adapter_tensors(grads));
            double ce_sum = 0.0;
            for (size_t i = start; i < end; ++i) {
                const auto& [ctx, tgt] = pairs[order[i]];
                input.clear();
                input.push_back(kBosId);
                input.insert(input.end(), ctx.begin(), ctx.end());
                input.insert(input.end(), tgt.begin(), tgt.end() - 1);
                labels.assign(input.size(), -1);
                for (size_t t = 0; t < tgt.size(); ++t) labels[ctx.size() + t] = tgt[t];
                auto r = backprop_sequence(m, input, labels, w, GradMode::AdapterOnly,
                                           &grads, nullptr);
                ce_sum += r.ce_sum;
            }
            if (!std::isfinite(ce_sum)) fail(Errc::numeric, "non-finite finetune loss");
            ++adam.t;
            adam_step(adapter_tensors(m), adapter_tensors(grads),
                      adapter_tensors(adam.m1), adapter_tensors(adam.m2), adam.t,
                      opts.lr, opts.adam);
            epoch_ce += ce_sum;
            epoch_labels += total_labels;
        }
        if (epoch_losses) {
            epoch_losses->push_back(epoch_ce / static_cast<double>(epoch_labels));
        }
    }
}

std::vector<std::vector<int>> pack_streams(const std::vector<std::vector<int>>& records,
                                           int stream_len, int dup, uint64_t seed,
                                           int epochs) {
    if (stream_len < 2) fail(Errc::invalid_argument, "stream_len must be >= 2");
    std::vector<std::vector<int>> streams;
    for (int e = 0; e < epochs; ++e) {
        std::vector<size_t> order;
        for (int d = 0; d < dup; ++d) {
            for (size_t i = 0; i < records.size(); ++i) order.push_back(i);
        }
        Rng rng(Rng::derive(seed, "pack", static_cast<uint64_t>(e)));
        rng.shuffle(order);

        std::vector<int> flat;
        for (size_t idx : order) {
            const auto& r = records[idx];
            flat.insert(flat.end(), r.begin(), r.end());
            flat.push_back(kEosId);
        }
        for (size_t start = 0; start < flat.size(); start += static_cast<size_t>(stream_len)) {
            const size_t end = std::min(flat.size(), start + static_cast<size_t>(stream_len));
            if (end - start < 2) break;  // drop degenerate tail
            streams.emplace_back(flat.begin() + static_cast<long>(start),
                                 flat.begin() + static_cast<long>(end));
        }
    }
    return streams;
}

void train_on_corpus(Model& m, const corpus::Corpus& c, const CorpusTrainOptions& opts,
                     std::vector<double>* step_losses) {
    std::vector<std::vector<int>> records;
    auto add_split = [&](corpus::Split s) {
        for (size_t idx : c.split(s)) records.push_back(c.record_tokens(idx));
    };
    if (opts.include_train) add_split(corpus::Split::Train);
    if (opts.include_test) add_split(corpus::Split::Test);
    if (opts.include_validation) add_split(corpus::Split::Validation);
    if (records.empty()) fail(Errc::invalid_argument, "no records selected for training");

    TrainOptions topts;
    topts.lr = opts.lr;
    topts.batch_size = opts.batch_size;
    topts.seed = opts.seed;
    topts.on_step = opts.on_step;

    std::vector<std::vector<int>> sequences;
    if (opts.pack) {
        const int stream_len = std::min(opts.stream_len, m.cfg.context_len);
        sequences = pack_streams(records, stream_len, opts.dup, opts.seed, opts.epochs);
        topts.steps = static_cast<int>(
            (sequences.size() + static_cast<size_t>(opts.batch_size) - 1) /
            static_cast<size_t>(opts.batch_size));
    } else {
        for (auto& r : records) {
            r.push_back(kEosId);
            if (static_cast<int>(r.size()) > m.cfg.context_len) {
                r.resize(static_cast<size_t>(m.cfg.context_len));
            }
            sequences.push_back(std::move(r));
        }
        const int batches_per_epoch = static_cast<int>(
            (sequences.size() + static_cast<size_t>(opts.batch_size) - 1) /
            static_cast<size_t>(opts.batch_size));
        topts.steps = opts.epochs * batches_per_epoch;
    }
    train(m, sequences, topts, step_losses);
}

}  // namespace memlab::lm
