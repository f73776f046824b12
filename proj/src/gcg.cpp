#include "gcg.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace memlab::gcg {

void GcgConfig::validate() const {
    if (n_tokens < 1) fail(Errc::invalid_argument, "n_tokens must be >= 1");
    if (num_steps < 0) fail(Errc::invalid_argument, "num_steps must be >= 0");
    if (top_k < 1) fail(Errc::invalid_argument, "top_k must be >= 1");
    if (batch < 1) fail(Errc::invalid_argument, "batch must be >= 1");
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

double prompt_loss(const lm::Model& target, const std::vector<int>& prompt,
                   const corpus::SamplePair& sample) {
    std::vector<int> ctx = prompt;
    ctx.insert(ctx.end(), sample.x.begin(), sample.x.end());
    return lm::conditional_loss(target, ctx, sample.y);
}

}  // namespace

GcgResult gcg_optimize(const lm::Model& target, std::optional<std::vector<int>> init,
                       const corpus::SamplePair& sample, const corpus::Vocabulary& vocab,
                       const GcgConfig& cfg) {
    cfg.validate();
    const int V = target.cfg.vocab_size;
    Rng rng(Rng::derive(cfg.seed, "gcg"));

    std::vector<int> prompt;
    if (init) {
        prompt = *init;
    } else {
        prompt.resize(static_cast<size_t>(cfg.n_tokens));
        for (auto& t : prompt) t = static_cast<int>(rng.below(static_cast<uint64_t>(V)));
    }
    const int n = static_cast<int>(prompt.size());
    if (n < 1) fail(Errc::invalid_argument, "gcg needs a non-empty prompt");
    if (static_cast<size_t>(n) + sample.x.size() + sample.y.size() >
        static_cast<size_t>(target.cfg.context_len)) {
        fail(Errc::invalid_argument, "init + prefix + target exceeds context length");
    }

    const auto t0 = Clock::now();
    GcgResult res;
    res.trace.arm = "cold";

    double cur_loss = prompt_loss(target, prompt, sample);
    double last_t = 0.0;
    auto record = [&](int step, const std::vector<int>& p, double loss) {
        GcgStep s;
        s.step = step;
        s.loss = loss;
        s.mem = ind::score_prompt(target, sample, vocab, p).mem.value();
        double t = seconds_since(t0);
        if (t <= last_t) t = last_t + 1e-9;  // keep the cumulative clock strict
        last_t = t;
        s.cum_seconds = t;
        res.trace.steps.push_back(s);
    };
    record(0, prompt, cur_loss);

    const int k = std::min(cfg.top_k, V);
    std::vector<int> positions(static_cast<size_t>(n));
    std::iota(positions.begin(), positions.end(), 0);

    for (int step = 1; step <= cfg.num_steps; ++step) {
        std::vector<int> ctx = prompt;
        ctx.insert(ctx.end(), sample.x.begin(), sample.x.end());
        lm::Mat grads = lm::token_gradients(target, ctx, sample.y, positions);

        // top_k candidate tokens per position by most-negative gradient
        std::vector<std::vector<int>> cands(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            std::vector<int> order(static_cast<size_t>(V));
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                return grads(i, a) < grads(i, b);
            });
            order.resize(static_cast<size_t>(k));
            cands[static_cast<size_t>(i)] = std::move(order);
        }

        // sample `batch` mutants without replacement from the (position,
        // candidate) grid; covering the whole grid makes the search exhaustive
        const size_t grid = static_cast<size_t>(n) * static_cast<size_t>(k);
        std::vector<size_t> picks;
        if (static_cast<size_t>(cfg.batch) >= grid) {
            picks.resize(grid);
            std::iota(picks.begin(), picks.end(), size_t{0});
        } else {
            std::vector<size_t> all(grid);
            std::iota(all.begin(), all.end(), size_t{0});
            for (int b = 0; b < cfg.batch; ++b) {
                const size_t j =
                    static_cast<size_t>(b) +
                    static_cast<size_t>(rng.below(static_cast<uint64_t>(grid - static_cast<size_t>(b))));
                std::swap(all[static_cast<size_t>(b)], all[j]);
                picks.push_back(all[static_cast<size_t>(b)]);
            }
        }

        std::vector<lm::EvalItem> items;
        std::vector<std::vector<int>> mutants;
        items.reserve(picks.size());
        mutants.reserve(picks.size());
        for (size_t pick : picks) {
            const int pos = static_cast<int>(pick / static_cast<size_t>(k));
            const int cand = cands[static_cast<size_t>(pos)][pick % static_cast<size_t>(k)];
            std::vector<int> mut = prompt;
            mut[static_cast<size_t>(pos)] = cand;

            lm::EvalItem item;
            item.input.push_back(lm::kBosId);
            item.input.insert(item.input.end(), mut.begin(), mut.end());
            item.input.insert(item.input.end(), sample.x.begin(), sample.x.end());
            item.input.insert(item.input.end(), sample.y.begin(), sample.y.end() - 1);
            item.labels.assign(item.input.size(), -1);
            const size_t ctx_len = mut.size() + sample.x.size();
            for (size_t t = 0; t < sample.y.size(); ++t) {
                item.labels[ctx_len + t] = sample.y[t];
            }
            items.push_back(std::move(item));
            mutants.push_back(std::move(mut));
        }
        auto ce = lm::batched_ce(target, items);

        size_t arg = 0;
        double best = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < ce.size(); ++i) {
            const double loss = ce[i].mean();
            if (loss < best) {
                best = loss;
                arg = i;
            }
        }
        if (cfg.include_current) {
            if (best < cur_loss) {
                prompt = mutants[arg];
                cur_loss = best;
            }
        } else {
            // literal update: take the best mutant unconditionally
            prompt = mutants[arg];
            cur_loss = best;
        }
        record(step, prompt, cur_loss);
    }
    res.prompt = prompt;
    res.loss = cur_loss;
    return res;
}

GcgResult warm_start_extract(const lm::Model& inducer, const lm::Model& target,
                             const lm::Model& base, const corpus::SamplePair& sample,
                             const corpus::Vocabulary& vocab,
                             const ind::InducerConfig& icfg, const GcgConfig& gcfg) {
    const auto t0 = std::chrono::steady_clock::now();
    ind::BestOfK bok = ind::induce_best_of_k(inducer, target, base, sample, vocab, icfg,
                                             icfg.trials, icfg.seed);
    const double presearch =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::vector<int> init = bok.best_prompt;
    if (init.empty()) {
        // GCG mutates positions; seed a single neutral token when the inducer
        // settled on the empty prompt
        init.push_back(lm::kPadId);
    }
    GcgResult res = gcg_optimize(target, init, sample, vocab, gcfg);
    res.trace.arm = "warm";
    res.trace.presearch_seconds = presearch;
    for (auto& s : res.trace.steps) s.cum_seconds += presearch;
    return res;
}

std::string traces_to_csv(const std::vector<GcgTrace>& traces) {
    std::string out = "step,loss,mem,cum_seconds,arm\n";
    for (const auto& tr : traces) {
        for (const auto& s : tr.steps) {
            out += std::to_string(s.step) + ',' + fmt_double(s.loss) + ',' +
                   fmt_double(s.mem) + ',' + fmt_double(s.cum_seconds) + ',' + tr.arm +
                   '\n';
        }
    }
    return out;
}

}  // namespace memlab::gcg
