#include "metrics.hpp"

#include <algorithm>
#include <cmath>

#include "util.hpp"

namespace memlab::metrics {

size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.empty() || b.empty()) return 0;
    // two-row DP over |b|+1 columns
    std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (size_t i = 1; i <= a.size(); ++i) {
        for (size_t j = 1; j <= b.size(); ++j) {
            if (a[i - 1] == b[j - 1]) {
                cur[j] = prev[j - 1] + 1;
            } else {
                cur[j] = std::max(prev[j], cur[j - 1]);
            }
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

MemScore mem_score(const std::string& generated, const std::string& reference) {
    const auto gen = split_words(normalize_text(generated));
    const auto ref = split_words(normalize_text(reference));
    MemScore s;
    s.gen_len = gen.size();
    s.lcs = lcs_length(gen, ref);
    return s;
}

MemReport aggregate(const std::vector<MemScore>& scores) {
    if (scores.empty()) fail(Errc::invalid_argument, "aggregate: empty score list");
    MemReport r;
    r.n = scores.size();
    size_t hits = 0;
    double sum = 0.0;
    for (const auto& s : scores) {
        r.scores.push_back(s.value());
        sum += s.value();
        if (s.hit()) ++hits;
    }
    r.avg_mem = 100.0 * sum / static_cast<double>(r.n);
    r.hit_rate = 100.0 * static_cast<double>(hits) / static_cast<double>(r.n);
    return r;
}

size_t scored_word_budget(size_t reference_words) {
    return static_cast<size_t>(
        std::ceil(kScoreSlackMargin * static_cast<double>(reference_words)));
}

std::string score_rows_to_csv(const std::vector<ScoreRow>& rows) {
    std::string out = "sample_id,trial,score,hit,prompt_text\n";
    for (const auto& r : rows) {
        out += csv_escape(r.sample_id);
        out += ',';
        out += std::to_string(r.trial);
        out += ',';
        out += fmt_double(r.score.value());
        out += ',';
        out += r.score.hit() ? '1' : '0';
        out += ',';
        out += csv_escape(r.prompt_text);
        out += '\n';
    }
    return out;
}

}  // namespace memlab::metrics
