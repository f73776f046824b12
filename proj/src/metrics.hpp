#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace memlab::metrics {

// longest common subsequence over word lists (dynamic programming)
size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

struct MemScore {
    size_t lcs = 0;
    size_t gen_len = 0;

    // exact hit test on the integer ratio, no float rounding
    bool hit() const { return gen_len > 0 && lcs == gen_len; }
    double value() const {
        return gen_len == 0 ? 0.0
                            : static_cast<double>(lcs) / static_cast<double>(gen_len);
    }
};

// ROUGE-L precision of `generated` against `reference`, word-level.
// Texts are normalized and whitespace-tokenized; empty generated scores 0.
MemScore mem_score(const std::string& generated, const std::string& reference);

struct MemReport {
    std::vector<double> scores;
    double avg_mem = 0.0;   // percent
    double hit_rate = 0.0;  // percent
    size_t n = 0;
};

MemReport aggregate(const std::vector<MemScore>& scores);

// scored generation is truncated to ceil(margin * |reference words|); the
// margin keeps unbounded continuations from deflating precision arbitrarily
inline constexpr double kScoreSlackMargin = 1.25;
size_t scored_word_budget(size_t reference_words);

struct ScoreRow {
    std::string sample_id;
    int trial = 0;
    MemScore score;
    std::string prompt_text;
};

// CSV columns: sample_id, trial, score, hit, prompt_text
std::string score_rows_to_csv(const std::vector<ScoreRow>& rows);

}  // namespace memlab::metrics
