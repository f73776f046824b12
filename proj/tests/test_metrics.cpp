#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "metrics.hpp"
#include "support/oracles.hpp"
#include "util.hpp"

using namespace memlab;

TEST_CASE("lcs_length: derived and trivial examples") {
    auto words = [](const char* s) { return split_words(s); };
    CHECK(metrics::lcs_length(words("a b c d"), words("a c d e")) == 3);
    CHECK(oracles::lcs_bruteforce(words("a b c d"), words("a c d e")) == 3);

    const auto s = words("x y z w");
    CHECK(metrics::lcs_length(s, s) == s.size());
    CHECK(metrics::lcs_length(s, {}) == 0);
    CHECK(metrics::lcs_length({}, s) == 0);
}

TEST_CASE("lcs_length matches brute-force enumeration on random word lists") {
    Rng rng(12345);
    for (int it = 0; it < 300; ++it) {
        const auto a = oracles::random_words(rng, 10, 4);
        const auto b = oracles::random_words(rng, 10, 4);
        CAPTURE(it);
        CHECK(metrics::lcs_length(a, b) == oracles::lcs_bruteforce(a, b));
    }
}

TEST_CASE("lcs_length is symmetric") {
    Rng rng(777);
    for (int it = 0; it < 100; ++it) {
        const auto a = oracles::random_words(rng, 8, 3);
        const auto b = oracles::random_words(rng, 8, 3);
        CHECK(metrics::lcs_length(a, b) == metrics::lcs_length(b, a));
    }
}

TEST_CASE("mem_score: examples and exactness") {
    CHECK(metrics::mem_score("same words here", "same words here").value() == 1.0);
    CHECK(metrics::mem_score("a b c d", "a c d e").value() == doctest::Approx(0.75));
    // the ratio is exact, not approximate
    CHECK(metrics::mem_score("a b c d", "a c d e").lcs == 3);
    CHECK(metrics::mem_score("a b c d", "a c d e").gen_len == 4);
    CHECK(metrics::mem_score("", "anything").value() == 0.0);
    CHECK_FALSE(metrics::mem_score("", "anything").hit());
}

TEST_CASE("mem_score is precision on generated, not symmetric") {
    // generated is a subsequence of the reference: full precision
    CHECK(metrics::mem_score("a c", "a b c d").value() == 1.0);
    CHECK(metrics::mem_score("a b c d", "a c").value() == doctest::Approx(0.5));
}

TEST_CASE("mem_score monotone in reference extension") {
    Rng rng(31);
    for (int it = 0; it < 100; ++it) {
        auto gen = oracles::random_words(rng, 6, 3);
        auto ref = oracles::random_words(rng, 6, 3);
        auto join = [](const std::vector<std::string>& w) {
            std::string s;
            for (const auto& x : w) {
                if (!s.empty()) s.push_back(' ');
                s += x;
            }
            return s;
        };
        const double before = metrics::mem_score(join(gen), join(ref)).value();
        ref.push_back("w0");
        const double after = metrics::mem_score(join(gen), join(ref)).value();
        CHECK(after >= before);
    }
}

TEST_CASE("hit iff every generated word appears in order in the reference") {
    Rng rng(99);
    for (int it = 0; it < 200; ++it) {
        const auto gen = oracles::random_words(rng, 6, 3);
        const auto ref = oracles::random_words(rng, 8, 3);
        auto join = [](const std::vector<std::string>& w) {
            std::string s;
            for (const auto& x : w) {
                if (!s.empty()) s.push_back(' ');
                s += x;
            }
            return s;
        };
        const auto score = metrics::mem_score(join(gen), join(ref));
        if (gen.empty()) {
            CHECK_FALSE(score.hit());
        } else {
            CHECK(score.hit() == oracles::is_subsequence(gen, ref));
        }
    }
}

TEST_CASE("aggregate") {
    using metrics::MemScore;
    auto report = metrics::aggregate({MemScore{4, 4}, MemScore{4, 4}});
    CHECK(report.avg_mem == doctest::Approx(100.0));
    CHECK(report.hit_rate == doctest::Approx(100.0));

    report = metrics::aggregate({MemScore{4, 4}, MemScore{2, 4}});
    CHECK(report.avg_mem == doctest::Approx(75.0));
    CHECK(report.hit_rate == doctest::Approx(50.0));

    report = metrics::aggregate({MemScore{0, 3}});
    CHECK(report.avg_mem == doctest::Approx(0.0));
    CHECK(report.hit_rate == doctest::Approx(0.0));

    CHECK_THROWS_AS(metrics::aggregate({}), Error);
}

TEST_CASE("score CSV escaping and shape") {
    std::vector<metrics::ScoreRow> rows;
    rows.push_back({"s1", 0, metrics::MemScore{1, 2}, "plain prompt"});
    rows.push_back({"s2", 1, metrics::MemScore{2, 2}, "with,comma \"q\""});
    const std::string csv = metrics::score_rows_to_csv(rows);
    CHECK(csv.find("sample_id,trial,score,hit,prompt_text\n") == 0);
    CHECK(csv.find("s1,0,0.5,0,plain prompt\n") != std::string::npos);
    CHECK(csv.find("\"with,comma \"\"q\"\"\"") != std::string::npos);
}
