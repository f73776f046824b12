#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "stats.hpp"
#include "util.hpp"

using namespace memlab;

TEST_CASE("erf/erfc match the C library to 1e-13") {
    for (double x = -8.0; x <= 8.0; x += 0.0173) {
        CHECK(std::fabs(stats::erf_cody(x) - std::erf(x)) < 1e-13);
        const double rel = std::fabs(stats::erfc_cody(x) - std::erfc(x)) /
                           std::max(std::erfc(x), 1e-300);
        CHECK(rel < 1e-12);
    }
    CHECK(stats::erfc_cody(30.0) == 0.0);
    CHECK(stats::erfc_cody(-30.0) == doctest::Approx(2.0));
}

TEST_CASE("normal_cdf basics") {
    CHECK(stats::normal_cdf(0.0) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(stats::normal_cdf(1.959963984540054) == doctest::Approx(0.975).epsilon(1e-12));
    CHECK(stats::normal_cdf(-1.959963984540054) == doctest::Approx(0.025).epsilon(1e-12));
    CHECK(stats::normal_cdf(10.0) == 1.0);  // rounds to 1 in double precision
}

TEST_CASE("ScoreSample moments") {
    stats::ScoreSample s;
    s.scores = {1.0, 2.0, 3.0, 4.0};
    CHECK(s.mean() == doctest::Approx(2.5));
    CHECK(s.stddev() == doctest::Approx(std::sqrt(5.0 / 3.0)));
}

TEST_CASE("z-test: identical samples give z=0, p=1") {
    stats::ScoreSample a, b;
    a.scores = {0.2, 0.4, 0.6};
    b.scores = a.scores;
    const auto r = stats::two_sample_ztest(a, b);
    CHECK(r.z == doctest::Approx(0.0));
    CHECK(r.p == doctest::Approx(1.0));
}

TEST_CASE("z-test: derived large-separation case") {
    // means 0.9 vs 0.1, std 0.05 each, n = 100: z = 0.8 / sqrt(2 * 0.0025/100)
    stats::ScoreSample a, b;
    for (int i = 0; i < 50; ++i) {
        a.scores.push_back(0.85);
        a.scores.push_back(0.95);
        b.scores.push_back(0.05);
        b.scores.push_back(0.15);
    }
    // sample std of the two-point distribution {m-0.05, m+0.05} is
    // 0.05 * sqrt(100/99)
    const double sd = 0.05 * std::sqrt(100.0 / 99.0);
    const double expected_z = 0.8 / std::sqrt(2.0 * sd * sd / 100.0);
    const auto r = stats::two_sample_ztest(a, b);
    CHECK(r.z == doctest::Approx(expected_z).epsilon(1e-12));
    CHECK(r.z > 100.0);
    CHECK(r.p == 0.0);  // numerically zero far beyond double underflow
}

TEST_CASE("z-test: sign antisymmetry, p unchanged") {
    Rng rng(5);
    stats::ScoreSample a, b;
    for (int i = 0; i < 40; ++i) {
        a.scores.push_back(rng.real());
        b.scores.push_back(0.3 + 0.5 * rng.real());
    }
    const auto ab = stats::two_sample_ztest(a, b);
    const auto ba = stats::two_sample_ztest(b, a);
    CHECK(ab.z == doctest::Approx(-ba.z).epsilon(1e-14));
    CHECK(ab.p == doctest::Approx(ba.p).epsilon(1e-14));
}

TEST_CASE("z-test: p decreases monotonically with the mean gap") {
    double last_p = 1.1;
    for (double gap = 0.0; gap < 0.5; gap += 0.05) {
        stats::ScoreSample a, b;
        for (int i = 0; i < 30; ++i) {
            const double noise = 0.001 * static_cast<double>(i % 7);
            a.scores.push_back(0.5 + gap + noise);
            b.scores.push_back(0.5 + noise);
        }
        const auto r = stats::two_sample_ztest(a, b);
        CHECK(r.p <= last_p + 1e-15);
        last_p = r.p;
    }
}

TEST_CASE("z-test: defined limits for constant samples") {
    stats::ScoreSample a, b;
    a.scores = {0.5, 0.5, 0.5};
    b.scores = {0.5, 0.5};
    auto r = stats::two_sample_ztest(a, b);
    CHECK(r.z == 0.0);
    CHECK(r.p == 1.0);

    b.scores = {0.1, 0.1};
    r = stats::two_sample_ztest(a, b);
    CHECK(r.p == 0.0);
    CHECK(std::isinf(r.z));

    CHECK_THROWS_AS(stats::two_sample_ztest(a, stats::ScoreSample{"", {0.1}}), Error);
}
