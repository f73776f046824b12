#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace memlab::stats {

// Cody's rational Chebyshev approximation of erf/erfc (Math. Comp. 23, 1969);
// relative error below 1e-13 over the implemented branches.
double erf_cody(double x);
double erfc_cody(double x);

// standard normal CDF
double normal_cdf(double x);

struct ScoreSample {
    std::string label;
    std::vector<double> scores;

    size_t n() const { return scores.size(); }
    double mean() const;
    double stddev() const;  // sample standard deviation, divisor n-1
};

struct ZTestResult {
    double z = 0.0;
    double p = 1.0;  // two-sided
};

// Welch-style two-sample z test. Defined limits: identical constant samples
// give z=0, p=1; unequal constant samples give p=0.
ZTestResult two_sample_ztest(const ScoreSample& a, const ScoreSample& b);

}  // namespace memlab::stats
