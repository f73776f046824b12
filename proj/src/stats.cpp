#include "stats.hpp"

#include <cmath>
#include <limits>

#include "util.hpp"

namespace memlab::stats {

namespace {

// Coefficients from W. J. Cody, "Rational Chebyshev approximation for the
// error function", Mathematics of Computation 23 (1969), 631-637.
// Branches: |x| <= 0.46875 for erf, 0.46875 < |x| <= 4 and |x| > 4 for erfc.
double erf_small(double x) {
    static const double a[5] = {3.16112374387056560e+00, 1.13864154151050156e+02,
                                3.77485237685302021e+02, 3.20937758913846947e+03,
                                1.85777706184603153e-01};
    static const double b[4] = {2.36012909523441209e+01, 2.44024637934444173e+02,
                                1.28261652607737228e+03, 2.84423683343917062e+03};
    const double z = x * x;
    double num = a[4] * z;
    double den = z;
    for (int i = 0; i < 3; ++i) {
        num = (num + a[i]) * z;
        den = (den + b[i]) * z;
    }
    return x * (num + a[3]) / (den + b[3]);
}

double erfc_mid(double x) {
    static const double c[9] = {5.64188496988670089e-01, 8.88314979438837594e+00,
                                6.61191906371416295e+01, 2.98635138197400131e+02,
                                8.81952221241769090e+02, 1.71204761263407058e+03,
                                2.05107837782607147e+03, 1.23033935479799725e+03,
                                2.15311535474403846e-08};
    static const double d[8] = {1.57449261107098347e+01, 1.17693950891312499e+02,
                                5.37181101862009858e+02, 1.62138957456669019e+03,
                                3.29079923573345963e+03, 4.36261909014324716e+03,
                                3.43936767414372164e+03, 1.23033935480374942e+03};
    double num = c[8] * x;
    double den = x;
    for (int i = 0; i < 7; ++i) {
        num = (num + c[i]) * x;
        den = (den + d[i]) * x;
    }
    const double r = (num + c[7]) / (den + d[7]);
    const double z = std::floor(x * 16.0) / 16.0;
    return std::exp(-z * z) * std::exp(-(x - z) * (x + z)) * r;
}

double erfc_large(double x) {
    static const double p[6] = {3.05326634961232344e-01, 3.60344899949804439e-01,
                                1.25781726111229246e-01, 1.60837851487422766e-02,
                                6.58749161529837803e-04, 1.63153871373020978e-02};
    static const double q[5] = {2.56852019228982242e+00, 1.87295284992346047e+00,
                                5.27905102951428412e-01, 6.05183413124413191e-02,
                                2.33520497626869185e-03};
    const double inv_sqrt_pi = 5.64189583547756287e-01;
    const double z = 1.0 / (x * x);
    double num = p[5] * z;
    double den = z;
    for (int i = 0; i < 4; ++i) {
        num = (num + p[i]) * z;
        den = (den + q[i]) * z;
    }
    double r = z * (num + p[4]) / (den + q[4]);
    r = (inv_sqrt_pi - r) / x;
    const double zf = std::floor(x * 16.0) / 16.0;
    return std::exp(-zf * zf) * std::exp(-(x - zf) * (x + zf)) * r;
}

}  // namespace

double erf_cody(double x) {
    const double ax = std::fabs(x);
    if (ax <= 0.46875) return erf_small(x);
    double ec;
    if (ax <= 4.0) ec = erfc_mid(ax);
    else ec = erfc_large(ax);
    const double e = 1.0 - ec;
    return x < 0.0 ? -e : e;
}

double erfc_cody(double x) {
    const double ax = std::fabs(x);
    double ec;
    if (ax <= 0.46875) {
        ec = 1.0 - erf_small(ax);
    } else if (ax <= 4.0) {
        ec = erfc_mid(ax);
    } else if (ax < 26.6) {
        ec = erfc_large(ax);
    } else {
        ec = 0.0;  // below double underflow
    }
    return x < 0.0 ? 2.0 - ec : ec;
}

double normal_cdf(double x) {
    return 0.5 * erfc_cody(-x / 1.41421356237309504880168872420969808);
}

double ScoreSample::mean() const {
    if (scores.empty()) fail(Errc::invalid_argument, "mean of empty sample");
    double s = 0.0;
    for (double v : scores) s += v;
    return s / static_cast<double>(scores.size());
}

double ScoreSample::stddev() const {
    if (scores.size() < 2) fail(Errc::invalid_argument, "stddev needs n >= 2");
    const double m = mean();
    double s = 0.0;
    for (double v : scores) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(scores.size() - 1));
}

ZTestResult two_sample_ztest(const ScoreSample& a, const ScoreSample& b) {
    if (a.n() < 2 || b.n() < 2) {
        fail(Errc::invalid_argument, "z-test needs n >= 2 per sample");
    }
    const double ma = a.mean(), mb = b.mean();
    const double va = a.stddev() * a.stddev();
    const double vb = b.stddev() * b.stddev();
    const double se2 = va / static_cast<double>(a.n()) + vb / static_cast<double>(b.n());

    ZTestResult r;
    if (se2 <= 0.0) {
        // both samples constant: equal means are a perfect match, unequal
        // means are an infinite separation
        if (ma == mb) {
            r.z = 0.0;
            r.p = 1.0;
        } else {
            r.z = ma > mb ? std::numeric_limits<double>::infinity()
                          : -std::numeric_limits<double>::infinity();
            r.p = 0.0;
        }
        return r;
    }
    r.z = (ma - mb) / std::sqrt(se2);
    r.p = erfc_cody(std::fabs(r.z) / 1.41421356237309504880168872420969808);
    if (r.p > 1.0) r.p = 1.0;
    if (r.p < 0.0) r.p = 0.0;
    return r;
}

}  // namespace memlab::stats
