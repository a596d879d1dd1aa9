#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "klaad/common.hpp"

namespace klaad {

// Regularized incomplete beta I_x(a, b), evaluated with the modified
// Lentz continued fraction. Accurate to ~1e-14 for the df ranges used by
// the t-test; the test suite cross-checks against an independent series.
inline double regularized_incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw NumericError("incomplete beta: a, b must be positive");
    if (x < 0.0 || x > 1.0) throw NumericError("incomplete beta: x must lie in [0, 1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;

    // Use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) to keep the continued
    // fraction in its fast-converging region.
    if (x > (a + 1.0) / (a + b + 2.0))
        return 1.0 - regularized_incomplete_beta(b, a, 1.0 - x);

    const double log_front = a * std::log(x) + b * std::log1p(-x) + std::lgamma(a + b) -
                             std::lgamma(a) - std::lgamma(b);

    const double tiny = 1e-300;
    double c = 1.0;
    double d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double f = d;

    for (int m = 1; m <= 500; ++m) {
        const double md = static_cast<double>(m);
        // Even step.
        double num = md * (b - md) * x / ((a + 2.0 * md - 1.0) * (a + 2.0 * md));
        d = 1.0 + num * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        f *= d * c;
        // Odd step.
        num = -(a + md) * (a + b + md) * x / ((a + 2.0 * md) * (a + 2.0 * md + 1.0));
        d = 1.0 + num * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        f *= delta;
        if (std::fabs(delta - 1.0) < 1e-16) break;
    }
    return std::exp(log_front) * f / a;
}

// Two-sided p-value of Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
    if (df <= 0.0) throw NumericError("student t: df must be positive");
    if (!std::isfinite(t)) return 0.0;
    const double x = df / (df + t * t);
    return regularized_incomplete_beta(df / 2.0, 0.5, x);
}

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    bool degenerate_variance = false;
};

// Paired t-test: t = mean(d) / (sd(d)/sqrt(n)) with the n-1 sample
// standard deviation, two-sided p from the Student-t CDF.
inline TTestResult paired_t_test(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw InputError("paired_t_test: length mismatch");
    const size_t n = xs.size();
    if (n < 2) throw InputError("paired_t_test: need at least two pairs");

    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) mean += xs[i] - ys[i];
    mean /= static_cast<double>(n);

    double ss = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double dev = (xs[i] - ys[i]) - mean;
        ss += dev * dev;
    }
    const double var = ss / static_cast<double>(n - 1);

    TTestResult r;
    if (var == 0.0) {
        if (mean == 0.0) {
            r.t = 0.0;
            r.p = 1.0;
        } else {
            r.t = mean > 0.0 ? std::numeric_limits<double>::infinity()
                             : -std::numeric_limits<double>::infinity();
            r.p = 0.0;
            r.degenerate_variance = true;
        }
        return r;
    }
    r.t = mean / std::sqrt(var / static_cast<double>(n));
    r.p = student_t_two_sided_p(r.t, static_cast<double>(n - 1));
    return r;
}

}  // namespace klaad
