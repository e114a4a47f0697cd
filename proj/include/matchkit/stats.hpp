#pragma once

#include "matchkit/error.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

namespace matchkit::stats {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Upper tail, accurate far into the tail.
inline double normal_sf(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

inline double normal_quantile(double p) {
    return boost::math::quantile(boost::math::normal_distribution<double>(0.0, 1.0), p);
}

inline double two_sided_normal_p(double z) { return std::erfc(std::fabs(z) / std::sqrt(2.0)); }

inline double t_cdf(double t, double df) {
    if (!std::isfinite(t)) return t > 0 ? 1.0 : 0.0;
    return boost::math::cdf(boost::math::students_t_distribution<double>(df), t);
}

inline double t_sf(double t, double df) {
    if (!std::isfinite(t)) return t > 0 ? 0.0 : 1.0;
    return boost::math::cdf(boost::math::complement(boost::math::students_t_distribution<double>(df), t));
}

inline double t_quantile(double p, double df) {
    return boost::math::quantile(boost::math::students_t_distribution<double>(df), p);
}

inline double two_sided_t_p(double t, double df) {
    return std::min(1.0, 2.0 * t_sf(std::fabs(t), df));
}

inline double mean(std::span<const double> v) {
    if (v.empty()) return std::nan("");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample variance with n - 1 denominator.
inline double variance(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return ss / static_cast<double>(v.size() - 1);
}

// Linear-interpolation quantile (R type 7).
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw DegenerateError("quantile of empty sample");
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

// Ranks 1..n with ties replaced by their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

struct Moments {
    double mean = 0.0;
    double variance = 0.0;
};

// Count of exposed cases in a 2x2 table with fixed margins: `exposed` units
// exposed, `cases` cases, `total` units.
inline Moments hypergeometric_moments(std::int64_t exposed, std::int64_t cases, std::int64_t total) {
    const double n1 = static_cast<double>(exposed);
    const double n0 = static_cast<double>(total - exposed);
    const double m1 = static_cast<double>(cases);
    const double m0 = static_cast<double>(total - cases);
    const double n = static_cast<double>(total);
    Moments out;
    out.mean = n1 * m1 / n;
    out.variance = total > 1 ? n1 * n0 * m1 * m0 / (n * n * (n - 1.0)) : 0.0;
    return out;
}

// Support of the (extended) hypergeometric count.
inline std::pair<std::int64_t, std::int64_t> hypergeometric_support(std::int64_t exposed, std::int64_t cases,
                                                                   std::int64_t total) {
    return {std::max<std::int64_t>(0, exposed + cases - total), std::min(exposed, cases)};
}

// Probability mass of Fisher's noncentral (extended) hypergeometric
// distribution with odds ratio `odds`, over the support in increasing order.
inline std::vector<double> extended_hypergeometric_pmf(std::int64_t exposed, std::int64_t cases, std::int64_t total,
                                                       double odds) {
    const auto [lo, hi] = hypergeometric_support(exposed, cases, total);
    const auto lchoose = [](double n, double k) {
        return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
    };
    std::vector<double> logw;
    for (std::int64_t k = lo; k <= hi; ++k) {
        logw.push_back(lchoose(static_cast<double>(cases), static_cast<double>(k)) +
                       lchoose(static_cast<double>(total - cases), static_cast<double>(exposed - k)) +
                       static_cast<double>(k) * std::log(odds));
    }
    const double mx = *std::max_element(logw.begin(), logw.end());
    double z = 0.0;
    for (double& w : logw) {
        w = std::exp(w - mx);
        z += w;
    }
    for (double& w : logw) w /= z;
    return logw;
}

// Moments of the extended hypergeometric count. At odds 1 the closed-form
// hypergeometric moments are returned.
inline Moments extended_hypergeometric_moments(std::int64_t exposed, std::int64_t cases, std::int64_t total,
                                               double odds) {
    if (odds == 1.0) return hypergeometric_moments(exposed, cases, total);
    const auto [lo, hi] = hypergeometric_support(exposed, cases, total);
    const auto pmf = extended_hypergeometric_pmf(exposed, cases, total, odds);
    Moments out;
    for (std::int64_t k = lo; k <= hi; ++k) out.mean += static_cast<double>(k) * pmf[static_cast<std::size_t>(k - lo)];
    for (std::int64_t k = lo; k <= hi; ++k) {
        const double d = static_cast<double>(k) - out.mean;
        out.variance += d * d * pmf[static_cast<std::size_t>(k - lo)];
    }
    return out;
}

} // namespace matchkit::stats
