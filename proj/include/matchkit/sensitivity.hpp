#pragma once

// Sensitivity bounds for hidden bias of magnitude Gamma: the odds of
// treatment of two subjects in the same matched set differ by at most a
// factor Gamma.
//
// Continuous outcomes use an M-test on covariance-adjusted residuals with
// identity psi (no trimming). Each unit's score is the mean of its
// differences from the other set members, divided by the median absolute
// within-set difference pooled over all sets. The bound on the null
// expectation and variance of the statistic comes from the separable
// approximation: within a set, the worst case puts odds Gamma on the units
// with the largest scores.
//
// Binary outcomes use the Mantel-Haenszel statistic with each table's exposed
// case count bounded by the extended hypergeometric distribution.

#include "matchkit/cohort.hpp"
#include "matchkit/error.hpp"
#include "matchkit/format.hpp"
#include "matchkit/fullmatch.hpp"
#include "matchkit/glm.hpp"
#include "matchkit/inference.hpp"
#include "matchkit/stats.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace matchkit {

enum class Direction { greater, less };

inline std::string to_string(Direction d) { return d == Direction::greater ? "greater" : "less"; }

inline Direction parse_direction(const std::string& s) {
    if (s == "greater") return Direction::greater;
    if (s == "less") return Direction::less;
    throw ConfigError("direction must be 'greater' or 'less', got '" + s + "'");
}

struct GammaSpec {
    std::vector<double> grid{1.0, 1.25, 1.5, 2.0, 3.0};

    void validate() const {
        if (grid.empty() || grid.front() != 1.0) throw ConfigError("gamma grid must start at 1");
        for (std::size_t i = 1; i < grid.size(); ++i)
            if (!(grid[i] > grid[i - 1])) throw ConfigError("gamma grid must be strictly increasing");
    }
};

// One matched set's responses with the singleton unit first. For sets with
// several treated the single control is the singleton and the responses are
// negated, so a large first value always points to a harmful treatment in
// the "greater" direction.
struct ScoredSet {
    std::vector<double> responses;
};

struct ScoredSets {
    std::vector<ScoredSet> sets;
};

// Residuals of an OLS fit of the outcome on an intercept and the covariates
// over the matched subjects, grouped by set.
inline ScoredSets covariance_adjust(const CompositeOutcome& outcome, const std::vector<Matching>& matchings,
                                    const CovariateMatrix& cov) {
    std::vector<std::string> ids;
    for (const auto& m : matchings)
        for (const auto& s : m.sets) {
            ids.insert(ids.end(), s.treated_ids.begin(), s.treated_ids.end());
            ids.insert(ids.end(), s.control_ids.begin(), s.control_ids.end());
        }
    if (ids.empty()) throw DataError("covariance adjustment: matching is empty");
    DesignMatrix d;
    const auto n = static_cast<Eigen::Index>(ids.size());
    d.x.resize(n, cov.values.cols() + 1);
    d.x.col(0).setOnes();
    d.x.rightCols(cov.values.cols()) = cov.rows(ids);
    d.names = {"(intercept)"};
    d.names.insert(d.names.end(), cov.names.begin(), cov.names.end());
    d.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto v = outcome.value(ids[static_cast<std::size_t>(i)]);
        if (!v) throw DataError("outcome " + outcome.label + " missing for matched subject " + ids[static_cast<std::size_t>(i)]);
        d.y(i) = *v;
    }
    const GlmFit fit = fit_ols(d);
    std::map<std::string, double> resid;
    for (Eigen::Index i = 0; i < n; ++i) resid[ids[static_cast<std::size_t>(i)]] = fit.residuals(i);

    ScoredSets out;
    for (const auto& m : matchings)
        for (const auto& s : m.sets) {
            ScoredSet ss;
            if (s.treated_ids.size() == 1) {
                ss.responses.push_back(resid.at(s.treated_ids[0]));
                for (const auto& id : s.control_ids) ss.responses.push_back(resid.at(id));
            } else {
                ss.responses.push_back(-resid.at(s.control_ids[0]));
                for (const auto& id : s.treated_ids) ss.responses.push_back(-resid.at(id));
            }
            out.sets.push_back(std::move(ss));
        }
    return out;
}

// Per-unit scores with identity psi, oriented so that large values of the
// first unit are evidence in the tested direction.
inline std::vector<std::vector<double>> m_scores(const ScoredSets& sets, Direction dir) {
    if (sets.sets.size() < 2) throw DataError("M-test needs at least two matched sets");
    std::vector<double> diffs;
    for (const auto& s : sets.sets) {
        if (s.responses.size() < 2) throw DataError("M-test: every matched set needs two or more members");
        for (std::size_t j = 0; j < s.responses.size(); ++j)
            for (std::size_t k = 0; k < s.responses.size(); ++k)
                if (j != k) diffs.push_back(std::fabs(s.responses[j] - s.responses[k]));
    }
    const double h = stats::median(diffs);
    if (!(h > 0.0)) throw DegenerateError("M-test: median absolute within-set difference is zero");
    const double sign = dir == Direction::greater ? 1.0 : -1.0;
    std::vector<std::vector<double>> q;
    for (const auto& s : sets.sets) {
        const auto m = static_cast<double>(s.responses.size());
        double sum = 0.0;
        for (double y : s.responses) sum += y;
        std::vector<double> row;
        for (double y : s.responses) row.push_back(sign * (m * y - sum) / ((m - 1.0) * h));
        q.push_back(std::move(row));
    }
    return q;
}

struct DeviateParts {
    double statistic = 0.0;
    double expectation = 0.0;
    double variance = 0.0;

    double deviate() const { return (statistic - expectation) / std::sqrt(variance); }
};

// Worst-case (largest) expectation of the first unit's score among
// assignment distributions with odds ratio at most gamma, and among ties
// the largest variance.
inline stats::Moments separable_bound(std::vector<double> q, double gamma) {
    std::sort(q.begin(), q.end());
    const auto n = q.size();
    stats::Moments best{-INFINITY, 0.0};
    for (std::size_t a = 1; a < n; ++a) {
        const double denom = static_cast<double>(a) + gamma * static_cast<double>(n - a);
        double mu = 0.0, second = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double p = (j < a ? 1.0 : gamma) / denom;
            mu += p * q[j];
            second += p * q[j] * q[j];
        }
        const double var = std::max(0.0, second - mu * mu);
        if (mu > best.mean + 1e-12 * (1.0 + std::fabs(mu)) ||
            (std::fabs(mu - best.mean) <= 1e-12 * (1.0 + std::fabs(mu)) && var > best.variance))
            best = {mu, var};
    }
    return best;
}

inline DeviateParts m_test_parts(const std::vector<std::vector<double>>& scores, double gamma) {
    if (!(gamma >= 1.0)) throw ConfigError("gamma must be at least 1");
    DeviateParts d;
    for (const auto& q : scores) {
        d.statistic += q[0];
        const auto b = separable_bound(q, gamma);
        d.expectation += b.mean;
        d.variance += b.variance;
    }
    if (!(d.variance > 0.0)) throw DegenerateError("M-test: null variance is zero");
    return d;
}

// Normal-approximation p-value of the M-statistic under random assignment
// within sets (no hidden bias), computed directly from the uniform
// distribution of the treated position.
inline double m_test_randomization_p(const ScoredSets& sets, Direction dir) {
    const auto scores = m_scores(sets, dir);
    double t = 0.0, mean = 0.0, var = 0.0;
    for (const auto& q : scores) {
        const auto n = static_cast<double>(q.size());
        double s = 0.0, ss = 0.0;
        for (double v : q) {
            s += v;
            ss += v * v;
        }
        t += q[0];
        mean += s / n;
        var += ss / n - (s / n) * (s / n);
    }
    return stats::normal_sf((t - mean) / std::sqrt(var));
}

// Upper-bound p at one gamma. Above gamma = 1, once the worst-case
// expectation reaches the observed statistic the normal approximation no
// longer orders the configurations, and the bound is reported as 1.
inline double m_test_bound_at(const std::vector<std::vector<double>>& scores, double gamma) {
    const auto parts = m_test_parts(scores, gamma);
    if (gamma > 1.0 && parts.statistic <= parts.expectation) return 1.0;
    return stats::normal_sf(parts.deviate());
}

inline std::vector<double> m_test_upper_bound(const ScoredSets& sets, const std::vector<double>& gammas, Direction dir) {
    const auto scores = m_scores(sets, dir);
    std::vector<double> p;
    for (double g : gammas) p.push_back(m_test_bound_at(scores, g));
    return p;
}

// Upper bound on the one-sided MH p-value: each table's exposed case count
// follows the extended hypergeometric distribution with odds gamma (or
// 1/gamma for the "less" direction).
inline double mh_upper_bound(const StratifiedTables& st, double gamma, Direction dir = Direction::greater) {
    if (!(gamma >= 1.0)) throw ConfigError("gamma must be at least 1");
    double obs = 0.0, mean = 0.0, var = 0.0;
    std::size_t informative = 0;
    const double odds = dir == Direction::greater ? gamma : 1.0 / gamma;
    for (const auto& t : st.tables) {
        if (!t.informative()) continue;
        const auto m = stats::extended_hypergeometric_moments(t.exposed(), t.cases(), t.total(), odds);
        obs += static_cast<double>(t.a);
        mean += m.mean;
        var += m.variance;
        ++informative;
    }
    if (informative == 0) throw DegenerateError("Mantel-Haenszel bound: no informative tables");
    const double z = (obs - mean) / std::sqrt(var);
    return dir == Direction::greater ? stats::normal_sf(z) : stats::normal_cdf(z);
}

inline std::vector<double> mh_upper_bound(const StratifiedTables& st, const std::vector<double>& gammas,
                                          Direction dir = Direction::greater) {
    std::vector<double> p;
    for (double g : gammas) p.push_back(mh_upper_bound(st, g, dir));
    return p;
}

struct GammaStar {
    std::optional<double> value;  // two decimals
    bool sensitive_at_one = false;
    bool exceeds_cap = false;
};

inline constexpr double kGammaCap = 20.0;
inline constexpr double kGammaResolution = 0.01;

// Largest gamma in [1, cap] whose upper-bound p stays at or below `level`,
// by bisection. Every evaluation is checked against the monotonicity the
// bound must have.
inline GammaStar find_gamma_star(const std::function<double(double)>& bound, double level) {
    std::map<double, double> seen;
    const auto eval = [&](double g) {
        const double p = bound(g);
        seen[g] = p;
        double prev = -INFINITY;
        for (const auto& [gg, pp] : seen) {
            if (pp < prev - 1e-12) throw NumericalError("sensitivity bound is not monotone in gamma near " + format_fixed(gg, 2));
            prev = std::max(prev, pp);
        }
        return p;
    };
    GammaStar gs;
    if (eval(1.0) > level) {
        gs.sensitive_at_one = true;
        return gs;
    }
    if (eval(kGammaCap) <= level) {
        gs.exceeds_cap = true;
        gs.value = kGammaCap;
        return gs;
    }
    double lo = 1.0, hi = kGammaCap;
    while (hi - lo > kGammaResolution) {
        const double mid = 0.5 * (lo + hi);
        (eval(mid) <= level ? lo : hi) = mid;
    }
    gs.value = std::round(lo * 100.0) / 100.0;
    return gs;
}

struct SensitivityResult {
    std::string label;
    std::string method;
    Direction direction = Direction::greater;
    double level = 0.025;
    std::vector<double> grid;
    std::vector<double> p_upper;
    GammaStar gamma_star;
};

inline void check_monotone(const SensitivityResult& r) {
    for (std::size_t i = 1; i < r.p_upper.size(); ++i)
        if (r.p_upper[i] < r.p_upper[i - 1] - 1e-12)
            throw NumericalError("sensitivity bound for " + r.label + " decreases along the gamma grid");
}

inline SensitivityResult m_test_sensitivity(const ScoredSets& sets, const GammaSpec& spec, Direction dir, double level,
                                            const std::string& label) {
    spec.validate();
    SensitivityResult r;
    r.label = label;
    r.method = "M-test (identity psi) on covariance-adjusted residuals, separable approximation";
    r.direction = dir;
    r.level = level;
    r.grid = spec.grid;
    r.p_upper = m_test_upper_bound(sets, spec.grid, dir);
    check_monotone(r);
    const auto scores = m_scores(sets, dir);
    r.gamma_star = find_gamma_star([&](double g) { return m_test_bound_at(scores, g); }, level);
    return r;
}

inline SensitivityResult mh_sensitivity(const StratifiedTables& st, const GammaSpec& spec, Direction dir, double level,
                                        const std::string& label) {
    spec.validate();
    SensitivityResult r;
    r.label = label;
    r.method = "Mantel-Haenszel, extended hypergeometric bound";
    r.direction = dir;
    r.level = level;
    r.grid = spec.grid;
    r.p_upper = mh_upper_bound(st, spec.grid, dir);
    check_monotone(r);
    r.gamma_star = find_gamma_star([&](double g) { return mh_upper_bound(st, g, dir); }, level);
    return r;
}

inline nlohmann::ordered_json to_json(const SensitivityResult& r) {
    nlohmann::ordered_json j;
    j["label"] = r.label;
    j["method"] = r.method;
    j["direction"] = to_string(r.direction);
    j["level"] = r.level;
    auto pts = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < r.grid.size(); ++i) pts.push_back({{"gamma", r.grid[i]}, {"p_upper", r.p_upper[i]}});
    j["grid"] = pts;
    if (r.gamma_star.value) j["gamma_star"] = *r.gamma_star.value;
    else j["gamma_star"] = nullptr;
    j["sensitive_at_gamma_1"] = r.gamma_star.sensitive_at_one;
    j["exceeds_search_cap"] = r.gamma_star.exceeds_cap;
    return j;
}

inline std::string render_sensitivity_table(const std::vector<SensitivityResult>& results) {
    std::ostringstream os;
    os << "outcome";
    if (!results.empty())
        for (double g : results.front().grid) os << "\tG=" << format_fixed(g, 2);
    os << "\tgamma_star\n";
    for (const auto& r : results) {
        os << r.label;
        for (double p : r.p_upper) os << '\t' << format_fixed(p, 4);
        os << '\t';
        if (r.gamma_star.sensitive_at_one) os << "sensitive at 1";
        else if (r.gamma_star.exceeds_cap) os << ">" << format_fixed(kGammaCap, 2);
        else os << format_fixed(*r.gamma_star.value, 2);
        os << '\n';
    }
    return os.str();
}

} // namespace matchkit
