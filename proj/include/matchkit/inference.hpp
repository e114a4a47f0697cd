#pragma once

// Outcome construction and the matched-set tests: covariance-adjusted
// regression with set fixed effects, Mantel-Haenszel, two one-sided
// equivalence tests, dose regression and attrition checks.

#include "matchkit/cohort.hpp"
#include "matchkit/error.hpp"
#include "matchkit/fullmatch.hpp"
#include "matchkit/glm.hpp"
#include "matchkit/stats.hpp"

#include <json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace matchkit {

// Per-subject outcome; subjects without a value are absent.
struct CompositeOutcome {
    std::string label;
    std::vector<std::string> components;
    std::unordered_map<std::string, double> values;

    std::optional<double> value(const std::string& id) const {
        const auto it = values.find(id);
        if (it == values.end()) return std::nullopt;
        return it->second;
    }
};

struct PrimaryOutcomes {
    CompositeOutcome cognitive;
    CompositeOutcome depression;
};

// z-scores of one outcome column over the subjects with a value.
inline std::unordered_map<std::string, double> z_scores(const std::vector<SubjectRecord>& eligible, const std::string& tag,
                                                        const std::string& wave) {
    std::vector<double> v;
    for (const auto& r : eligible)
        if (auto x = r.outcome(tag, wave)) v.push_back(*x);
    if (v.size() < 2) throw DegenerateError("outcome " + tag + " at wave " + wave + " has fewer than two values");
    const double m = stats::mean(v);
    const double sd = std::sqrt(stats::variance(v));
    if (!(sd > 0.0)) throw DegenerateError("outcome " + tag + " at wave " + wave + " has zero variance");
    std::unordered_map<std::string, double> z;
    for (const auto& r : eligible)
        if (auto x = r.outcome(tag, wave)) z.emplace(r.id, (*x - m) / sd);
    return z;
}

// Cognitive: mean of the available LF and DWR z-scores. Depression: CES-D
// z-score (higher means more symptoms).
inline PrimaryOutcomes build_primary_outcomes(const std::vector<SubjectRecord>& eligible, const std::string& wave) {
    const auto lf = z_scores(eligible, kLF, wave);
    const auto dwr = z_scores(eligible, kDWR, wave);
    const auto cesd = z_scores(eligible, kCESD, wave);
    PrimaryOutcomes out;
    out.cognitive.label = "cognitive";
    out.cognitive.components = {kLF, kDWR};
    out.depression.label = "depression";
    out.depression.components = {kCESD};
    for (const auto& r : eligible) {
        const auto a = lf.find(r.id);
        const auto b = dwr.find(r.id);
        if (a != lf.end() && b != dwr.end()) out.cognitive.values.emplace(r.id, (a->second + b->second) / 2.0);
        else if (a != lf.end()) out.cognitive.values.emplace(r.id, a->second);
        else if (b != dwr.end()) out.cognitive.values.emplace(r.id, b->second);
    }
    out.depression.values = cesd;
    return out;
}

// Whether a stratum's subjects all carry the given primary outcome.
inline bool pattern_supports(const AvailabilityPattern& p, const CompositeOutcome& outcome) {
    bool any = false;
    for (const auto& c : outcome.components) {
        if (c == kLF) any = any || p.has(AvailabilityPattern::lf);
        else if (c == kDWR) any = any || p.has(AvailabilityPattern::dwr);
        else if (c == kCESD) any = any || p.has(AvailabilityPattern::cesd);
    }
    return any;
}

inline std::vector<Matching> matchings_for(const std::vector<Matching>& all, const CompositeOutcome& outcome) {
    std::vector<Matching> out;
    for (const auto& m : all)
        if (pattern_supports(m.pattern, outcome)) out.push_back(m);
    return out;
}

struct TestResult {
    std::string label;
    std::string method;
    double estimate = 0.0;
    double std_error = std::numeric_limits<double>::quiet_NaN();
    double ci_low = 0.0;
    double ci_high = 0.0;
    double ci_level = 0.95;
    double p_value = 1.0;
    double statistic = 0.0;
    double df = std::numeric_limits<double>::infinity();  // infinite: normal reference
    std::size_t n_treated = 0;
    std::size_t n_control = 0;
    std::size_t n_sets = 0;
    std::vector<std::string> warnings;
};

inline nlohmann::ordered_json to_json(const TestResult& t) {
    nlohmann::ordered_json j;
    j["label"] = t.label;
    j["method"] = t.method;
    j["estimate"] = t.estimate;
    j["std_error"] = t.std_error;
    j["ci_low"] = t.ci_low;
    j["ci_high"] = t.ci_high;
    j["ci_level"] = t.ci_level;
    j["p_value"] = t.p_value;
    j["statistic"] = t.statistic;
    if (std::isfinite(t.df)) j["df"] = t.df;
    else j["df"] = "normal";
    j["n_treated"] = t.n_treated;
    j["n_control"] = t.n_control;
    j["n_sets"] = t.n_sets;
    j["warnings"] = t.warnings;
    return j;
}

namespace detail {

inline double reference_quantile(double p, double df) {
    return std::isfinite(df) ? stats::t_quantile(p, df) : stats::normal_quantile(p);
}

inline double reference_cdf(double x, double df) { return std::isfinite(df) ? stats::t_cdf(x, df) : stats::normal_cdf(x); }

// OLS of the outcome on set fixed effects, covariates and an exposure
// column; reports the exposure coefficient.
inline TestResult set_regression(const CompositeOutcome& outcome, const std::vector<Matching>& matchings,
                                 const CovariateMatrix& cov, const std::function<double(const std::string&, bool)>& exposure,
                                 const std::string& exposure_name, double ci_level, const std::string& label) {
    if (!(ci_level > 0.0 && ci_level < 1.0)) throw ConfigError("confidence level must lie in (0, 1)");
    std::vector<std::string> ids;
    std::vector<int> strata;
    std::vector<double> expo;
    TestResult res;
    res.label = label;
    for (const auto& m : matchings)
        for (const auto& s : m.sets) {
            const int set_index = static_cast<int>(res.n_sets++);
            const auto add = [&](const std::string& id, bool treated) {
                if (!outcome.value(id))
                    throw DataError("outcome " + outcome.label + " missing for matched subject " + id);
                ids.push_back(id);
                strata.push_back(set_index);
                expo.push_back(exposure(id, treated));
            };
            for (const auto& id : s.treated_ids) add(id, true);
            for (const auto& id : s.control_ids) add(id, false);
            res.n_treated += s.treated_ids.size();
            res.n_control += s.control_ids.size();
        }
    if (res.n_sets == 0) throw DataError("matched test " + label + ": matching is empty");

    DesignMatrix d;
    const auto n = static_cast<Eigen::Index>(ids.size());
    d.x.resize(n, cov.values.cols() + 1);
    d.x.leftCols(cov.values.cols()) = cov.rows(ids);
    for (Eigen::Index i = 0; i < n; ++i) d.x(i, cov.values.cols()) = expo[static_cast<std::size_t>(i)];
    d.names = cov.names;
    d.names.push_back(exposure_name);
    d.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) d.y(i) = *outcome.value(ids[static_cast<std::size_t>(i)]);
    d.strata = strata;

    OlsOptions opt;
    opt.absorb_strata = true;
    opt.required = {exposure_name};
    const GlmFit fit = fit_ols(d, opt);
    res.method = "OLS with matched-set fixed effects";
    res.estimate = fit.coefficient(exposure_name);
    res.std_error = fit.std_error(exposure_name);
    res.p_value = fit.p_value(exposure_name);
    res.statistic = fit.statistics(fit.require(exposure_name));
    res.df = fit.df_residual;
    res.ci_level = ci_level;
    const double q = reference_quantile(0.5 + ci_level / 2.0, res.df);
    res.ci_low = res.estimate - q * res.std_error;
    res.ci_high = res.estimate + q * res.std_error;
    res.warnings = fit.warnings;
    return res;
}

} // namespace detail

// Treatment indicator is 1 for the treated side of every set.
inline TestResult matched_adjusted_test(const CompositeOutcome& outcome, const std::vector<Matching>& matchings,
                                        const CovariateMatrix& cov, double ci_level, const std::string& label) {
    return detail::set_regression(
        outcome, matchings, cov, [](const std::string&, bool treated) { return treated ? 1.0 : 0.0; }, "treatment",
        ci_level, label);
}

// Exposure is years played for treated subjects and 0 for controls.
inline TestResult dose_scaled_test(const CompositeOutcome& outcome, const std::vector<Matching>& matchings,
                                   const CovariateMatrix& cov, const std::unordered_map<std::string, int>& dose,
                                   double ci_level, const std::string& label) {
    auto res = detail::set_regression(
        outcome, matchings, cov,
        [&](const std::string& id, bool treated) {
            if (!treated) return 0.0;
            const auto it = dose.find(id);
            if (it == dose.end() || it->second < 1)
                throw DataError("treated subject " + id + " has no positive dose (football years)");
            return static_cast<double>(it->second);
        },
        "dose", ci_level, label);
    res.method = "OLS with matched-set fixed effects, exposure = years played";
    return res;
}

// Rows: exposed (treated side) and unexposed; columns: case and non-case.
struct Table2x2 {
    std::int64_t a = 0;  // exposed cases
    std::int64_t b = 0;  // exposed non-cases
    std::int64_t c = 0;  // unexposed cases
    std::int64_t d = 0;  // unexposed non-cases

    std::int64_t total() const { return a + b + c + d; }
    std::int64_t exposed() const { return a + b; }
    std::int64_t cases() const { return a + c; }
    bool informative() const { return exposed() > 0 && c + d > 0 && cases() > 0 && b + d > 0; }
};

struct StratifiedTables {
    std::vector<Table2x2> tables;
};

// One table per matched set over the members with a recorded binary value.
inline StratifiedTables tables_from_matching(const std::vector<Matching>& matchings,
                                             const std::unordered_map<std::string, bool>& outcome) {
    StratifiedTables st;
    for (const auto& m : matchings)
        for (const auto& s : m.sets) {
            Table2x2 t;
            for (const auto& id : s.treated_ids)
                if (auto it = outcome.find(id); it != outcome.end()) (it->second ? t.a : t.b) += 1;
            for (const auto& id : s.control_ids)
                if (auto it = outcome.find(id); it != outcome.end()) (it->second ? t.c : t.d) += 1;
            st.tables.push_back(t);
        }
    return st;
}

struct MantelHaenszelSums {
    double observed = 0.0;
    double expected = 0.0;
    double variance = 0.0;
    std::size_t informative = 0;
};

inline MantelHaenszelSums mantel_haenszel_sums(const StratifiedTables& st) {
    MantelHaenszelSums s;
    for (const auto& t : st.tables) {
        if (!t.informative()) continue;
        const auto m = stats::hypergeometric_moments(t.exposed(), t.cases(), t.total());
        s.observed += static_cast<double>(t.a);
        s.expected += m.mean;
        s.variance += m.variance;
        ++s.informative;
    }
    if (s.informative == 0) throw DegenerateError("Mantel-Haenszel test: no informative tables");
    return s;
}

// Uncorrected MH test; estimate is the common odds ratio with a
// Robins-Breslow-Greenland interval.
inline TestResult mantel_haenszel_test(const StratifiedTables& st, double ci_level = 0.95, const std::string& label = "") {
    const auto s = mantel_haenszel_sums(st);
    TestResult res;
    res.label = label;
    res.method = "Mantel-Haenszel";
    res.ci_level = ci_level;
    const double z = (s.observed - s.expected) / std::sqrt(s.variance);
    res.statistic = z;
    res.p_value = stats::two_sided_normal_p(z);

    double r = 0, sm = 0, pr = 0, ps_qr = 0, qs = 0;
    for (const auto& t : st.tables) {
        res.n_sets += 1;
        res.n_treated += static_cast<std::size_t>(t.exposed());
        res.n_control += static_cast<std::size_t>(t.c + t.d);
        if (!t.informative()) continue;
        const double n = static_cast<double>(t.total());
        const double ri = static_cast<double>(t.a * t.d) / n;
        const double si = static_cast<double>(t.b * t.c) / n;
        const double pi = static_cast<double>(t.a + t.d) / n;
        const double qi = static_cast<double>(t.b + t.c) / n;
        r += ri;
        sm += si;
        pr += pi * ri;
        ps_qr += pi * si + qi * ri;
        qs += qi * si;
    }
    if (r > 0 && sm > 0) {
        res.estimate = r / sm;
        const double var_log = pr / (2 * r * r) + ps_qr / (2 * r * sm) + qs / (2 * sm * sm);
        res.std_error = std::sqrt(var_log);
        const double q = stats::normal_quantile(0.5 + ci_level / 2.0);
        res.ci_low = std::exp(std::log(res.estimate) - q * res.std_error);
        res.ci_high = std::exp(std::log(res.estimate) + q * res.std_error);
    } else {
        res.estimate = r > 0 ? std::numeric_limits<double>::infinity() : 0.0;
        res.ci_low = 0.0;
        res.ci_high = std::numeric_limits<double>::infinity();
        res.warnings.push_back("common odds ratio is on the boundary; interval unbounded");
    }
    return res;
}

// One-sided MH p-value for an excess of exposed cases.
inline double mantel_haenszel_one_sided(const StratifiedTables& st) {
    const auto s = mantel_haenszel_sums(st);
    return stats::normal_sf((s.observed - s.expected) / std::sqrt(s.variance));
}

// Two one-sided tests of |effect| < margin on a fitted comparison; p is the
// larger one-sided p-value, so rejection concludes equivalence.
inline TestResult equivalence_test(const TestResult& base, double margin) {
    if (!(margin > 0.0)) throw ConfigError("equivalence margin must be positive");
    if (!(base.std_error > 0.0)) throw DegenerateError("equivalence test: standard error is not positive");
    TestResult res = base;
    res.method = "two one-sided tests (equivalence within +/-margin)";
    const double t_low = (base.estimate + margin) / base.std_error;
    const double t_high = (base.estimate - margin) / base.std_error;
    const double p_low = 1.0 - detail::reference_cdf(t_low, base.df);
    const double p_high = detail::reference_cdf(t_high, base.df);
    res.p_value = std::max(p_low, p_high);
    res.statistic = p_low >= p_high ? t_low : t_high;
    return res;
}

struct AttritionResult {
    std::string component;
    std::size_t n = 0;
    std::size_t n_available = 0;
    double football_coefficient = 0.0;
    double football_std_error = 0.0;
    double football_p_value = 1.0;
    bool flagged = false;
    std::vector<std::string> warnings;
};

// Logistic regression of one component's availability on the baseline
// covariates and football status, over all eligible subjects.
inline AttritionResult attrition_component(const std::vector<SubjectRecord>& eligible, const CovariateMatrix& cov,
                                           const std::string& wave, const std::string& tag, double flag_level = 0.05) {
    DesignMatrix d;
    const auto n = static_cast<Eigen::Index>(eligible.size());
    d.x.resize(n, cov.values.cols() + 2);
    d.y.resize(n);
    d.names = {"(intercept)"};
    d.names.insert(d.names.end(), cov.names.begin(), cov.names.end());
    d.names.push_back("football");
    AttritionResult a;
    a.component = tag;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = eligible[static_cast<std::size_t>(i)];
        d.x(i, 0) = 1.0;
        d.x.row(i).segment(1, cov.values.cols()) = cov.values.row(cov.row(r.id));
        d.x(i, cov.values.cols() + 1) = r.plays(Sport::football) ? 1.0 : 0.0;
        d.y(i) = r.outcome(tag, wave) ? 1.0 : 0.0;
        a.n_available += r.outcome(tag, wave).has_value();
    }
    a.n = static_cast<std::size_t>(n);
    const GlmFit fit = fit_logistic(d);
    if (!fit.index("football")) throw NumericalError("attrition model for " + tag + ": football indicator is collinear");
    a.football_coefficient = fit.coefficient("football");
    a.football_std_error = fit.std_error("football");
    a.football_p_value = fit.p_value("football");
    a.flagged = a.football_p_value < flag_level;
    a.warnings = fit.warnings;
    return a;
}

inline std::vector<AttritionResult> attrition_check(const std::vector<SubjectRecord>& eligible, const CovariateMatrix& cov,
                                                    const std::string& wave, double flag_level = 0.05) {
    std::vector<AttritionResult> out;
    for (const auto& tag : {kLF, kDWR, kCESD}) out.push_back(attrition_component(eligible, cov, wave, tag, flag_level));
    return out;
}

} // namespace matchkit
