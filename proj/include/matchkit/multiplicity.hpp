#pragma once

// Holm and Benjamini-Hochberg adjustments and the ordered (fixed-sequence)
// testing procedure for one outcome:
//
//   stage 1   treated vs all controls
//   stage 2   treated vs non-sport (2a) and vs other-sport (2b), both needed
//   stage 3   non-sport vs other-sport equivalence
//
// A stage is decided only if every earlier stage rejected. Estimates and
// intervals are reported for all stages regardless.

#include "matchkit/error.hpp"
#include "matchkit/format.hpp"
#include "matchkit/inference.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace matchkit {

namespace detail {

inline void check_p_values(const std::vector<double>& p) {
    for (double v : p)
        if (!(v >= 0.0 && v <= 1.0)) throw DataError("p-values must lie in [0, 1]");
}

inline std::vector<std::size_t> ascending_order(const std::vector<double>& p) {
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    return idx;
}

} // namespace detail

// Level at which each hypothesis is tested by Holm's step-down procedure.
// Hypotheses after the first non-rejection keep the level that failed.
inline std::vector<double> holm_levels(const std::vector<double>& p, double alpha) {
    detail::check_p_values(p);
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    const auto order = detail::ascending_order(p);
    const std::size_t m = p.size();
    std::vector<double> level(m, 0.0);
    bool stopped = false;
    double last = alpha / static_cast<double>(m == 0 ? 1 : m);
    for (std::size_t k = 0; k < m; ++k) {
        const std::size_t i = order[k];
        if (!stopped) last = alpha / static_cast<double>(m - k);
        level[i] = last;
        if (p[i] > last) stopped = true;
    }
    return level;
}

inline std::vector<bool> holm_bonferroni(const std::vector<double>& p, double alpha) {
    const auto order = detail::ascending_order(p);
    const auto level = holm_levels(p, alpha);
    std::vector<bool> reject(p.size(), false);
    for (std::size_t i : order) {
        if (p[i] > level[i]) break;
        reject[i] = true;
    }
    return reject;
}

inline std::vector<bool> benjamini_hochberg(const std::vector<double>& p, double q) {
    detail::check_p_values(p);
    if (!(q > 0.0 && q < 1.0)) throw ConfigError("false discovery rate must lie in (0, 1)");
    const auto order = detail::ascending_order(p);
    const std::size_t m = p.size();
    std::size_t k_max = 0;
    for (std::size_t k = 1; k <= m; ++k)
        if (p[order[k - 1]] <= static_cast<double>(k) * q / static_cast<double>(m)) k_max = k;
    std::vector<bool> reject(m, false);
    for (std::size_t k = 0; k < k_max; ++k) reject[order[k]] = true;
    return reject;
}

struct StageResult {
    TestResult result;
    bool decided = false;
    bool rejected = false;
};

struct OrderedTestReport {
    std::string outcome;
    double alpha_used = 0.0;
    StageResult stage1;   // vs all controls
    StageResult stage2a;  // vs non-sport
    StageResult stage2b;  // vs other-sport
    StageResult stage3;   // non-sport vs other-sport equivalence
    std::string stop_stage;  // "1", "2", "3" or "completed"
    double equivalence_margin = 0.0;

    std::vector<const StageResult*> stages() const { return {&stage1, &stage2a, &stage2b, &stage3}; }
};

inline OrderedTestReport ordered_procedure(const std::string& outcome, const TestResult& s1, const TestResult& s2a,
                                           const TestResult& s2b, const TestResult& s3, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    OrderedTestReport r;
    r.outcome = outcome;
    r.alpha_used = alpha;
    r.stage1 = {s1, true, s1.p_value <= alpha};
    r.stage2a = {s2a, false, false};
    r.stage2b = {s2b, false, false};
    r.stage3 = {s3, false, false};
    if (!r.stage1.rejected) {
        r.stop_stage = "1";
        return r;
    }
    r.stage2a.decided = r.stage2b.decided = true;
    r.stage2a.rejected = s2a.p_value <= alpha;
    r.stage2b.rejected = s2b.p_value <= alpha;
    if (!(r.stage2a.rejected && r.stage2b.rejected)) {
        r.stop_stage = "2";
        return r;
    }
    r.stage3.decided = true;
    r.stage3.rejected = s3.p_value <= alpha;
    r.stop_stage = r.stage3.rejected ? "completed" : "3";
    return r;
}

inline nlohmann::ordered_json to_json(const StageResult& s) {
    nlohmann::ordered_json j = to_json(s.result);
    j["decided"] = s.decided;
    j["rejected"] = s.rejected;
    return j;
}

inline nlohmann::ordered_json to_json(const OrderedTestReport& r) {
    nlohmann::ordered_json j;
    j["outcome"] = r.outcome;
    j["alpha_used"] = r.alpha_used;
    j["stop_stage"] = r.stop_stage;
    j["equivalence_margin"] = r.equivalence_margin;
    j["stage1_vs_all_controls"] = to_json(r.stage1);
    j["stage2a_vs_nonsport"] = to_json(r.stage2a);
    j["stage2b_vs_othersport"] = to_json(r.stage2b);
    j["stage3_equivalence"] = to_json(r.stage3);
    return j;
}

struct SecondaryResult {
    TestResult result;
    bool bh_reject = false;
};

// Benjamini-Hochberg over the secondary results, in place.
inline void apply_benjamini_hochberg(std::vector<SecondaryResult>& results, double q) {
    std::vector<double> p;
    for (const auto& r : results) p.push_back(r.result.p_value);
    const auto rej = benjamini_hochberg(p, q);
    for (std::size_t i = 0; i < results.size(); ++i) results[i].bh_reject = rej[i];
}

namespace detail {

inline std::string interval_cell(const TestResult& t, bool star) {
    return format_fixed(t.estimate, 2) + " (" + format_fixed(t.ci_low, 2) + ", " + format_fixed(t.ci_high, 2) + ")" +
           (star ? "*" : "");
}

inline std::string pad(const std::string& s, std::size_t width) {
    return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

inline std::string render_grid(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width;
    for (const auto& r : rows)
        for (std::size_t c = 0; c < r.size(); ++c) {
            if (width.size() <= c) width.push_back(0);
            width[c] = std::max(width[c], r[c].size());
        }
    std::ostringstream os;
    for (const auto& r : rows) {
        std::string line;
        for (std::size_t c = 0; c < r.size(); ++c) line += c + 1 < r.size() ? pad(r[c], width[c] + 2) : r[c];
        os << line << '\n';
    }
    return os.str();
}

} // namespace detail

// Outcomes as rows, the four comparisons as columns; a star marks a decided,
// rejected stage.
inline std::string render_results_table(const std::vector<OrderedTestReport>& reports,
                                        const std::vector<SecondaryResult>& secondary = {}) {
    std::vector<std::vector<std::string>> grid{
        {"Outcome", "Football vs all controls", "Football vs non-sport", "Football vs other-sport",
         "Non-sport vs other-sport"}};
    for (const auto& r : reports) {
        std::vector<std::string> row{r.outcome};
        for (const auto* s : r.stages()) row.push_back(detail::interval_cell(s->result, s->decided && s->rejected));
        grid.push_back(row);
    }
    std::ostringstream os;
    os << detail::render_grid(grid);
    if (!reports.empty()) {
        const auto level = reports.front().stage1.result.ci_level;
        os << "Estimate (marginal " << format_fixed(level * 100.0, 1)
           << "% CI); * rejected within the ordered procedure\n";
    }
    if (!secondary.empty()) {
        std::vector<std::vector<std::string>> sec{{"Secondary outcome", "Estimate (CI)", "p", "BH"}};
        for (const auto& s : secondary)
            sec.push_back({s.result.label, detail::interval_cell(s.result, false), format_fixed(s.result.p_value, 4),
                           s.bh_reject ? "significant" : "-"});
        os << '\n' << detail::render_grid(sec);
    }
    return os.str();
}

} // namespace matchkit
