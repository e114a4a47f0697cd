#pragma once

// Standardized differences before and after matching, and Love plots.
//
// Both values share the pre-match denominator sqrt((s_T^2 + s_C^2) / 2).
// After matching, each treated subject has weight 1 and each control in a set
// with t treated and c controls has weight t / c.

#include "matchkit/cohort.hpp"
#include "matchkit/error.hpp"
#include "matchkit/format.hpp"
#include "matchkit/fullmatch.hpp"
#include "matchkit/stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace matchkit {

struct BalanceRow {
    std::string name;
    double before = 0.0;
    std::optional<double> after;
    // Pooled standard deviation is zero while the means differ.
    bool degenerate = false;
};

inline constexpr const char* kBalanceWeighting =
    "treated weight 1; control weight = treated count / control count within each matched set; "
    "denominator is the pooled pre-match standard deviation";

namespace detail {

struct WeightedMoments {
    double sum_w = 0.0;
    double sum_wx = 0.0;
    double mean() const { return sum_wx / sum_w; }
};

inline double standardized(double mean_t, double mean_c, double pooled_sd, bool& degenerate) {
    const double diff = mean_t - mean_c;
    if (pooled_sd > 0.0) return diff / pooled_sd;
    if (std::fabs(diff) > 0.0) degenerate = true;
    return 0.0;
}

} // namespace detail

inline std::vector<BalanceRow> standardized_differences(const CovariateMatrix& cov, const std::vector<std::string>& treated,
                                                        const std::vector<std::string>& control,
                                                        const std::vector<Matching>* matchings = nullptr) {
    if (treated.empty() || control.empty()) throw DataError("standardized differences need both groups nonempty");
    const Eigen::MatrixXd xt = cov.rows(treated);
    const Eigen::MatrixXd xc = cov.rows(control);

    std::vector<std::pair<Eigen::Index, double>> wt, wc;  // (row, weight)
    if (matchings) {
        for (const auto& m : *matchings)
            for (const auto& s : m.sets) {
                const double w = static_cast<double>(s.treated_ids.size()) / static_cast<double>(s.control_ids.size());
                for (const auto& id : s.treated_ids) wt.emplace_back(cov.row(id), 1.0);
                for (const auto& id : s.control_ids) wc.emplace_back(cov.row(id), w);
            }
        if (wt.empty() || wc.empty()) throw DataError("standardized differences: matching has no sets");
    }

    std::vector<BalanceRow> rows;
    for (Eigen::Index k = 0; k < cov.values.cols(); ++k) {
        BalanceRow r;
        r.name = cov.names[static_cast<std::size_t>(k)];
        const std::vector<double> vt(xt.col(k).data(), xt.col(k).data() + xt.rows());
        const std::vector<double> vc(xc.col(k).data(), xc.col(k).data() + xc.rows());
        const double var_t = vt.size() > 1 ? stats::variance(vt) : 0.0;
        const double var_c = vc.size() > 1 ? stats::variance(vc) : 0.0;
        const double pooled = std::sqrt((var_t + var_c) / 2.0);
        r.before = detail::standardized(stats::mean(vt), stats::mean(vc), pooled, r.degenerate);
        if (matchings) {
            detail::WeightedMoments mt, mc;
            for (const auto& [row, w] : wt) {
                mt.sum_w += w;
                mt.sum_wx += w * cov.values(row, k);
            }
            for (const auto& [row, w] : wc) {
                mc.sum_w += w;
                mc.sum_wx += w * cov.values(row, k);
            }
            r.after = detail::standardized(mt.mean(), mc.mean(), pooled, r.degenerate);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

// Balance of a stratified match: treated versus control over the match
// population, after-values from its matched sets.
inline std::vector<BalanceRow> standardized_differences(const CovariateMatrix& cov, const StratifiedMatch& match) {
    std::vector<std::string> treated, control;
    for (const auto& id : match.population) (match.treated.at(id) ? treated : control).push_back(id);
    return standardized_differences(cov, treated, control, &match.matchings);
}

inline std::string render_balance_table(const std::vector<BalanceRow>& rows, char delim = '\t') {
    std::ostringstream os;
    os << "covariate" << delim << "std_diff_before" << delim << "std_diff_after" << delim << "note\n";
    for (const auto& r : rows) {
        os << r.name << delim << format_fixed(r.before, 4) << delim << (r.after ? format_fixed(*r.after, 4) : "NA")
           << delim << (r.degenerate ? "degenerate" : "") << '\n';
    }
    return os.str();
}

// Love plot: covariates down the y-axis sorted by |before| (largest on top),
// before as hollow and after as filled circles, reference lines at 0, -0.1
// and 0.1.
inline std::string render_love_plot(const std::vector<BalanceRow>& rows, const std::string& title = "") {
    if (rows.empty()) throw DataError("Love plot needs at least one covariate");
    std::vector<const BalanceRow*> order;
    for (const auto& r : rows) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(),
                     [](const BalanceRow* a, const BalanceRow* b) { return std::fabs(a->before) > std::fabs(b->before); });
    const bool has_after = std::any_of(rows.begin(), rows.end(), [](const BalanceRow& r) { return r.after.has_value(); });

    double extent = 0.5;
    for (const auto& r : rows) {
        extent = std::max(extent, std::fabs(r.before));
        if (r.after) extent = std::max(extent, std::fabs(*r.after));
    }
    extent = std::ceil(extent * 10.0 + 1e-9) / 10.0 + 0.1;

    const double left = 180.0, right = 30.0, top = 40.0, bottom = 50.0, row_h = 18.0, plot_w = 420.0;
    const double width = left + plot_w + right;
    const double height = top + row_h * static_cast<double>(order.size()) + bottom;
    const auto x_of = [&](double d) { return left + (d + extent) / (2.0 * extent) * plot_w; };
    const auto f = [](double v) { return format_fixed(v, 2); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f(width) << "\" height=\"" << f(height)
       << "\" viewBox=\"0 0 " << f(width) << ' ' << f(height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect x=\"0\" y=\"0\" width=\"" << f(width) << "\" height=\"" << f(height) << "\" fill=\"white\"/>\n";
    if (!title.empty()) os << "<text x=\"" << f(width / 2) << "\" y=\"20\" text-anchor=\"middle\">" << xml_escape(title) << "</text>\n";
    const double y0 = top, y1 = top + row_h * static_cast<double>(order.size());
    os << "<rect x=\"" << f(left) << "\" y=\"" << f(y0) << "\" width=\"" << f(plot_w) << "\" height=\"" << f(y1 - y0)
       << "\" fill=\"none\" stroke=\"#888\"/>\n";
    for (double ref : {-0.1, 0.0, 0.1})
        os << "<line class=\"ref\" x1=\"" << f(x_of(ref)) << "\" y1=\"" << f(y0) << "\" x2=\"" << f(x_of(ref)) << "\" y2=\""
           << f(y1) << "\" stroke=\"#999\" stroke-dasharray=\"" << (ref == 0.0 ? "none" : "4 3") << "\"/>\n";

    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& r = *order[i];
        const double y = top + row_h * (static_cast<double>(i) + 0.5);
        os << "<text x=\"" << f(left - 6) << "\" y=\"" << f(y + 4) << "\" text-anchor=\"end\">" << xml_escape(r.name) << "</text>\n";
        os << "<circle class=\"pt before\" cx=\"" << f(x_of(r.before)) << "\" cy=\"" << f(y)
           << "\" r=\"4\" fill=\"none\" stroke=\"#c0392b\"/>\n";
        if (r.after)
            os << "<circle class=\"pt after\" cx=\"" << f(x_of(*r.after)) << "\" cy=\"" << f(y)
               << "\" r=\"4\" fill=\"#2c3e50\"/>\n";
    }

    for (double tick = -extent; tick <= extent + 1e-9; tick += extent / 2.0) {
        const double t = std::round(tick * 100.0) / 100.0;
        os << "<text x=\"" << f(x_of(t)) << "\" y=\"" << f(y1 + 16) << "\" text-anchor=\"middle\">" << f(t) << "</text>\n";
    }
    os << "<text x=\"" << f(left + plot_w / 2) << "\" y=\"" << f(y1 + 34)
       << "\" text-anchor=\"middle\">Standardized difference</text>\n";
    os << "<rect x=\"" << f(left) << "\" y=\"" << f(top - 16) << "\" width=\"8\" height=\"8\" fill=\"none\" stroke=\"#c0392b\"/>\n";
    os << "<text x=\"" << f(left + 12) << "\" y=\"" << f(top - 8) << "\">before</text>\n";
    if (has_after) {
        os << "<rect x=\"" << f(left + 70) << "\" y=\"" << f(top - 16) << "\" width=\"8\" height=\"8\" fill=\"#2c3e50\"/>\n";
        os << "<text x=\"" << f(left + 82) << "\" y=\"" << f(top - 8) << "\">after</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

inline void emit_love_plot(const std::vector<BalanceRow>& rows, const std::string& path, const std::string& title = "") {
    const std::string svg = render_love_plot(rows, title);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write Love plot to " + path);
    out << svg;
    if (!out) throw IoError("failed writing Love plot to " + path);
}

} // namespace matchkit
