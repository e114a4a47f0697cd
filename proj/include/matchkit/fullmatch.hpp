#pragma once

// Optimal full matching as a minimum-cost flow, stratified by availability
// pattern.
//
// A full matching is a star forest over the bipartite treated/control graph:
// every set has one unit on one side and one or more on the other. Its cost
// is the sum of singleton-to-member distances, i.e. the sum of the distances
// on the star edges. With nonnegative costs a minimum-cost edge cover with
// degree caps (treated <= max controls, control <= max treated) is a star
// forest once edges joining two units of degree >= 2 are removed, which never
// increases cost. The edge cover with lower bounds of one is a flow problem:
//
//   source s: supply F - nT      treated i: supply 1      control j: demand 1
//   sink t:   demand F - nC      F = nT * max_controls (+ nC when trimming)
//   s -> i   cap max_controls - 1, cost 0
//   i -> j   cap 1, cost = scaled distance
//   j -> t   cap max_treated - 1, cost 0
//   s -> t   cap F, cost 0 (absorbs unused capacity)
//
// With trimming, a unit may stay unmatched at a penalty larger than the cost
// of any complete matching, so the number of matched units is maximized
// first.

#include "matchkit/cohort.hpp"
#include "matchkit/distance.hpp"
#include "matchkit/error.hpp"
#include "matchkit/flow.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace matchkit {

struct MatchConstraints {
    int max_controls_per_treated = 6;
    int max_treated_per_control = 1;
    bool trim = false;

    void validate() const {
        if (max_controls_per_treated < 1 || max_treated_per_control < 1)
            throw ConfigError("match constraints must allow at least one unit per side");
    }
};

struct MatchedSet {
    std::vector<std::string> treated_ids;
    std::vector<std::string> control_ids;
};

struct Matching {
    AvailabilityPattern pattern;
    std::vector<MatchedSet> sets;
    double total_distance = 0.0;
    std::int64_t objective = 0;  // integer-scaled cost the solver minimized
    std::vector<std::string> unmatched;
};

// Distances are converted to integers at this resolution for exact flow
// arithmetic.
inline constexpr double kCostScale = 1e6;

inline std::int64_t scaled_cost(double d) {
    if (!std::isfinite(d) || d < 0) throw NumericalError("matching distance must be finite and nonnegative");
    const double s = std::round(d * kCostScale);
    if (s > 4e15) throw NumericalError("matching distance too large for exact integer costs");
    return static_cast<std::int64_t>(s);
}

inline Matching optimal_full_match(const DistanceMatrix& dist, const MatchConstraints& c) {
    c.validate();
    const auto nt = static_cast<std::int64_t>(dist.row_ids.size());
    const auto nc = static_cast<std::int64_t>(dist.col_ids.size());
    if (nt < 1 || nc < 1) throw DataError("full matching needs at least one treated and one control");
    const std::int64_t kc = c.max_controls_per_treated;
    const std::int64_t kt = c.max_treated_per_control;
    if (!c.trim && (nc > nt * kc || nt > nc * kt))
        throw InfeasibleError("full matching infeasible: " + std::to_string(nt) + " treated and " + std::to_string(nc) +
                              " controls cannot all be matched with at most " + std::to_string(kc) +
                              " controls per treated and " + std::to_string(kt) +
                              " treated per control; enable trimming or relax the constraints");

    std::vector<std::int64_t> cost(static_cast<std::size_t>(nt * nc));
    std::int64_t max_cost = 0;
    for (std::int64_t i = 0; i < nt; ++i)
        for (std::int64_t j = 0; j < nc; ++j) {
            const auto v = scaled_cost(dist.entries(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
            cost[static_cast<std::size_t>(i * nc + j)] = v;
            max_cost = std::max(max_cost, v);
        }

    const std::int64_t f = nt * kc + (c.trim ? nc : 0);
    const std::int64_t penalty = (nt + nc) * (max_cost + 1) + 1;
    // Unit nodes first so that each treated unit is routed before the
    // source's surplus.
    const int tbase = 0, cbase = static_cast<int>(nt);

    // Candidate pairs: nearest neighbours from both sides, grown until the
    // sparse problem is feasible and no omitted pair has negative reduced
    // cost under the optimal potentials, which makes it optimal for the
    // complete graph.
    std::vector<char> candidate(static_cast<std::size_t>(nt * nc), 0);
    std::size_t n_candidates = 0;
    const auto add_nearest = [&](std::int64_t k_t, std::int64_t k_c) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = 0; i < nt; ++i) {
            idx.resize(static_cast<std::size_t>(nc));
            for (std::int64_t j = 0; j < nc; ++j) idx[static_cast<std::size_t>(j)] = j;
            const auto key = [&](std::int64_t j) { return std::make_pair(cost[static_cast<std::size_t>(i * nc + j)], j); };
            std::nth_element(idx.begin(), idx.begin() + (std::min(k_t, nc) - 1), idx.end(),
                             [&](std::int64_t a, std::int64_t b) { return key(a) < key(b); });
            for (std::int64_t r = 0; r < std::min(k_t, nc); ++r) {
                auto& flag = candidate[static_cast<std::size_t>(i * nc + idx[static_cast<std::size_t>(r)])];
                n_candidates += !flag;
                flag = 1;
            }
        }
        for (std::int64_t j = 0; j < nc; ++j) {
            idx.resize(static_cast<std::size_t>(nt));
            for (std::int64_t i = 0; i < nt; ++i) idx[static_cast<std::size_t>(i)] = i;
            const auto key = [&](std::int64_t i) { return std::make_pair(cost[static_cast<std::size_t>(i * nc + j)], i); };
            std::nth_element(idx.begin(), idx.begin() + (std::min(k_c, nt) - 1), idx.end(),
                             [&](std::int64_t a, std::int64_t b) { return key(a) < key(b); });
            for (std::int64_t r = 0; r < std::min(k_c, nt); ++r) {
                auto& flag = candidate[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)] * nc + j)];
                n_candidates += !flag;
                flag = 1;
            }
        }
    };
    std::int64_t k_t = std::max<std::int64_t>(12, 2 * kc), k_c = std::max<std::int64_t>(12, 2 * kt);
    add_nearest(k_t, k_c);

    FlowResult fr;
    std::vector<std::pair<std::int64_t, std::int64_t>> pair_of_arc;
    int first_pair_arc = 0;
    for (;;) {
        FlowNetwork net;
        for (std::int64_t i = 0; i < nt; ++i) net.add_node(1);
        for (std::int64_t j = 0; j < nc; ++j) net.add_node(-1);
        const int s = net.add_node(f - nt);
        const int t = net.add_node(-(f - nc));
        if (kc > 1)
            for (std::int64_t i = 0; i < nt; ++i) net.add_arc(s, tbase + static_cast<int>(i), kc - 1, 0);
        first_pair_arc = static_cast<int>(net.arcs.size());
        pair_of_arc.clear();
        for (std::int64_t i = 0; i < nt; ++i)
            for (std::int64_t j = 0; j < nc; ++j)
                if (candidate[static_cast<std::size_t>(i * nc + j)]) {
                    net.add_arc(tbase + static_cast<int>(i), cbase + static_cast<int>(j), 1,
                                cost[static_cast<std::size_t>(i * nc + j)]);
                    pair_of_arc.emplace_back(i, j);
                }
        if (kt > 1)
            for (std::int64_t j = 0; j < nc; ++j) net.add_arc(cbase + static_cast<int>(j), t, kt - 1, 0);
        net.add_arc(s, t, f, 0);
        if (c.trim) {
            for (std::int64_t i = 0; i < nt; ++i) net.add_arc(tbase + static_cast<int>(i), t, 1, penalty);
            for (std::int64_t j = 0; j < nc; ++j) net.add_arc(s, cbase + static_cast<int>(j), 1, penalty);
        }

        try {
            fr = solve_min_cost_flow(net);
        } catch (const InfeasibleError&) {
            if (n_candidates == candidate.size()) throw;
            k_t *= 2;
            k_c *= 2;
            add_nearest(k_t, k_c);
            continue;
        }
        std::size_t added = 0;
        for (std::int64_t i = 0; i < nt; ++i)
            for (std::int64_t j = 0; j < nc; ++j) {
                auto& flag = candidate[static_cast<std::size_t>(i * nc + j)];
                if (flag) continue;
                const std::int64_t reduced = cost[static_cast<std::size_t>(i * nc + j)] +
                                             fr.potential[static_cast<std::size_t>(tbase + i)] -
                                             fr.potential[static_cast<std::size_t>(cbase + j)];
                if (reduced < 0) {
                    flag = 1;
                    ++added;
                }
            }
        if (added == 0) break;
        n_candidates += added;
    }

    // Pair edges, then removal of edges whose endpoints both have degree >= 2.
    std::vector<std::vector<std::int64_t>> t_adj(static_cast<std::size_t>(nt)), c_adj(static_cast<std::size_t>(nc));
    for (std::size_t a = 0; a < pair_of_arc.size(); ++a)
        if (fr.flow[static_cast<std::size_t>(first_pair_arc) + a] > 0) {
            const auto [i, j] = pair_of_arc[a];
            t_adj[static_cast<std::size_t>(i)].push_back(j);
            c_adj[static_cast<std::size_t>(j)].push_back(i);
        }
    for (std::int64_t i = 0; i < nt; ++i) {
        auto& adj = t_adj[static_cast<std::size_t>(i)];
        for (std::size_t k = 0; k < adj.size();) {
            const auto j = adj[k];
            auto& back = c_adj[static_cast<std::size_t>(j)];
            if (adj.size() >= 2 && back.size() >= 2) {
                back.erase(std::find(back.begin(), back.end(), i));
                adj.erase(adj.begin() + static_cast<std::ptrdiff_t>(k));
            } else {
                ++k;
            }
        }
    }

    Matching m;
    std::vector<char> used_c(static_cast<std::size_t>(nc), 0);
    std::vector<std::pair<std::int64_t, MatchedSet>> keyed;
    for (std::int64_t i = 0; i < nt; ++i) {
        const auto& adj = t_adj[static_cast<std::size_t>(i)];
        if (adj.empty()) continue;
        const auto j0 = adj.front();
        const auto& back = c_adj[static_cast<std::size_t>(j0)];
        if (adj.size() == 1 && back.size() >= 2) {
            if (used_c[static_cast<std::size_t>(j0)]) continue;  // control-centred set, emitted once
            used_c[static_cast<std::size_t>(j0)] = 1;
            MatchedSet ms;
            for (auto ti : back) ms.treated_ids.push_back(dist.row_ids[static_cast<std::size_t>(ti)]);
            ms.control_ids.push_back(dist.col_ids[static_cast<std::size_t>(j0)]);
            for (auto ti : back) m.total_distance += dist.entries(static_cast<Eigen::Index>(ti), static_cast<Eigen::Index>(j0));
            keyed.emplace_back(*std::min_element(back.begin(), back.end()), std::move(ms));
        } else {
            MatchedSet ms;
            ms.treated_ids.push_back(dist.row_ids[static_cast<std::size_t>(i)]);
            for (auto j : adj) {
                used_c[static_cast<std::size_t>(j)] = 1;
                ms.control_ids.push_back(dist.col_ids[static_cast<std::size_t>(j)]);
                m.total_distance += dist.entries(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            }
            keyed.emplace_back(i, std::move(ms));
        }
    }
    std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [k, ms] : keyed) m.sets.push_back(std::move(ms));

    for (std::int64_t i = 0; i < nt; ++i)
        for (auto j : t_adj[static_cast<std::size_t>(i)]) m.objective += cost[static_cast<std::size_t>(i * nc + j)];
    for (std::int64_t i = 0; i < nt; ++i)
        if (t_adj[static_cast<std::size_t>(i)].empty()) m.unmatched.push_back(dist.row_ids[static_cast<std::size_t>(i)]);
    for (std::int64_t j = 0; j < nc; ++j)
        if (c_adj[static_cast<std::size_t>(j)].empty()) m.unmatched.push_back(dist.col_ids[static_cast<std::size_t>(j)]);
    if (!c.trim && !m.unmatched.empty()) throw NumericalError("full matching left units unmatched without trimming");
    return m;
}

// Which arms form the "treated" and "control" roles of a match.
struct ArmContrast {
    std::string name;
    std::vector<Arm> treated;
    std::vector<Arm> control;

    bool is_treated(Arm a) const { return std::find(treated.begin(), treated.end(), a) != treated.end(); }
    bool is_control(Arm a) const { return std::find(control.begin(), control.end(), a) != control.end(); }
};

struct SkippedStratum {
    AvailabilityPattern pattern;
    std::size_t n_treated = 0;
    std::size_t n_control = 0;
    std::string reason;
};

struct StratifiedMatch {
    ArmContrast contrast;
    MatchConstraints constraints;
    std::vector<Matching> matchings;
    std::vector<SkippedStratum> skipped;
    PropensityModel propensity;
    // Match population: subjects of either role outside the "None" stratum.
    std::vector<std::string> population;
    std::unordered_map<std::string, bool> treated;

    std::size_t n_sets() const {
        std::size_t n = 0;
        for (const auto& m : matchings) n += m.sets.size();
        return n;
    }
};

// Per availability stratum (excluding "None"): robust Mahalanobis distance
// with a soft propensity caliper, then optimal full matching. The propensity
// model is fitted once on the whole match population.
inline StratifiedMatch stratified_full_match(const std::vector<SubjectRecord>& eligible, const CovariateMatrix& cov,
                                             const std::string& wave, const ArmContrast& contrast,
                                             const MatchConstraints& constraints, const CaliperSpec& caliper) {
    StratifiedMatch out;
    out.contrast = contrast;
    out.constraints = constraints;
    std::unordered_map<std::string, Arm> arm;
    for (const auto& r : eligible) arm.emplace(r.id, arm_of(r));

    const auto strata = stratify_by_availability(eligible, wave);
    std::vector<bool> flags;
    for (const auto& st : strata) {
        if (st.pattern.empty()) continue;
        for (const auto& id : st.members) {
            const Arm a = arm.at(id);
            if (contrast.is_treated(a) || contrast.is_control(a)) {
                out.population.push_back(id);
                flags.push_back(contrast.is_treated(a));
                out.treated.emplace(id, contrast.is_treated(a));
            }
        }
    }
    bool any = false;
    for (const auto& st : strata) {
        if (st.pattern.empty()) continue;
        std::size_t a = 0, b = 0;
        for (const auto& id : st.members) {
            a += contrast.is_treated(arm.at(id));
            b += contrast.is_control(arm.at(id));
        }
        any = any || (a > 0 && b > 0);
    }
    if (!any) throw DataError("match " + contrast.name + ": no stratum contains both roles");

    out.propensity = fit_propensity(cov.rows(out.population), cov.names, flags, out.population);

    for (const auto& st : strata) {
        if (st.pattern.empty()) continue;
        std::vector<std::string> tids, cids;
        for (const auto& id : st.members) {
            const Arm a = arm.at(id);
            if (contrast.is_treated(a)) tids.push_back(id);
            else if (contrast.is_control(a)) cids.push_back(id);
        }
        if (tids.empty() || cids.empty()) {
            if (!tids.empty() || !cids.empty())
                out.skipped.push_back({st.pattern, tids.size(), cids.size(),
                                       tids.empty() ? "no treated subjects" : "no control subjects"});
            continue;
        }
        const DistanceMatrix raw = robust_mahalanobis(cov.rows(tids), tids, cov.rows(cids), cids);
        const DistanceMatrix pen = apply_caliper(raw, out.propensity, caliper);
        Matching m = optimal_full_match(pen, constraints);
        m.pattern = st.pattern;
        out.matchings.push_back(std::move(m));
    }
    return out;
}

struct CompositionTable {
    std::vector<std::string> rows;
    std::vector<std::string> columns;
    std::vector<std::vector<std::size_t>> counts;  // [row][column]

    std::size_t at(const std::string& row, const std::string& col) const {
        const auto r = std::find(rows.begin(), rows.end(), row);
        const auto c = std::find(columns.begin(), columns.end(), col);
        if (r == rows.end() || c == columns.end()) return 0;
        return counts[static_cast<std::size_t>(r - rows.begin())][static_cast<std::size_t>(c - columns.begin())];
    }

    std::string render(char delim = '\t') const {
        std::ostringstream os;
        os << "Composition";
        for (const auto& c : columns) os << delim << c;
        os << '\n';
        for (std::size_t r = 0; r < rows.size(); ++r) {
            os << rows[r];
            for (auto v : counts[r]) os << delim << v;
            os << '\n';
        }
        return os.str();
    }
};

// Counts of matched sets by shape ("k:1" with k treated, "1:k" with k
// controls) per availability pattern. Rows run from the largest k:1 down to
// 1:1 and up to the largest 1:k, at least 6 each way.
inline CompositionTable composition_table(const std::vector<Matching>& matchings) {
    std::size_t kmax = 6;
    bool has_none = false;
    for (const auto& m : matchings) {
        has_none = has_none || m.pattern.empty();
        for (const auto& s : m.sets) kmax = std::max({kmax, s.treated_ids.size(), s.control_ids.size()});
    }
    CompositionTable tab;
    for (std::size_t k = kmax; k >= 2; --k) tab.rows.push_back(std::to_string(k) + ":1");
    tab.rows.push_back("1:1");
    for (std::size_t k = 2; k <= kmax; ++k) tab.rows.push_back("1:" + std::to_string(k));
    for (const auto& p : kPatternOrder)
        if (!p.empty() || has_none) tab.columns.push_back(p.label());
    tab.counts.assign(tab.rows.size(), std::vector<std::size_t>(tab.columns.size(), 0));
    for (const auto& m : matchings) {
        const auto col = static_cast<std::size_t>(
            std::find(tab.columns.begin(), tab.columns.end(), m.pattern.label()) - tab.columns.begin());
        for (const auto& s : m.sets) {
            const std::string key = std::to_string(s.treated_ids.size()) + ":" + std::to_string(s.control_ids.size());
            const auto row = static_cast<std::size_t>(std::find(tab.rows.begin(), tab.rows.end(), key) - tab.rows.begin());
            if (row < tab.rows.size()) ++tab.counts[row][col];
        }
    }
    return tab;
}

inline nlohmann::ordered_json to_json(const Matching& m) {
    nlohmann::ordered_json j;
    j["pattern"] = m.pattern.label();
    j["total_distance"] = m.total_distance;
    j["objective_scaled"] = m.objective;
    auto sets = nlohmann::ordered_json::array();
    for (const auto& s : m.sets) sets.push_back({{"treated", s.treated_ids}, {"control", s.control_ids}});
    j["sets"] = sets;
    j["unmatched"] = m.unmatched;
    return j;
}

} // namespace matchkit
