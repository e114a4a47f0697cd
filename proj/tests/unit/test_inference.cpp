#include "matchkit/inference.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace matchkit;

namespace {

// n sets of one treated and `k` controls with one covariate.
struct Instance {
    std::vector<Matching> matchings;
    CovariateMatrix cov;
    CompositeOutcome outcome;
};

Instance make_instance(int sets, int k, double effect, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    Instance in;
    Matching m;
    std::vector<std::string> ids;
    std::vector<double> x;
    for (int s = 0; s < sets; ++s) {
        MatchedSet ms;
        const double set_level = z(rng);
        for (int j = 0; j <= k; ++j) {
            const std::string id = "s" + std::to_string(s) + "_" + std::to_string(j);
            const double xv = z(rng);
            ids.push_back(id);
            x.push_back(xv);
            const bool treated = j == 0;
            (treated ? ms.treated_ids : ms.control_ids).push_back(id);
            in.outcome.values[id] = set_level + 0.5 * xv + (treated ? effect : 0.0) + z(rng);
        }
        m.sets.push_back(ms);
    }
    in.matchings = {m};
    in.outcome.label = "y";
    in.cov.names = {"x"};
    in.cov.ids = ids;
    in.cov.values.resize(static_cast<Eigen::Index>(ids.size()), 1);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        in.cov.values(static_cast<Eigen::Index>(i), 0) = x[i];
        in.cov.row_of[ids[i]] = static_cast<Eigen::Index>(i);
    }
    return in;
}

} // namespace

TEST(ZScores, ReferenceIsAllSubjectsWithValue) {
    std::vector<SubjectRecord> rs(4);
    const double v[] = {1, 2, 3, 0};
    for (int i = 0; i < 4; ++i) {
        rs[static_cast<std::size_t>(i)].id = "r" + std::to_string(i);
        if (i < 3) rs[static_cast<std::size_t>(i)].outcomes[{"LF", "2004"}] = v[i];
    }
    const auto z = z_scores(rs, "LF", "2004");
    EXPECT_EQ(z.size(), 3u);
    EXPECT_DOUBLE_EQ(z.at("r0"), -1.0);
    EXPECT_DOUBLE_EQ(z.at("r1"), 0.0);
    EXPECT_DOUBLE_EQ(z.at("r2"), 1.0);
    rs[1].outcomes[{"LF", "2004"}] = 1.0;
    rs[2].outcomes[{"LF", "2004"}] = 1.0;
    EXPECT_THROW(z_scores(rs, "LF", "2004"), DegenerateError);
}

TEST(CompositeOutcome, CognitiveLiesBetweenComponents) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> z;
    std::vector<SubjectRecord> rs(50);
    for (int i = 0; i < 50; ++i) {
        auto& r = rs[static_cast<std::size_t>(i)];
        r.id = "r" + std::to_string(i);
        if (i % 5 != 0) r.outcomes[{"LF", "2004"}] = z(rng);
        if (i % 7 != 0) r.outcomes[{"DWR", "2004"}] = z(rng);
        r.outcomes[{"CESD", "2004"}] = z(rng);
    }
    const auto p = build_primary_outcomes(rs, "2004");
    const auto lf = z_scores(rs, "LF", "2004");
    const auto dwr = z_scores(rs, "DWR", "2004");
    for (const auto& r : rs) {
        const auto c = p.cognitive.value(r.id);
        const bool has_lf = lf.count(r.id), has_dwr = dwr.count(r.id);
        ASSERT_EQ(c.has_value(), has_lf || has_dwr);
        if (!c) continue;
        double lo = INFINITY, hi = -INFINITY;
        if (has_lf) lo = std::min(lo, lf.at(r.id)), hi = std::max(hi, lf.at(r.id));
        if (has_dwr) lo = std::min(lo, dwr.at(r.id)), hi = std::max(hi, dwr.at(r.id));
        EXPECT_GE(*c, lo - 1e-12);
        EXPECT_LE(*c, hi + 1e-12);
    }
}

TEST(MatchedAdjustedTest, InvariantToSetConstants) {
    Instance in = make_instance(40, 2, 0.3, 7);
    const auto a = matched_adjusted_test(in.outcome, in.matchings, in.cov, 0.975, "y");
    int s = 0;
    for (const auto& set : in.matchings[0].sets) {
        const double shift = 10.0 * std::sin(s++);
        for (const auto& id : set.treated_ids) in.outcome.values[id] += shift;
        for (const auto& id : set.control_ids) in.outcome.values[id] += shift;
    }
    const auto b = matched_adjusted_test(in.outcome, in.matchings, in.cov, 0.975, "y");
    EXPECT_NEAR(a.estimate, b.estimate, 1e-8);
    EXPECT_NEAR(a.std_error, b.std_error, 1e-8);
    EXPECT_EQ(a.n_treated, 40u);
    EXPECT_EQ(a.n_control, 80u);
    EXPECT_EQ(a.n_sets, 40u);
    EXPECT_NEAR(a.ci_high - a.estimate, a.estimate - a.ci_low, 1e-12);
    EXPECT_DOUBLE_EQ(a.ci_level, 0.975);
}

TEST(MatchedAdjustedTest, MissingOutcomeIsAnError) {
    Instance in = make_instance(5, 1, 0.0, 1);
    in.outcome.values.erase("s0_0");
    EXPECT_THROW(matched_adjusted_test(in.outcome, in.matchings, in.cov, 0.95, "y"), DataError);
}

TEST(DoseScaledTest, UnitDoseEqualsBinaryAnalysis) {
    const Instance in = make_instance(30, 2, 0.2, 3);
    std::unordered_map<std::string, int> dose;
    for (const auto& s : in.matchings[0].sets) {
        for (const auto& id : s.treated_ids) dose[id] = 1;
        for (const auto& id : s.control_ids) dose[id] = 0;
    }
    const auto a = matched_adjusted_test(in.outcome, in.matchings, in.cov, 0.975, "y");
    const auto b = dose_scaled_test(in.outcome, in.matchings, in.cov, dose, 0.975, "y");
    EXPECT_NEAR(a.estimate, b.estimate, 1e-10);
    EXPECT_NEAR(a.p_value, b.p_value, 1e-10);
    dose[in.matchings[0].sets[0].treated_ids[0]] = 0;
    EXPECT_THROW(dose_scaled_test(in.outcome, in.matchings, in.cov, dose, 0.975, "y"), DataError);
}

TEST(MantelHaenszel, SingleTableClosedForm) {
    StratifiedTables st;
    st.tables = {{10, 5, 4, 11}};
    const auto r = mantel_haenszel_test(st);
    // E = 15*14/30 = 7, V = 15*15*14*16 / (30^2 * 29).
    const double var = 15.0 * 15.0 * 14.0 * 16.0 / (900.0 * 29.0);
    EXPECT_NEAR(r.statistic, 3.0 / std::sqrt(var), 1e-12);
    EXPECT_NEAR(r.estimate, (10.0 * 11.0) / (5.0 * 4.0), 1e-12);
    EXPECT_NEAR(mantel_haenszel_one_sided(st), stats::normal_sf(3.0 / std::sqrt(var)), 1e-15);
}

TEST(MantelHaenszel, InvariantToTableOrder) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> u(0, 4);
    StratifiedTables st;
    for (int i = 0; i < 30; ++i) st.tables.push_back({u(rng), u(rng), u(rng), u(rng)});
    const auto a = mantel_haenszel_test(st);
    std::reverse(st.tables.begin(), st.tables.end());
    const auto b = mantel_haenszel_test(st);
    EXPECT_NEAR(a.statistic, b.statistic, 1e-12);
    EXPECT_NEAR(a.estimate, b.estimate, 1e-12);
}

TEST(MantelHaenszel, NoInformativeTableIsAnError) {
    StratifiedTables st;
    st.tables = {{1, 0, 1, 0}, {0, 2, 0, 3}};
    EXPECT_THROW(mantel_haenszel_test(st), Error);
}

TEST(Equivalence, BoundaryAndInterior) {
    TestResult base;
    base.estimate = 0.0;
    base.std_error = 0.01;
    EXPECT_LT(equivalence_test(base, 0.5).p_value, 1e-10);
    base.estimate = 0.5;
    base.std_error = 0.1;
    EXPECT_NEAR(equivalence_test(base, 0.5).p_value, 0.5, 1e-12);
    EXPECT_THROW(equivalence_test(base, 0.0), ConfigError);
}

TEST(Attrition, SeparationSurfaces) {
    std::vector<SubjectRecord> rs(40);
    CovariateMatrix cm;
    cm.names = {"x"};
    cm.values.resize(40, 1);
    for (int i = 0; i < 40; ++i) {
        auto& r = rs[static_cast<std::size_t>(i)];
        r.id = "r" + std::to_string(i);
        if (i % 2 == 0) {
            r.sports.insert(Sport::football);
            r.football_years = 1;
            r.outcomes[{"LF", "2004"}] = 1.0;
        }
        cm.values(i, 0) = std::sin(i);
        cm.ids.push_back(r.id);
        cm.row_of[r.id] = i;
    }
    EXPECT_THROW(attrition_component(rs, cm, "2004", "LF"), SeparationError);
    EXPECT_THROW(attrition_component(rs, cm, "2004", "DWR"), DegenerateError);
}
