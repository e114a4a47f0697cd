#include "matchkit/multiplicity.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

using namespace matchkit;

namespace {

TestResult result(double p, double est = 0.1) {
    TestResult t;
    t.p_value = p;
    t.estimate = est;
    t.std_error = 0.05;
    t.ci_low = est - 0.1;
    t.ci_high = est + 0.1;
    t.ci_level = 0.975;
    return t;
}

} // namespace

TEST(Holm, StepDown) {
    const auto r = holm_bonferroni({0.01, 0.04, 0.03, 0.005}, 0.05);
    EXPECT_EQ(r, (std::vector<bool>{true, false, false, true}));
    const auto l = holm_levels({0.01, 0.04, 0.03, 0.005}, 0.05);
    EXPECT_DOUBLE_EQ(l[3], 0.0125);
    EXPECT_DOUBLE_EQ(l[0], 0.05 / 3);
    EXPECT_DOUBLE_EQ(l[2], 0.025);
    EXPECT_DOUBLE_EQ(l[1], 0.025);
}

TEST(Holm, TwoOutcomeSplit) {
    EXPECT_EQ(holm_levels({0.02, 0.04}, 0.05), (std::vector<double>{0.025, 0.05}));
    EXPECT_EQ(holm_levels({0.03, 0.04}, 0.05), (std::vector<double>{0.025, 0.025}));
}

TEST(Holm, DominatesBonferroni) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 0.1);
    for (int rep = 0; rep < 500; ++rep) {
        std::vector<double> p(6);
        for (auto& v : p) v = u(rng);
        const auto h = holm_bonferroni(p, 0.05);
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (p[i] <= 0.05 / 6.0) {
                EXPECT_TRUE(h[i]);
            }
        }
    }
}

TEST(BenjaminiHochberg, StepUp) {
    const auto r = benjamini_hochberg({0.01, 0.02, 0.03, 0.5}, 0.05);
    EXPECT_EQ(r, (std::vector<bool>{true, true, true, false}));
    EXPECT_EQ(benjamini_hochberg({0.04, 0.2}, 0.05), (std::vector<bool>{false, false}));
    EXPECT_THROW(benjamini_hochberg({1.5}, 0.05), DataError);
    EXPECT_THROW(benjamini_hochberg({0.5}, 1.0), ConfigError);
}

TEST(BenjaminiHochberg, RejectsSupersetOfHolm) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 0.08);
    for (int rep = 0; rep < 500; ++rep) {
        std::vector<double> p(5);
        for (auto& v : p) v = u(rng);
        const auto h = holm_bonferroni(p, 0.05);
        const auto b = benjamini_hochberg(p, 0.05);
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (h[i]) {
                EXPECT_TRUE(b[i]);
            }
        }
    }
}

TEST(OrderedProcedure, StopsAtFirstFailure) {
    auto r = ordered_procedure("y", result(0.2), result(0.001), result(0.001), result(0.001), 0.025);
    EXPECT_EQ(r.stop_stage, "1");
    EXPECT_FALSE(r.stage2a.decided);
    r = ordered_procedure("y", result(0.001), result(0.001), result(0.03), result(0.001), 0.025);
    EXPECT_EQ(r.stop_stage, "2");
    EXPECT_TRUE(r.stage2a.rejected);
    EXPECT_FALSE(r.stage2b.rejected);
    EXPECT_FALSE(r.stage3.decided);
    r = ordered_procedure("y", result(0.001), result(0.001), result(0.001), result(0.5), 0.025);
    EXPECT_EQ(r.stop_stage, "3");
    r = ordered_procedure("y", result(0.001), result(0.001), result(0.001), result(0.001), 0.025);
    EXPECT_EQ(r.stop_stage, "completed");
    for (const auto* s : r.stages()) EXPECT_TRUE(s->decided && s->rejected);
}

TEST(ResultsTable, MatchesGoldenFile) {
    std::vector<OrderedTestReport> reports{
        ordered_procedure("cognitive", result(0.001, -0.21), result(0.002, -0.18), result(0.01, -0.25),
                          result(0.004, 0.02), 0.025),
        ordered_procedure("depression", result(0.4, 0.05), result(0.3, 0.04), result(0.6, 0.07), result(0.2, -0.01),
                          0.05)};
    std::vector<SecondaryResult> sec{{result(0.01, 0.12), true}, {result(0.2, -0.03), false}};
    sec[0].result.label = "HOST_2004";
    sec[1].result.label = "SEI_2004";
    const std::string table = render_results_table(reports, sec);
    std::ifstream in(MATCHKIT_TEST_GOLDEN "/results_table.txt", std::ios::binary);
    std::stringstream golden;
    golden << in.rdbuf();
    ASSERT_FALSE(golden.str().empty()) << "missing golden file";
    EXPECT_EQ(table, golden.str());
}

TEST(ResultsJson, CarriesStageKeys) {
    const auto r = ordered_procedure("y", result(0.001), result(0.001), result(0.001), result(0.001), 0.025);
    const auto j = to_json(r);
    EXPECT_TRUE(j.contains("stage1_vs_all_controls"));
    EXPECT_TRUE(j.contains("stage3_equivalence"));
    EXPECT_EQ(j["stop_stage"], "completed");
    EXPECT_EQ(j["stage2b_vs_othersport"]["rejected"], true);
}
