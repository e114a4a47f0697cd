#include "matchkit/sensitivity.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace matchkit;

namespace {

ScoredSets random_sets(std::size_t n_sets, std::size_t size, double shift, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    ScoredSets s;
    for (std::size_t i = 0; i < n_sets; ++i) {
        ScoredSet set;
        for (std::size_t j = 0; j < size; ++j) set.responses.push_back(z(rng) + (j == 0 ? shift : 0.0));
        s.sets.push_back(set);
    }
    return s;
}

// Worst case over every hidden-bias pattern u in {0,1}^n of the first
// unit's score: probabilities proportional to gamma^u.
stats::Moments brute_force_bound(const std::vector<double>& q, double gamma) {
    const std::size_t n = q.size();
    stats::Moments best{-INFINITY, 0.0};
    for (unsigned mask = 1; mask + 1 < (1u << n); ++mask) {
        double w = 0.0, mu = 0.0, second = 0.0;
        for (std::size_t j = 0; j < n; ++j) w += (mask >> j & 1u) ? gamma : 1.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double p = ((mask >> j & 1u) ? gamma : 1.0) / w;
            mu += p * q[j];
            second += p * q[j] * q[j];
        }
        const double var = second - mu * mu;
        if (mu > best.mean + 1e-12 || (std::fabs(mu - best.mean) <= 1e-12 && var > best.variance)) best = {mu, var};
    }
    return best;
}

double choose(int n, int k) {
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

} // namespace

TEST(MTest, GammaOneEqualsRandomizationTest) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto sets = random_sets(15, 2 + seed % 4, 0.3, seed);
        for (auto dir : {Direction::greater, Direction::less}) {
            const double a = m_test_upper_bound(sets, {1.0}, dir)[0];
            const double b = m_test_randomization_p(sets, dir);
            EXPECT_NEAR(a, b, 1e-10);
        }
    }
}

TEST(MTest, SeparableBoundMatchesEnumeration) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> z;
    for (int rep = 0; rep < 200; ++rep) {
        std::vector<double> q(2 + rep % 6);
        for (auto& v : q) v = z(rng);
        const double gamma = 1.0 + 0.25 * (rep % 13);
        const auto a = separable_bound(q, gamma);
        const auto b = brute_force_bound(q, gamma);
        EXPECT_NEAR(a.mean, b.mean, 1e-10);
        EXPECT_NEAR(a.variance, b.variance, 1e-10);
    }
}

TEST(MTest, ScaleEquivariant) {
    auto sets = random_sets(20, 3, 0.4, 9);
    const auto a = m_test_upper_bound(sets, {1.0, 1.5, 2.0}, Direction::greater);
    for (auto& s : sets.sets)
        for (auto& v : s.responses) v *= 7.5;
    const auto b = m_test_upper_bound(sets, {1.0, 1.5, 2.0}, Direction::greater);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(MTest, MonotoneInGamma) {
    std::vector<double> grid;
    for (double g = 1.0; g <= 20.0 + 1e-9; g += 0.01) grid.push_back(g);
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const auto sets = random_sets(5 + seed % 30, 2 + seed % 5, 0.1 * static_cast<double>(seed % 8), 100 + seed);
        for (auto dir : {Direction::greater, Direction::less}) {
            const auto p = m_test_upper_bound(sets, grid, dir);
            for (std::size_t i = 1; i < p.size(); ++i) ASSERT_GE(p[i], p[i - 1]) << "seed " << seed << " gamma " << grid[i];
        }
    }
}

TEST(MTest, BoundIsOneOnceExpectationReachesStatistic) {
    const auto sets = random_sets(30, 3, 0.0, 17);
    const auto scores = m_scores(sets, Direction::less);
    const auto p = m_test_upper_bound(sets, {1.0, 3.0, 20.0}, Direction::less);
    EXPECT_DOUBLE_EQ(p[2], 1.0);
    const auto parts = m_test_parts(scores, 20.0);
    EXPECT_LE(parts.statistic, parts.expectation);
}

TEST(MTest, ExtremeSeparation) {
    const auto sets = random_sets(40, 2, 25.0, 5);
    EXPECT_LT(m_test_upper_bound(sets, {1.0}, Direction::greater)[0], 1e-4);
    EXPECT_GT(m_test_upper_bound(sets, {1.0}, Direction::less)[0], 0.99);
}

TEST(MTest, ZeroScaleIsDegenerate) {
    ScoredSets s;
    s.sets = {{{1.0, 1.0}}, {{2.0, 2.0}}};
    EXPECT_THROW(m_scores(s, Direction::greater), DegenerateError);
}

TEST(CovarianceAdjust, LinearOutcomeLeavesZeroResiduals) {
    CovariateMatrix cm;
    cm.names = {"a", "b"};
    cm.values.resize(8, 2);
    CompositeOutcome y;
    y.label = "y";
    Matching m;
    for (int i = 0; i < 8; ++i) {
        const std::string id = "u" + std::to_string(i);
        cm.values(i, 0) = std::sin(i);
        cm.values(i, 1) = std::cos(3 * i);
        cm.row_of[id] = i;
        cm.ids.push_back(id);
        y.values[id] = 2.0 + 3.0 * cm.values(i, 0) - cm.values(i, 1);
        if (i % 2 == 0) m.sets.push_back({{id}, {}});
        else m.sets.back().control_ids.push_back(id);
    }
    const auto sets = covariance_adjust(y, {m}, cm);
    for (const auto& s : sets.sets)
        for (double r : s.responses) EXPECT_NEAR(r, 0.0, 1e-10);
}

TEST(CovarianceAdjust, ResidualsMatchNormalEquations) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> z;
    const int n = 12;
    CovariateMatrix cm;
    cm.names = {"a", "b", "c"};
    cm.values.resize(n, 3);
    CompositeOutcome y;
    y.label = "y";
    Eigen::MatrixXd x(n, 4);
    Eigen::VectorXd yv(n);
    Matching m;
    for (int i = 0; i < n; ++i) {
        const std::string id = "u" + std::to_string(i);
        for (int k = 0; k < 3; ++k) cm.values(i, k) = z(rng);
        cm.row_of[id] = i;
        yv(i) = z(rng);
        y.values[id] = yv(i);
        x(i, 0) = 1.0;
        x.row(i).tail(3) = cm.values.row(i);
        if (i % 3 == 0) m.sets.push_back({{id}, {}});
        else m.sets.back().control_ids.push_back(id);
    }
    const Eigen::VectorXd beta = (x.transpose() * x).inverse() * x.transpose() * yv;
    const Eigen::VectorXd resid = yv - x * beta;
    const auto sets = covariance_adjust(y, {m}, cm);
    for (int s = 0; s < n / 3; ++s)
        for (int j = 0; j < 3; ++j) EXPECT_NEAR(sets.sets[static_cast<std::size_t>(s)].responses[static_cast<std::size_t>(j)], resid(3 * s + j), 1e-8);
}

TEST(CovarianceAdjust, ManyToOneSetsPutControlFirstNegated) {
    CovariateMatrix cm;
    cm.names = {"a"};
    cm.values.resize(6, 1);
    CompositeOutcome y;
    Matching m;
    m.sets = {{{"t1", "t2"}, {"c1"}}, {{"t3"}, {"c2", "c3"}}};
    const char* ids[] = {"t1", "t2", "c1", "t3", "c2", "c3"};
    const double vals[] = {1, 2, 5, 3, 0, 1};
    for (int i = 0; i < 6; ++i) {
        cm.values(i, 0) = std::sin(5 * i);
        cm.row_of[ids[i]] = i;
        y.values[ids[i]] = vals[i];
    }
    const auto sets = covariance_adjust(y, {m}, cm);
    const auto plain = covariance_adjust(
        y, {Matching{AvailabilityPattern{}, {{{"c1"}, {"t1", "t2"}}, {{"t3"}, {"c2", "c3"}}}, 0, 0, {}}}, cm);
    EXPECT_NEAR(sets.sets[0].responses[0], -plain.sets[0].responses[0], 1e-12);
    EXPECT_NEAR(sets.sets[0].responses[1], -plain.sets[0].responses[1], 1e-12);
}

TEST(MantelHaenszelBound, GammaOneIsOrdinaryTest) {
    StratifiedTables st;
    st.tables = {{3, 1, 1, 3}, {2, 2, 0, 4}, {1, 0, 0, 1}, {4, 4, 4, 4}};
    EXPECT_EQ(mh_upper_bound(st, 1.0), mantel_haenszel_one_sided(st));
}

TEST(MantelHaenszelBound, SingleTableGammaThreeAgainstDirectDistribution) {
    const Table2x2 t{6, 2, 3, 5};
    StratifiedTables st;
    st.tables = {t};
    // Direct extended hypergeometric moments from the defining weights.
    const int n1 = 8, m1 = 9, n = 16;
    double w = 0.0, s1 = 0.0, s2 = 0.0;
    for (int k = std::max(0, n1 + m1 - n); k <= std::min(n1, m1); ++k) {
        const double wk = choose(m1, k) * choose(n - m1, n1 - k) * std::pow(3.0, k);
        w += wk;
        s1 += k * wk;
        s2 += k * k * wk;
    }
    const double mean = s1 / w, var = s2 / w - mean * mean;
    EXPECT_NEAR(mh_upper_bound(st, 3.0), stats::normal_sf((6.0 - mean) / std::sqrt(var)), 1e-12);
}

TEST(MantelHaenszelBound, MonotoneAndTendsToOne) {
    StratifiedTables st;
    std::mt19937_64 rng(6);
    std::uniform_int_distribution<int> u(0, 3);
    for (int i = 0; i < 40; ++i) st.tables.push_back({u(rng) + 1, u(rng), u(rng), u(rng) + 1});
    std::vector<double> grid;
    for (double g = 1.0; g <= 50.0; g *= 1.3) grid.push_back(g);
    const auto p = mh_upper_bound(st, grid);
    for (std::size_t i = 1; i < p.size(); ++i) EXPECT_GE(p[i], p[i - 1] - 1e-12);
    EXPECT_GT(p.back(), 0.999);
    StratifiedTables empty;
    empty.tables = {{1, 0, 1, 0}};
    EXPECT_THROW(mh_upper_bound(empty, 1.0), DegenerateError);
}

TEST(GammaStar, StepFunction) {
    const auto gs = find_gamma_star([](double g) { return g <= 2.5 ? 0.01 : 0.2; }, 0.025);
    ASSERT_TRUE(gs.value.has_value());
    EXPECT_NEAR(*gs.value, 2.50, 0.01);
    EXPECT_FALSE(gs.sensitive_at_one);
    EXPECT_FALSE(gs.exceeds_cap);
}

TEST(GammaStar, FlagsAndCap) {
    auto gs = find_gamma_star([](double) { return 0.3; }, 0.025);
    EXPECT_TRUE(gs.sensitive_at_one);
    EXPECT_FALSE(gs.value.has_value());
    gs = find_gamma_star([](double) { return 0.0; }, 0.025);
    EXPECT_TRUE(gs.exceeds_cap);
    EXPECT_DOUBLE_EQ(*gs.value, 20.0);
    EXPECT_THROW(find_gamma_star([](double g) { return g < 2.0 ? 0.0 : (g < 15.0 ? 0.5 : 0.3); }, 0.025),
                 NumericalError);
}

TEST(SensitivityResult, GridStartsAtOne) {
    GammaSpec spec;
    spec.grid = {1.5, 2.0};
    EXPECT_THROW(spec.validate(), ConfigError);
    spec.grid = {1.0, 2.0, 1.5};
    EXPECT_THROW(spec.validate(), ConfigError);
}
