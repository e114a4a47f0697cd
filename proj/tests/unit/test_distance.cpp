#include "matchkit/distance.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace matchkit;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = z(rng);
    return m;
}

std::vector<std::string> ids(const std::string& prefix, Eigen::Index n) {
    std::vector<std::string> v;
    for (Eigen::Index i = 0; i < n; ++i) v.push_back(prefix + std::to_string(i));
    return v;
}

} // namespace

TEST(RankTransform, AveragesTies) {
    Eigen::MatrixXd x(5, 1);
    x << 3, 1, 3, 2, 5;
    const auto r = rank_transform(x);
    EXPECT_DOUBLE_EQ(r(0, 0), 3.5);
    EXPECT_DOUBLE_EQ(r(1, 0), 1.0);
    EXPECT_DOUBLE_EQ(r(2, 0), 3.5);
    EXPECT_DOUBLE_EQ(r(3, 0), 2.0);
    EXPECT_DOUBLE_EQ(r(4, 0), 5.0);
}

TEST(RankTransform, RejectsNonFinite) {
    Eigen::MatrixXd x(2, 1);
    x << 1, std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(rank_transform(x), DataError);
}

TEST(RobustMahalanobis, BasicProperties) {
    const Eigen::MatrixXd a = random_matrix(6, 4, 1);
    const Eigen::MatrixXd b = random_matrix(9, 4, 2);
    const auto d = robust_mahalanobis(a, ids("t", 6), b, ids("c", 9));
    ASSERT_EQ(d.entries.rows(), 6);
    ASSERT_EQ(d.entries.cols(), 9);
    EXPECT_TRUE((d.entries.array() >= 0.0).all());
    const auto swapped = robust_mahalanobis(b, ids("c", 9), a, ids("t", 6));
    EXPECT_LT((swapped.entries.transpose() - d.entries).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(RobustMahalanobis, InvariantToMonotoneTransforms) {
    Eigen::MatrixXd a = random_matrix(5, 3, 3);
    Eigen::MatrixXd b = random_matrix(7, 3, 4);
    const auto d = robust_mahalanobis(a, ids("t", 5), b, ids("c", 7));
    a.col(1) = a.col(1).array().exp();
    b.col(1) = b.col(1).array().exp();
    a.col(2) = a.col(2).array().pow(3) * 100.0;
    b.col(2) = b.col(2).array().pow(3) * 100.0;
    const auto e = robust_mahalanobis(a, ids("t", 5), b, ids("c", 7));
    EXPECT_LT((d.entries - e.entries).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(RobustMahalanobis, IdenticalRowsHaveZeroDistance) {
    Eigen::MatrixXd a = random_matrix(3, 2, 5);
    Eigen::MatrixXd b = random_matrix(4, 2, 6);
    b.row(2) = a.row(1);
    const auto d = robust_mahalanobis(a, ids("t", 3), b, ids("c", 4));
    EXPECT_NEAR(d.entries(1, 2), 0.0, 1e-12);
}

TEST(RobustMahalanobis, CollinearCovariatesUsePseudoInverse) {
    Eigen::MatrixXd a = random_matrix(5, 2, 7);
    Eigen::MatrixXd b = random_matrix(5, 2, 8);
    Eigen::MatrixXd a3(5, 3), b3(5, 3);
    a3 << a, a.col(0) * 2.0;
    b3 << b, b.col(0) * 2.0;
    const auto d = robust_mahalanobis(a3, ids("t", 5), b3, ids("c", 5));
    EXPECT_TRUE(d.entries.allFinite());
}

TEST(RobustMahalanobis, SingleCovariateIsScaledRankDifference) {
    Eigen::MatrixXd a(2, 1), b(2, 1);
    a << 1, 4;
    b << 2, 3;
    const auto d = robust_mahalanobis(a, ids("t", 2), b, ids("c", 2));
    // Ranks 1,4 vs 2,3 out of n = 4; untied variance (16 - 1) / 12.
    const double var = 15.0 / 12.0;
    EXPECT_NEAR(d.entries(0, 0), 1.0 / var, 1e-12);
    EXPECT_NEAR(d.entries(1, 0), 4.0 / var, 1e-12);
}

TEST(Caliper, PenalizesOnlyBeyondWidth) {
    DistanceMatrix dm;
    dm.row_ids = {"t0"};
    dm.col_ids = {"c0", "c1"};
    dm.entries.resize(1, 2);
    dm.entries << 1.0, 1.0;
    PropensityModel pm;
    pm.ids = {"t0", "c0", "c1"};
    pm.logits.resize(3);
    pm.logits << 0.0, 0.1, 1.0;
    pm.logit_sd = 1.0;
    for (int i = 0; i < 3; ++i) pm.index[pm.ids[static_cast<std::size_t>(i)]] = i;
    CaliperSpec spec;
    spec.width_in_sd = 0.2;
    spec.penalty_per_sd = 10.0;
    const auto out = apply_caliper(dm, pm, spec);
    EXPECT_DOUBLE_EQ(out.entries(0, 0), 1.0);
    EXPECT_NEAR(out.entries(0, 1), 1.0 + 10.0 * 0.8, 1e-12);
    spec.width_in_sd = -1.0;
    EXPECT_THROW(apply_caliper(dm, pm, spec), ConfigError);
}

TEST(Propensity, FitsAndIndexesScores) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u;
    const int n = 400;
    Eigen::MatrixXd x(n, 1);
    std::vector<bool> treated;
    std::vector<std::string> id;
    for (int i = 0; i < n; ++i) {
        x(i, 0) = z(rng);
        treated.push_back(u(rng) < 1.0 / (1.0 + std::exp(-(0.5 + x(i, 0)))));
        id.push_back("s" + std::to_string(i));
    }
    const auto pm = fit_propensity(x, {"x"}, treated, id);
    EXPECT_NEAR(pm.fit.coefficient("x"), 1.0, 0.35);
    EXPECT_NEAR(pm.logit_of("s3"), pm.fit.coefficient("(intercept)") + pm.fit.coefficient("x") * x(3, 0), 1e-12);
    EXPECT_GT(pm.logit_sd, 0.0);
    EXPECT_THROW(pm.logit_of("missing"), DataError);
}

TEST(DistanceMatrix, WritesHeaderAndRows) {
    DistanceMatrix dm;
    dm.row_ids = {"t"};
    dm.col_ids = {"a", "b"};
    dm.entries.resize(1, 2);
    dm.entries << 0.5, 2.0;
    std::ostringstream os;
    write_distance_matrix(dm, os);
    EXPECT_EQ(os.str(), "id,a,b\nt,0.5,2\n");
}
