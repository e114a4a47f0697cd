#pragma once

// Rank-based robust Mahalanobis distances and the propensity-score caliper.

#include "matchkit/error.hpp"
#include "matchkit/glm.hpp"
#include "matchkit/stats.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

namespace matchkit {

struct DistanceMatrix {
    std::vector<std::string> row_ids;  // group A
    std::vector<std::string> col_ids;  // group B
    Eigen::MatrixXd entries;

    double mean_entry() const {
        double s = 0.0;
        std::size_t n = 0;
        for (Eigen::Index i = 0; i < entries.rows(); ++i)
            for (Eigen::Index j = 0; j < entries.cols(); ++j)
                if (std::isfinite(entries(i, j))) {
                    s += entries(i, j);
                    ++n;
                }
        return n ? s / static_cast<double>(n) : 0.0;
    }
};

// Column-wise ranks, ties averaged.
inline Eigen::MatrixXd rank_transform(const Eigen::MatrixXd& x) {
    if (!x.allFinite()) throw DataError("rank transform: covariates contain missing values");
    Eigen::MatrixXd r(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const Eigen::VectorXd col = x.col(j);
        const auto ranks = stats::average_ranks(std::span<const double>(col.data(), static_cast<std::size_t>(col.size())));
        for (Eigen::Index i = 0; i < x.rows(); ++i) r(i, j) = ranks[static_cast<std::size_t>(i)];
    }
    return r;
}

// Covariance of the ranks (denominator n) with the diagonal rescaled to the
// untied-rank variance (n^2 - 1)/12, keeping the correlations.
inline Eigen::MatrixXd robust_rank_covariance(const Eigen::MatrixXd& ranks) {
    const auto n = static_cast<double>(ranks.rows());
    const Eigen::RowVectorXd mean = ranks.colwise().mean();
    const Eigen::MatrixXd centered = ranks.rowwise() - mean;
    Eigen::MatrixXd cov = centered.transpose() * centered / n;
    const double untied = (n * n - 1.0) / 12.0;
    Eigen::VectorXd scale(cov.rows());
    for (Eigen::Index j = 0; j < cov.rows(); ++j) scale(j) = cov(j, j) > 0 ? std::sqrt(untied / cov(j, j)) : 0.0;
    return scale.asDiagonal() * cov * scale.asDiagonal();
}

// Factor W with W W^T equal to the Moore-Penrose pseudo-inverse of a
// symmetric positive semidefinite matrix.
inline Eigen::MatrixXd pseudo_inverse_factor(const Eigen::MatrixXd& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    if (es.info() != Eigen::Success) throw NumericalError("eigen decomposition of rank covariance failed");
    const Eigen::VectorXd& ev = es.eigenvalues();
    const double cutoff = std::max(ev.cwiseAbs().maxCoeff(), 1.0) * 1e-10 * static_cast<double>(s.rows());
    std::vector<Eigen::Index> keep;
    for (Eigen::Index k = 0; k < ev.size(); ++k)
        if (ev(k) > cutoff) keep.push_back(k);
    Eigen::MatrixXd w(s.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t c = 0; c < keep.size(); ++c)
        w.col(static_cast<Eigen::Index>(c)) = es.eigenvectors().col(keep[c]) / std::sqrt(ev(keep[c]));
    return w;
}

// Squared robust Mahalanobis distance between every row of `a` and every row
// of `b`; ranks and their covariance are computed over both groups together.
inline DistanceMatrix robust_mahalanobis(const Eigen::MatrixXd& a, const std::vector<std::string>& a_ids,
                                         const Eigen::MatrixXd& b, const std::vector<std::string>& b_ids) {
    if (a.cols() != b.cols()) throw DataError("robust Mahalanobis: groups have different covariate counts");
    if (a.cols() < 1) throw DataError("robust Mahalanobis: no covariates");
    if (a.rows() + b.rows() < 2) throw DataError("robust Mahalanobis: fewer than two subjects");
    if (static_cast<Eigen::Index>(a_ids.size()) != a.rows() || static_cast<Eigen::Index>(b_ids.size()) != b.rows())
        throw DataError("robust Mahalanobis: id count does not match rows");

    Eigen::MatrixXd all(a.rows() + b.rows(), a.cols());
    all.topRows(a.rows()) = a;
    all.bottomRows(b.rows()) = b;
    const Eigen::MatrixXd ranks = rank_transform(all);
    const Eigen::MatrixXd w = pseudo_inverse_factor(robust_rank_covariance(ranks));
    const Eigen::MatrixXd z = ranks * w;

    DistanceMatrix dm;
    dm.row_ids = a_ids;
    dm.col_ids = b_ids;
    dm.entries.resize(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < b.rows(); ++j)
            dm.entries(i, j) = (z.row(i) - z.row(a.rows() + j)).squaredNorm();
    return dm;
}

struct PropensityModel {
    GlmFit fit;
    std::vector<std::string> ids;
    Eigen::VectorXd scores;
    Eigen::VectorXd logits;
    double logit_sd = 0.0;
    std::unordered_map<std::string, Eigen::Index> index;

    double logit_of(const std::string& id) const {
        const auto it = index.find(id);
        if (it == index.end()) throw DataError("no propensity score for subject " + id);
        return logits(it->second);
    }
};

// Logistic propensity model on the given covariates (intercept added).
inline PropensityModel fit_propensity(const Eigen::MatrixXd& covariates, const std::vector<std::string>& names,
                                      const std::vector<bool>& treated, const std::vector<std::string>& ids) {
    if (static_cast<Eigen::Index>(treated.size()) != covariates.rows() ||
        static_cast<Eigen::Index>(ids.size()) != covariates.rows())
        throw DataError("propensity model: inconsistent input sizes");
    DesignMatrix d;
    d.x.resize(covariates.rows(), covariates.cols() + 1);
    d.x.col(0).setOnes();
    d.x.rightCols(covariates.cols()) = covariates;
    d.names.push_back("(intercept)");
    d.names.insert(d.names.end(), names.begin(), names.end());
    d.y.resize(covariates.rows());
    for (Eigen::Index i = 0; i < d.y.size(); ++i) d.y(i) = treated[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

    PropensityModel pm;
    pm.fit = fit_logistic(d);
    const auto kept = [&] {
        std::vector<Eigen::Index> cols;
        for (const auto& nm : pm.fit.names)
            for (std::size_t k = 0; k < d.names.size(); ++k)
                if (d.names[k] == nm) cols.push_back(static_cast<Eigen::Index>(k));
        return cols;
    }();
    pm.logits = detail::select_columns(d.x, kept) * pm.fit.coefficients;
    pm.scores = pm.logits.unaryExpr([](double e) { return detail::logistic(e); });
    pm.ids = ids;
    for (std::size_t i = 0; i < ids.size(); ++i) pm.index.emplace(ids[i], static_cast<Eigen::Index>(i));
    const std::vector<double> lg(pm.logits.data(), pm.logits.data() + pm.logits.size());
    pm.logit_sd = std::sqrt(stats::variance(lg));
    return pm;
}

struct CaliperSpec {
    double width_in_sd = 0.2;
    // Penalty per standard deviation of violation; when unset it is
    // `penalty_multiplier` times the mean finite distance of the matrix.
    std::optional<double> penalty_per_sd;
    double penalty_multiplier = 1000.0;

    void validate() const {
        if (!(width_in_sd >= 0.0)) throw ConfigError("caliper width must be nonnegative");
        if (penalty_per_sd && !(*penalty_per_sd > 0.0)) throw ConfigError("caliper penalty must be positive");
        if (!(penalty_multiplier > 0.0)) throw ConfigError("caliper penalty multiplier must be positive");
    }

    double resolve_penalty(const DistanceMatrix& dm) const {
        if (penalty_per_sd) return *penalty_per_sd;
        const double m = dm.mean_entry();
        return penalty_multiplier * (m > 0 ? m : 1.0);
    }
};

// Soft caliper: entries whose logit difference exceeds width * sd gain
// penalty * (|difference| / sd - width).
inline DistanceMatrix apply_caliper(const DistanceMatrix& dm, const PropensityModel& prop, const CaliperSpec& spec) {
    spec.validate();
    DistanceMatrix out = dm;
    if (!(prop.logit_sd > 0.0)) return out;
    const double penalty = spec.resolve_penalty(dm);
    std::vector<double> la, lb;
    for (const auto& id : dm.row_ids) la.push_back(prop.logit_of(id));
    for (const auto& id : dm.col_ids) lb.push_back(prop.logit_of(id));
    for (std::size_t i = 0; i < la.size(); ++i)
        for (std::size_t j = 0; j < lb.size(); ++j) {
            const double sds = std::fabs(la[i] - lb[j]) / prop.logit_sd;
            if (sds > spec.width_in_sd)
                out.entries(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += penalty * (sds - spec.width_in_sd);
        }
    return out;
}

inline void write_distance_matrix(const DistanceMatrix& dm, std::ostream& os, char delim = ',') {
    os << "id";
    for (const auto& c : dm.col_ids) os << delim << c;
    os << '\n';
    char buf[64];
    for (Eigen::Index i = 0; i < dm.entries.rows(); ++i) {
        os << dm.row_ids[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < dm.entries.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.10g", dm.entries(i, j));
            os << delim << buf;
        }
        os << '\n';
    }
}

} // namespace matchkit
