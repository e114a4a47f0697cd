#pragma once

// Least squares, logistic regression by iteratively reweighted least squares
// and conditional logistic regression for matched strata.

#include "matchkit/error.hpp"
#include "matchkit/stats.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace matchkit {

struct DesignMatrix {
    Eigen::MatrixXd x;
    std::vector<std::string> names;
    Eigen::VectorXd y;
    std::vector<int> strata;  // empty unless grouped
    Eigen::VectorXd weights;  // empty means unit weights

    void validate() const {
        if (x.cols() < 1) throw DataError("design matrix has no columns");
        if (static_cast<Eigen::Index>(names.size()) != x.cols())
            throw DataError("design matrix column names do not match column count");
        if (x.rows() != y.size()) throw DataError("design matrix rows do not match response length");
        if (!strata.empty() && static_cast<Eigen::Index>(strata.size()) != x.rows())
            throw DataError("strata labels do not match row count");
        if (weights.size() != 0 && weights.size() != x.rows())
            throw DataError("weights do not match row count");
        if (!x.allFinite() || !y.allFinite()) throw DataError("design matrix contains missing or non-finite values");
        if (weights.size() != 0 && (weights.array() < 0.0).any()) throw DataError("negative weights");
    }

    Eigen::VectorXd unit_weights() const {
        return weights.size() != 0 ? weights : Eigen::VectorXd::Ones(x.rows());
    }
};

struct GlmFit {
    std::vector<std::string> names;
    Eigen::VectorXd coefficients;
    Eigen::VectorXd standard_errors;
    Eigen::VectorXd statistics;
    Eigen::VectorXd p_values;
    Eigen::MatrixXd covariance;
    double log_likelihood = std::numeric_limits<double>::quiet_NaN();
    double rss = std::numeric_limits<double>::quiet_NaN();
    // Residual degrees of freedom; infinite for normal-reference Wald tests.
    double df_residual = std::numeric_limits<double>::infinity();
    bool converged = false;
    int iterations = 0;
    Eigen::VectorXd residuals;
    Eigen::VectorXd fitted;
    std::vector<std::string> dropped;
    std::vector<std::string> warnings;
    std::vector<double> loglik_trace;
    std::size_t n_used = 0;
    std::size_t n_uninformative_strata = 0;

    std::optional<Eigen::Index> index(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return static_cast<Eigen::Index>(i);
        return std::nullopt;
    }

    Eigen::Index require(const std::string& name) const {
        const auto i = index(name);
        if (!i) throw NumericalError("coefficient '" + name + "' is not in the fit (dropped as collinear?)");
        return *i;
    }

    double coefficient(const std::string& name) const { return coefficients(require(name)); }
    double std_error(const std::string& name) const { return standard_errors(require(name)); }
    double p_value(const std::string& name) const { return p_values(require(name)); }
};

namespace detail {

// Indices of columns kept after sequential (modified Gram-Schmidt) pruning:
// a column is dropped when its component orthogonal to the kept columns is
// below `tol` relative to its own norm. Later columns are dropped first.
inline std::vector<Eigen::Index> independent_columns(const Eigen::MatrixXd& x, double tol = 1e-9) {
    std::vector<Eigen::Index> kept;
    std::vector<Eigen::VectorXd> basis;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        Eigen::VectorXd v = x.col(j);
        const double norm0 = v.norm();
        if (norm0 == 0.0 || !std::isfinite(norm0)) continue;
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& q : basis) v -= q.dot(v) * q;
        const double r = v.norm();
        if (r <= tol * norm0) continue;
        basis.push_back(v / r);
        kept.push_back(j);
    }
    return kept;
}

inline Eigen::MatrixXd select_columns(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& cols) {
    Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = x.col(cols[k]);
    return out;
}

inline void split_names(const std::vector<std::string>& all, const std::vector<Eigen::Index>& kept,
                        std::vector<std::string>& kept_names, std::vector<std::string>& dropped) {
    std::vector<bool> keep(all.size(), false);
    for (auto k : kept) keep[static_cast<std::size_t>(k)] = true;
    for (std::size_t i = 0; i < all.size(); ++i) (keep[i] ? kept_names : dropped).push_back(all[i]);
}

inline double softplus(double eta) { return eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)); }

inline double logistic(double eta) {
    if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
    const double e = std::exp(eta);
    return e / (1.0 + e);
}

inline Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& a, const char* what) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
        throw NumericalError(std::string(what) + ": information matrix is not positive definite");
    return ldlt.solve(Eigen::MatrixXd::Identity(a.rows(), a.cols()));
}

// Subtracts weighted group means from every column and from y.
inline void demean_within(Eigen::MatrixXd& x, Eigen::VectorXd& y, const std::vector<int>& groups,
                          const Eigen::VectorXd& w) {
    std::map<int, std::vector<Eigen::Index>> members;
    for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(static_cast<Eigen::Index>(i));
    for (const auto& [g, rows] : members) {
        double wsum = 0.0;
        for (auto i : rows) wsum += w(i);
        if (wsum <= 0.0) continue;
        Eigen::RowVectorXd mx = Eigen::RowVectorXd::Zero(x.cols());
        double my = 0.0;
        for (auto i : rows) {
            mx += w(i) * x.row(i);
            my += w(i) * y(i);
        }
        mx /= wsum;
        my /= wsum;
        for (auto i : rows) {
            x.row(i) -= mx;
            y(i) -= my;
        }
    }
}

inline std::size_t count_groups(const std::vector<int>& groups) {
    std::vector<int> g(groups);
    std::sort(g.begin(), g.end());
    return static_cast<std::size_t>(std::unique(g.begin(), g.end()) - g.begin());
}

} // namespace detail

struct OlsOptions {
    // Absorb the strata as fixed effects by within-group demeaning instead of
    // explicit indicator columns.
    bool absorb_strata = false;
    // Columns whose removal for collinearity is an error.
    std::vector<std::string> required;
};

inline GlmFit fit_ols(const DesignMatrix& d, const OlsOptions& opt = {}) {
    d.validate();
    Eigen::MatrixXd x = d.x;
    Eigen::VectorXd y = d.y;
    const Eigen::VectorXd w = d.unit_weights();
    std::size_t absorbed = 0;
    if (opt.absorb_strata) {
        if (d.strata.empty()) throw DataError("absorbing strata requires strata labels");
        detail::demean_within(x, y, d.strata, w);
        absorbed = detail::count_groups(d.strata);
        for (Eigen::Index j = 0; j < x.cols(); ++j)
            if (x.col(j).norm() <= 1e-10 * d.x.col(j).norm()) x.col(j).setZero();
    }
    const Eigen::VectorXd sw = w.array().sqrt();
    const Eigen::MatrixXd xw = sw.asDiagonal() * x;
    const Eigen::VectorXd yw = sw.asDiagonal() * y;

    // After demeaning, the intercept and any column constant within groups
    // vanish and are pruned here.
    const auto kept = detail::independent_columns(xw);
    GlmFit fit;
    detail::split_names(d.names, kept, fit.names, fit.dropped);
    for (const auto& r : opt.required)
        if (std::find(fit.dropped.begin(), fit.dropped.end(), r) != fit.dropped.end())
            throw NumericalError("column '" + r + "' is collinear with the other predictors");
    for (const auto& name : fit.dropped) fit.warnings.push_back("dropped collinear column: " + name);

    const Eigen::MatrixXd xk = detail::select_columns(xw, kept);
    const auto n = static_cast<double>(d.x.rows());
    const auto k = static_cast<double>(kept.size());
    const double df = n - k - static_cast<double>(absorbed);
    if (df <= 0) throw NumericalError("least squares: not enough rows for the number of parameters");

    Eigen::HouseholderQR<Eigen::MatrixXd> qr(xk);
    fit.coefficients = qr.solve(yw);
    const Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(xk.cols(), xk.cols()).triangularView<Eigen::Upper>();
    const Eigen::MatrixXd rinv =
        r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(xk.cols(), xk.cols()));
    const Eigen::MatrixXd xtx_inv = rinv * rinv.transpose();

    const Eigen::MatrixXd xorig = detail::select_columns(x, kept);
    fit.fitted = xorig * fit.coefficients;
    fit.residuals = y - fit.fitted;
    fit.rss = (sw.asDiagonal() * fit.residuals).squaredNorm();
    fit.df_residual = df;
    const double sigma2 = fit.rss / df;
    fit.covariance = sigma2 * xtx_inv;
    fit.standard_errors = fit.covariance.diagonal().array().sqrt();
    fit.statistics.resize(fit.coefficients.size());
    fit.p_values.resize(fit.coefficients.size());
    for (Eigen::Index j = 0; j < fit.coefficients.size(); ++j) {
        const double se = fit.standard_errors(j);
        if (se > 0) {
            fit.statistics(j) = fit.coefficients(j) / se;
            fit.p_values(j) = stats::two_sided_t_p(fit.statistics(j), df);
        } else {
            // Exact fit: the coefficient is determined without error.
            fit.statistics(j) = fit.coefficients(j) == 0.0 ? 0.0 : std::copysign(INFINITY, fit.coefficients(j));
            fit.p_values(j) = fit.coefficients(j) == 0.0 ? 1.0 : 0.0;
        }
    }
    fit.converged = true;
    fit.iterations = 1;
    fit.n_used = static_cast<std::size_t>(d.x.rows());
    return fit;
}

struct NewtonOptions {
    int max_iterations = 50;
    double tolerance = 1e-8;           // on the max absolute coefficient change
    double separation_threshold = 15;  // on standardized coefficients
};

namespace detail {

// Largest coefficient magnitude on the scale of standardized predictors.
inline double max_standardized(const Eigen::VectorXd& beta, const Eigen::VectorXd& col_sd) {
    double m = 0.0;
    for (Eigen::Index j = 0; j < beta.size(); ++j) m = std::max(m, std::fabs(beta(j)) * col_sd(j));
    return m;
}

inline Eigen::VectorXd column_sd(const Eigen::MatrixXd& x) {
    Eigen::VectorXd sd(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const double m = x.col(j).mean();
        const double v = (x.col(j).array() - m).square().sum() / std::max<double>(1.0, static_cast<double>(x.rows()) - 1.0);
        sd(j) = v > 0 ? std::sqrt(v) : 1.0;  // constant column: intercept scale
    }
    return sd;
}

// Shared Newton-Raphson driver with step halving. `eval` returns the
// log-likelihood and fills gradient and negative Hessian.
template <class Eval>
void newton_maximize(Eigen::VectorXd& beta, const Eigen::VectorXd& col_sd, const NewtonOptions& opt, Eval&& eval,
                     GlmFit& fit, const char* what) {
    Eigen::VectorXd grad;
    Eigen::MatrixXd info;
    double ll = eval(beta, grad, info);
    fit.loglik_trace.push_back(ll);
    double prev_step = std::numeric_limits<double>::infinity();
    for (int it = 1; it <= opt.max_iterations; ++it) {
        fit.iterations = it;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
            throw NumericalError(std::string(what) + ": information matrix is not positive definite");
        const Eigen::VectorXd step = ldlt.solve(grad);
        double scale = 1.0;
        Eigen::VectorXd trial;
        Eigen::VectorXd g2;
        Eigen::MatrixXd i2;
        double ll2 = -INFINITY;
        for (int half = 0; half < 40; ++half) {
            trial = beta + scale * step;
            ll2 = eval(trial, g2, i2);
            if (std::isfinite(ll2) && ll2 >= ll - 1e-12 * (1.0 + std::fabs(ll))) break;
            scale *= 0.5;
        }
        if (!(ll2 >= ll - 1e-12 * (1.0 + std::fabs(ll)))) {
            // No ascent direction left at working precision.
            fit.converged = step.cwiseAbs().maxCoeff() < 1e-6;
            break;
        }
        const double change = (trial - beta).cwiseAbs().maxCoeff();
        beta = trial;
        ll = std::max(ll, ll2);
        grad = g2;
        info = i2;
        fit.loglik_trace.push_back(ll2);

        const double stepsize = (scale * step).cwiseProduct(col_sd).cwiseAbs().maxCoeff();
        if (max_standardized(beta, col_sd) > opt.separation_threshold && stepsize >= 0.5 * prev_step)
            throw SeparationError(std::string(what) +
                                  ": coefficients diverge (perfect or quasi-complete separation); the MLE does not exist");
        prev_step = stepsize;
        if (change < opt.tolerance) {
            fit.converged = true;
            break;
        }
    }
    if (!fit.converged && max_standardized(beta, col_sd) > opt.separation_threshold)
        throw SeparationError(std::string(what) + ": no convergence with diverging coefficients (separation)");
    if (!fit.converged) fit.warnings.push_back(std::string(what) + ": did not converge");
    fit.log_likelihood = ll;
}

inline void wald_summary(GlmFit& fit, const Eigen::MatrixXd& info, const char* what) {
    fit.covariance = spd_inverse(info, what);
    fit.standard_errors = fit.covariance.diagonal().array().sqrt();
    fit.statistics = fit.coefficients.array() / fit.standard_errors.array();
    fit.p_values.resize(fit.coefficients.size());
    for (Eigen::Index j = 0; j < fit.coefficients.size(); ++j)
        fit.p_values(j) = stats::two_sided_normal_p(fit.statistics(j));
}

inline void check_binary(const Eigen::VectorXd& y, const char* what) {
    for (Eigen::Index i = 0; i < y.size(); ++i)
        if (y(i) != 0.0 && y(i) != 1.0) throw DataError(std::string(what) + ": response must be 0/1");
}

} // namespace detail

inline GlmFit fit_logistic(const DesignMatrix& d, const NewtonOptions& opt = {}) {
    d.validate();
    detail::check_binary(d.y, "logistic regression");
    const Eigen::VectorXd w = d.unit_weights();
    const double wy = (w.array() * d.y.array()).sum();
    if (wy <= 0.0 || wy >= w.sum())
        throw DegenerateError("logistic regression: response is constant");

    const auto kept = detail::independent_columns(w.array().sqrt().matrix().asDiagonal() * d.x);
    GlmFit fit;
    detail::split_names(d.names, kept, fit.names, fit.dropped);
    for (const auto& name : fit.dropped) fit.warnings.push_back("dropped collinear column: " + name);
    const Eigen::MatrixXd x = detail::select_columns(d.x, kept);
    const Eigen::VectorXd col_sd = detail::column_sd(x);

    const auto eval = [&](const Eigen::VectorXd& beta, Eigen::VectorXd& grad, Eigen::MatrixXd& info) {
        const Eigen::VectorXd eta = x * beta;
        Eigen::VectorXd resid(eta.size());
        Eigen::VectorXd wts(eta.size());
        double ll = 0.0;
        for (Eigen::Index i = 0; i < eta.size(); ++i) {
            const double p = detail::logistic(eta(i));
            ll += w(i) * (d.y(i) * eta(i) - detail::softplus(eta(i)));
            resid(i) = w(i) * (d.y(i) - p);
            wts(i) = w(i) * p * (1.0 - p);
        }
        grad = x.transpose() * resid;
        info = x.transpose() * wts.asDiagonal() * x;
        return ll;
    };

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(x.cols());
    detail::newton_maximize(beta, col_sd, opt, eval, fit, "logistic regression");
    fit.coefficients = beta;
    Eigen::VectorXd grad;
    Eigen::MatrixXd info;
    eval(beta, grad, info);
    detail::wald_summary(fit, info, "logistic regression");
    fit.fitted = (x * beta).unaryExpr([](double e) { return detail::logistic(e); });
    fit.residuals = d.y - fit.fitted;
    fit.n_used = static_cast<std::size_t>(d.x.rows());
    return fit;
}

// Maximizes the likelihood conditional on the number of cases in each
// stratum. Strata without both outcome values carry no information and are
// dropped (counted in n_uninformative_strata). Predictors are centered
// within strata, which leaves the conditional likelihood unchanged; columns
// constant within every stratum vanish and are dropped with a warning.
inline GlmFit fit_conditional_logistic(const DesignMatrix& d, const NewtonOptions& opt = {}) {
    d.validate();
    if (d.strata.empty()) throw DataError("conditional logistic regression requires strata");
    detail::check_binary(d.y, "conditional logistic regression");

    std::map<int, std::vector<Eigen::Index>> members;
    for (std::size_t i = 0; i < d.strata.size(); ++i) members[d.strata[i]].push_back(static_cast<Eigen::Index>(i));
    GlmFit fit;
    std::vector<std::vector<Eigen::Index>> strata;
    for (auto& [label, rows] : members) {
        double cases = 0.0;
        for (auto i : rows) cases += d.y(i);
        if (rows.size() < 2 || cases == 0.0 || cases == static_cast<double>(rows.size()))
            ++fit.n_uninformative_strata;
        else
            strata.push_back(rows);
    }
    if (strata.empty()) throw DegenerateError("conditional logistic regression: all strata are uninformative");

    std::size_t n_rows = 0;
    for (const auto& s : strata) n_rows += s.size();
    Eigen::MatrixXd xc(static_cast<Eigen::Index>(n_rows), d.x.cols());
    Eigen::VectorXd yc(static_cast<Eigen::Index>(n_rows));
    std::vector<std::pair<Eigen::Index, Eigen::Index>> spans;
    Eigen::Index pos = 0;
    for (const auto& s : strata) {
        const Eigen::Index start = pos;
        Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(d.x.cols());
        for (auto i : s) mean += d.x.row(i);
        mean /= static_cast<double>(s.size());
        for (auto i : s) {
            xc.row(pos) = d.x.row(i) - mean;
            yc(pos) = d.y(i);
            ++pos;
        }
        spans.emplace_back(start, pos);
    }
    // Round-off from centering a constant column is not signal.
    for (Eigen::Index j = 0; j < xc.cols(); ++j) {
        const double scale = d.x.col(j).cwiseAbs().maxCoeff();
        if (xc.col(j).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, scale)) xc.col(j).setZero();
    }

    const auto kept = detail::independent_columns(xc);
    detail::split_names(d.names, kept, fit.names, fit.dropped);
    for (const auto& name : fit.dropped)
        fit.warnings.push_back("dropped column constant within strata or collinear: " + name);
    if (kept.empty()) throw DegenerateError("conditional logistic regression: no predictor varies within strata");
    const Eigen::MatrixXd x = detail::select_columns(xc, kept);
    const Eigen::Index p = x.cols();
    const Eigen::VectorXd col_sd = detail::column_sd(x);

    // Per stratum, the denominator is the elementary symmetric polynomial of
    // order m (number of cases) in r_j = exp(eta_j); it and its first two
    // derivatives follow the recursion B_j[k] = B_{j-1}[k] + r_j B_{j-1}[k-1].
    const auto eval = [&](const Eigen::VectorXd& beta, Eigen::VectorXd& grad, Eigen::MatrixXd& info) {
        grad = Eigen::VectorXd::Zero(p);
        info = Eigen::MatrixXd::Zero(p, p);
        double ll = 0.0;
        for (const auto& [start, end] : spans) {
            const Eigen::Index n = end - start;
            int m = 0;
            for (Eigen::Index i = start; i < end; ++i) m += static_cast<int>(yc(i));
            std::vector<double> b(static_cast<std::size_t>(m + 1), 0.0);
            std::vector<Eigen::VectorXd> db(static_cast<std::size_t>(m + 1), Eigen::VectorXd::Zero(p));
            std::vector<Eigen::MatrixXd> d2b(static_cast<std::size_t>(m + 1), Eigen::MatrixXd::Zero(p, p));
            b[0] = 1.0;
            for (Eigen::Index j = 0; j < n; ++j) {
                const Eigen::VectorXd xj = x.row(start + j).transpose();
                const double r = std::exp(xj.dot(beta));
                for (int k = std::min<int>(m, static_cast<int>(j) + 1); k >= 1; --k) {
                    const auto ku = static_cast<std::size_t>(k);
                    d2b[ku] += r * (xj * xj.transpose() * b[ku - 1] + xj * db[ku - 1].transpose() +
                                    db[ku - 1] * xj.transpose() + d2b[ku - 1]);
                    db[ku] += r * (xj * b[ku - 1] + db[ku - 1]);
                    b[ku] += r * b[ku - 1];
                }
            }
            const auto mu = static_cast<std::size_t>(m);
            for (Eigen::Index i = start; i < end; ++i)
                if (yc(i) == 1.0) {
                    ll += x.row(i).dot(beta);
                    grad += x.row(i).transpose();
                }
            const Eigen::VectorXd g = db[mu] / b[mu];
            ll -= std::log(b[mu]);
            grad -= g;
            info += d2b[mu] / b[mu] - g * g.transpose();
        }
        return ll;
    };

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    detail::newton_maximize(beta, col_sd, opt, eval, fit, "conditional logistic regression");
    fit.coefficients = beta;
    Eigen::VectorXd grad;
    Eigen::MatrixXd info;
    eval(beta, grad, info);
    detail::wald_summary(fit, info, "conditional logistic regression");
    fit.n_used = n_rows;
    return fit;
}

} // namespace matchkit
