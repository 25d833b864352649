// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed

#include "thzce/baselines.hpp"

#include <algorithm>
#include <cmath>

namespace thzce {

double operator_norm(const Mat& m, double tol, int max_iter) {
    // Deterministic start vector; power iteration on M^T M.
    Vec v = Vec::Ones(m.cols()).normalized();
    double sigma = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        Vec w = m.transpose() * (m * v);
        const double nw = w.norm();
        if (nw == 0.0) return 0.0;
        w /= nw;
        const double next = std::sqrt(nw);
        if (std::abs(next - sigma) <= tol * std::max(1.0, next)) return next;
        sigma = next;
        v = w;
    }
    return sigma;
}

SolverReport solve_ls(const MeasurementEnsemble& ens, const Vec& y) {
    if (y.size() != ens.dim_y()) throw std::invalid_argument("solve_ls: bad y length");
    SolverReport rep;
    rep.estimate = ens.pseudo_inverse() * y;
    rep.residual_history.push_back((y - ens.real_operator() * rep.estimate).norm());
    rep.iterations_used = 0;
    return rep;
}

SolverReport solve_omp(const MeasurementEnsemble& ens, const Vec& y,
                       const OmpOptions& opt) {
    const Mat& m = ens.real_operator();
    if (y.size() != m.rows()) throw std::invalid_argument("solve_omp: bad y length");
    if (opt.sparsity < 1 || opt.sparsity > m.rows())
        throw std::invalid_argument("solve_omp: sparsity must be in [1, 2SQ]");

    SolverReport rep;
    rep.estimate = Vec::Zero(m.cols());
    const double y_norm = y.norm();
    rep.residual_history.push_back(y_norm);
    if (y_norm == 0.0) return rep;

    const Vec col_norms = m.colwise().norm();
    std::vector<int> support;
    support.reserve(opt.sparsity);
    // Orthonormal basis of the selected columns, built incrementally.
    Mat q_basis(m.rows(), opt.sparsity);
    Vec residual = y;

    for (int k = 0; k < opt.sparsity; ++k) {
        Vec corr = m.transpose() * residual;
        for (Eigen::Index j = 0; j < corr.size(); ++j)
            corr[j] = (col_norms[j] > 0) ? std::abs(corr[j]) / col_norms[j] : 0.0;
        for (int j : support) corr[j] = -1.0;
        int best = 0;
        corr.maxCoeff(&best);
        support.push_back(best);

        Vec v = m.col(best);
        for (int i = 0; i < k; ++i) v -= q_basis.col(i).dot(v) * q_basis.col(i);
        const double vn = v.norm();
        if (vn < 1e-12 * col_norms[best]) { // dependent column; stop growing
            support.pop_back();
            break;
        }
        q_basis.col(k) = v / vn;
        residual -= q_basis.col(k).dot(residual) * q_basis.col(k);

        rep.residual_history.push_back(residual.norm());
        rep.iterations_used = k + 1;
        if (opt.record_iterates || residual.norm() <= opt.residual_tol * y_norm ||
            k + 1 == opt.sparsity) {
            // Least-squares refit on the support.
            Mat sub(m.rows(), static_cast<Eigen::Index>(support.size()));
            for (std::size_t i = 0; i < support.size(); ++i) sub.col(i) = m.col(support[i]);
            Vec coef = sub.colPivHouseholderQr().solve(y);
            Vec est = Vec::Zero(m.cols());
            for (std::size_t i = 0; i < support.size(); ++i) est[support[i]] = coef[i];
            rep.estimate = est;
            if (opt.record_iterates) rep.iterates.push_back(est);
        }
        if (residual.norm() <= opt.residual_tol * y_norm) break;
    }
    return rep;
}

SolverReport solve_fista(const MeasurementEnsemble& ens, const Vec& y,
                         const FistaOptions& opt) {
    const Mat& m = ens.real_operator();
    if (y.size() != m.rows()) throw std::invalid_argument("solve_fista: bad y length");

    double lambda = opt.lambda;
    if (lambda <= 0.0) {
        const double linf = (m.transpose() * y).cwiseAbs().maxCoeff();
        lambda = opt.lambda_rel * linf;
    }
    if (lambda <= 0.0) throw std::invalid_argument("solve_fista: lambda must be positive");

    const double lip = std::pow(operator_norm(m), 2);
    const double step = 1.0 / lip;

    auto objective = [&](const Vec& h) {
        return 0.5 * (y - m * h).squaredNorm() + lambda * h.lpNorm<1>();
    };

    SolverReport rep;
    Vec x = Vec::Zero(m.cols());
    Vec z = x; // extrapolated point
    double t = 1.0;
    double prev_obj = objective(x);
    rep.residual_history.push_back(y.norm());

    for (int it = 0; it < opt.max_iter; ++it) {
        Vec grad = m.transpose() * (m * z - y);
        Vec x_next = z - step * grad;
        for (Eigen::Index j = 0; j < x_next.size(); ++j)
            x_next[j] = soft_threshold(x_next[j], lambda * step);

        const double obj = objective(x_next);
        if (obj > prev_obj) { // adaptive restart: drop momentum
            t = 1.0;
            z = x;
            grad = m.transpose() * (m * z - y);
            x_next = z - step * grad;
            for (Eigen::Index j = 0; j < x_next.size(); ++j)
                x_next[j] = soft_threshold(x_next[j], lambda * step);
        }

        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        z = x_next + ((t - 1.0) / t_next) * (x_next - x);
        const double change = (x_next - x).norm() / std::max(1e-30, x_next.norm());
        x = x_next;
        t = t_next;
        prev_obj = objective(x);

        rep.iterations_used = it + 1;
        rep.residual_history.push_back((y - m * x).norm());
        if (opt.record_iterates) rep.iterates.push_back(x);
        if (change < opt.tol) break;
    }
    rep.estimate = x;
    return rep;
}

SolverReport solve_oamp(const MeasurementEnsemble& ens, const Vec& y,
                        double noise_var, const OampOptions& opt) {
    (void)noise_var; // threshold is driven by the measured residual
    const Mat& m = ens.real_operator();
    if (y.size() != m.rows()) throw std::invalid_argument("solve_oamp: bad y length");

    SolverReport rep;
    Vec h = Vec::Zero(m.cols());
    rep.residual_history.push_back(y.norm());

    for (int it = 0; it < opt.max_iter; ++it) {
        // Pseudoinverse LE. The eta-scaled de-correlated step used inside the
        // fixed-point estimator overshoots (spectral radius 1) and needs a
        // matched learned denoiser to be stable; the classical baseline keeps
        // the plain projection step instead.
        const Vec residual = y - m * h;
        const Vec u = h + ens.pseudo_inverse() * residual;
        const double sigma_hat =
            std::sqrt(residual.squaredNorm() / static_cast<double>(m.rows()));
        const double tau = opt.kappa * sigma_hat;

        Vec h_next(u.size());
        for (Eigen::Index j = 0; j < u.size(); ++j)
            h_next[j] = soft_threshold(u[j], tau);

        const double change = (h_next - h).norm() / std::max(1e-30, h_next.norm());
        h = h_next;
        rep.iterations_used = it + 1;
        rep.residual_history.push_back((y - m * h).norm());
        if (opt.record_iterates) rep.iterates.push_back(h);
        if (change < opt.tol) break;
    }
    rep.estimate = h;
    return rep;
}

} // namespace thzce
