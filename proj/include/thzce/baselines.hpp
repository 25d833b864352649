// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed
//
// Classical estimators used as benchmarks: least squares, orthogonal matching
// pursuit, FISTA and OAMP with the pseudoinverse LE.

#pragma once

#include "thzce/common.hpp"
#include "thzce/measurement.hpp"

#include <vector>

namespace thzce {

struct SolverReport {
    Vec estimate;                 // h_hat
    std::vector<Vec> iterates;    // optional per-iteration estimates
    std::vector<double> residual_history; // ||y - M h_t||
    int iterations_used = 0;
};

struct OmpOptions {
    int sparsity = 64;
    double residual_tol = 1e-3; // stop once ||r|| <= tol * ||y||
    bool record_iterates = false;
};

struct FistaOptions {
    double lambda = 0.0;     // absolute l1 weight; 0 = derive from lambda_rel
    double lambda_rel = 1e-2; // lambda = lambda_rel * ||M^T y||_inf
    int max_iter = 100;
    double tol = 1e-6;       // relative iterate change
    bool record_iterates = false;
};

struct OampOptions {
    double kappa = 1.1;      // threshold scale tau_t = kappa * sigma_hat_t
    int max_iter = 20;
    double tol = 1e-6;
    bool record_iterates = false;
};

// Minimum-norm least squares, h = pinv(M) y.
SolverReport solve_ls(const MeasurementEnsemble& ens, const Vec& y);

// Greedy column selection with per-step least-squares refit.
SolverReport solve_omp(const MeasurementEnsemble& ens, const Vec& y,
                       const OmpOptions& opt);

// min 0.5||y - Mh||^2 + lambda ||h||_1 with Nesterov momentum and adaptive
// restart; step size 1/||M||_2^2 from power iteration.
SolverReport solve_fista(const MeasurementEnsemble& ens, const Vec& y,
                         const FistaOptions& opt);

// De-correlated LE alternated with a divergence-corrected soft threshold.
SolverReport solve_oamp(const MeasurementEnsemble& ens, const Vec& y,
                        double noise_var, const OampOptions& opt);

// Soft-threshold prox of the l1 norm.
inline double soft_threshold(double x, double t) {
    if (x > t) return x - t;
    if (x < -t) return x + t;
    return 0.0;
}

// Largest singular value of M by power iteration on M^T M.
double operator_norm(const Mat& m, double tol = 1e-6, int max_iter = 500);

} // namespace thzce
