// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed

#include "thzce/baselines.hpp"

#include <doctest.h>

using namespace thzce;

namespace {

MeasurementEnsemble test_ensemble(int slots = 8, std::uint64_t seed = 1) {
    return MeasurementEnsemble::build(ArrayGeometry{4, 16, 5e-4, 5.6e-2, 3e11}, slots,
                                      seed);
}

Vec random_vec(int n, std::uint64_t seed) {
    Rng rng(seed);
    return Vec::NullaryExpr(n, [&](Eigen::Index) { return rng.normal(); });
}

} // namespace

TEST_CASE("least squares: zero input, projector consistency, optimality") {
    const MeasurementEnsemble ens = test_ensemble();

    CHECK(solve_ls(ens, Vec::Zero(ens.dim_y())).estimate.norm() == 0.0);

    // noiseless y = Mh with h in the row space: the LS estimate reproduces y
    const Vec h = ens.pseudo_inverse() * (ens.real_operator() * random_vec(ens.dim_h(), 2));
    const Vec y = ens.real_operator() * h;
    const SolverReport rep = solve_ls(ens, y);
    CHECK((ens.real_operator() * rep.estimate - y).norm() <= 1e-8 * y.norm());
    CHECK((rep.estimate - h).norm() <= 1e-8 * h.norm());

    // optimality: no random candidate does better, and the normal equations hold
    const Vec yn = y + 0.1 * random_vec(ens.dim_y(), 3);
    const SolverReport rn = solve_ls(ens, yn);
    const double res = (yn - ens.real_operator() * rn.estimate).norm();
    Rng rng(4);
    for (int k = 0; k < 100; ++k) {
        const Vec cand = rn.estimate + 0.1 * random_vec(ens.dim_h(), 500 + k);
        CHECK(res <= (yn - ens.real_operator() * cand).norm() + 1e-12);
    }
    const Vec grad = ens.real_operator().transpose() *
                     (ens.real_operator() * rn.estimate - yn);
    CHECK(grad.norm() <= 1e-6 * (ens.real_operator().transpose() * yn).norm());
}

TEST_CASE("omp: exact recovery of a well-separated 3-sparse signal") {
    const MeasurementEnsemble ens = test_ensemble(12, 5);
    Vec h = Vec::Zero(ens.dim_h());
    h[10] = 1.3;
    h[60] = -2.0;
    h[110] = 0.7;
    const Vec y = ens.real_operator() * h;

    OmpOptions opt;
    opt.sparsity = 3;
    const SolverReport rep = solve_omp(ens, y, opt);
    CHECK((rep.estimate - h).norm() / h.norm() < 1e-6);
    // support recovered exactly
    for (Eigen::Index j = 0; j < rep.estimate.size(); ++j) {
        if (j == 10 || j == 60 || j == 110) CHECK(rep.estimate[j] != 0.0);
        else CHECK(rep.estimate[j] == 0.0);
    }
    // NMSE below -120 dB
    CHECK(to_db((rep.estimate - h).squaredNorm() / h.squaredNorm()) < -120.0);
}

TEST_CASE("omp: degenerate inputs") {
    const MeasurementEnsemble ens = test_ensemble();
    OmpOptions opt;
    opt.sparsity = 0;
    CHECK_THROWS_AS(solve_omp(ens, Vec::Zero(ens.dim_y()), opt), std::invalid_argument);

    opt.sparsity = 4;
    const SolverReport rep = solve_omp(ens, Vec::Zero(ens.dim_y()), opt);
    CHECK(rep.estimate.norm() == 0.0);
    CHECK(rep.iterations_used == 0);
}

TEST_CASE("omp: support grows and the residual never increases") {
    const MeasurementEnsemble ens = test_ensemble(12, 6);
    const Vec y = ens.real_operator() * random_vec(ens.dim_h(), 7) +
                  0.05 * random_vec(ens.dim_y(), 8);
    OmpOptions opt;
    opt.sparsity = 24;
    opt.residual_tol = 0.0;
    const SolverReport rep = solve_omp(ens, y, opt);
    CHECK(rep.iterations_used == 24);
    for (std::size_t t = 1; t < rep.residual_history.size(); ++t)
        CHECK(rep.residual_history[t] <= rep.residual_history[t - 1] + 1e-12);
}

TEST_CASE("soft threshold closed form") {
    CHECK(soft_threshold(3.0, 1.0) == 2.0);
    CHECK(soft_threshold(-0.5, 1.0) == 0.0);
    CHECK(soft_threshold(-3.0, 1.0) == -2.0);
    CHECK(soft_threshold(0.0, 1.0) == 0.0);
}

TEST_CASE("fista: full shrinkage under a huge penalty") {
    const MeasurementEnsemble ens = test_ensemble();
    FistaOptions opt;
    opt.lambda = 1e9;
    const SolverReport rep = solve_fista(ens, random_vec(ens.dim_y(), 9), opt);
    CHECK(rep.estimate.norm() == 0.0);
}

TEST_CASE("fista: objective is non-increasing with restarts enabled") {
    const MeasurementEnsemble ens = test_ensemble(12, 10);
    const Vec y = ens.real_operator() * random_vec(ens.dim_h(), 11) +
                  0.1 * random_vec(ens.dim_y(), 12);
    FistaOptions opt;
    opt.lambda_rel = 1e-2;
    opt.max_iter = 30;
    opt.tol = 0.0;
    opt.record_iterates = true;
    const SolverReport rep = solve_fista(ens, y, opt);
    REQUIRE(rep.iterates.size() >= 20);

    const double lambda =
        opt.lambda_rel * (ens.real_operator().transpose() * y).cwiseAbs().maxCoeff();
    auto objective = [&](const Vec& h) {
        return 0.5 * (y - ens.real_operator() * h).squaredNorm() + lambda * h.lpNorm<1>();
    };
    double prev = std::numeric_limits<double>::infinity();
    for (const Vec& it : rep.iterates) {
        const double obj = objective(it);
        CHECK(obj <= prev + 1e-12 * std::max(1.0, prev));
        prev = obj;
    }
    // iterate 20 does not exceed iterate 1
    CHECK(objective(rep.iterates[19]) <= objective(rep.iterates[0]) + 1e-12);
}

TEST_CASE("fista: operator norm via power iteration matches a direct SVD") {
    const MeasurementEnsemble ens = test_ensemble(6, 13);
    const Mat m = ens.real_operator().topRows(24);
    const double direct = m.jacobiSvd().singularValues()[0];
    CHECK(operator_norm(m) == doctest::Approx(direct).epsilon(1e-5));
}

namespace {

// The empirical residual behavior of OAMP is a statement about realistic
// operator shapes; a bench-scale ensemble (the reduced reference geometry)
// is the smallest size where it is meaningful.
const MeasurementEnsemble& bench_ensemble() {
    static const MeasurementEnsemble ens =
        MeasurementEnsemble::build(ArrayGeometry{4, 64, 5e-4, 5.6e-2, 3e11}, 32, 21);
    return ens;
}

} // namespace

TEST_CASE("oamp: zero threshold reduces to the least-squares solution") {
    // kappa = 0 makes the NLE the identity; with the pseudoinverse LE the
    // first iterate is already pinv(M) y, the minimum-norm LS solution.
    const MeasurementEnsemble& ens = bench_ensemble();
    const Vec h = ens.pseudo_inverse() * (ens.real_operator() * random_vec(ens.dim_h(), 15));
    const Vec y = ens.real_operator() * h;
    OampOptions opt;
    opt.kappa = 0.0;
    opt.max_iter = 10;
    const SolverReport rep = solve_oamp(ens, y, 0.0, opt);
    CHECK((rep.estimate - h).norm() / h.norm() < 1e-9);
    // residual decays monotonically on this consistent instance
    for (std::size_t t = 1; t < rep.residual_history.size(); ++t)
        CHECK(rep.residual_history[t] <= rep.residual_history[t - 1] + 1e-12);
}

TEST_CASE("oamp: noiseless iterates stay measurement-consistent with shrinkage on") {
    const MeasurementEnsemble& ens = bench_ensemble();
    const Vec h = ens.pseudo_inverse() * (ens.real_operator() * random_vec(ens.dim_h(), 15));
    const Vec y = ens.real_operator() * h;
    OampOptions opt;
    opt.max_iter = 40;
    opt.tol = 0.0;
    const SolverReport rep = solve_oamp(ens, y, 0.0, opt);
    // the residual contracts geometrically even though the threshold keeps
    // reshaping the null-space component
    CHECK(rep.residual_history.back() <= 1e-4 * y.norm());
    for (std::size_t t = 1; t < rep.residual_history.size(); ++t)
        CHECK(rep.residual_history[t] <= rep.residual_history[t - 1] + 1e-12);
}

TEST_CASE("oamp: residual decreases over the first iterations on noisy data") {
    const MeasurementEnsemble& ens = bench_ensemble();
    const ArrayGeometry g{4, 64, 5e-4, 5.6e-2, 3e11};
    const MaterialModel material;
    const SamplingConfig sampling;
    for (int k = 0; k < 5; ++k) {
        const ChannelRealization ch = synthesize_channel(g, material, sampling, 800 + k);
        const ReceivedSignal sig = ens.observe(ch, 5.0, 900 + k);
        OampOptions opt;
        opt.max_iter = 5;
        opt.tol = 0.0;
        const SolverReport rep = solve_oamp(ens, sig.y, sig.noise_var, opt);
        for (int t = 1; t <= 3; ++t)
            CHECK(rep.residual_history[t] <= rep.residual_history[t - 1] + 1e-12);
    }
}

TEST_CASE("solvers are deterministic") {
    const MeasurementEnsemble ens = test_ensemble(12, 18);
    const Vec y = ens.real_operator() * random_vec(ens.dim_h(), 19) +
                  0.1 * random_vec(ens.dim_y(), 20);
    OmpOptions omp;
    FistaOptions fista;
    OampOptions oamp;
    CHECK(solve_ls(ens, y).estimate == solve_ls(ens, y).estimate);
    CHECK(solve_omp(ens, y, omp).estimate == solve_omp(ens, y, omp).estimate);
    CHECK(solve_fista(ens, y, fista).estimate == solve_fista(ens, y, fista).estimate);
    CHECK(solve_oamp(ens, y, 0.1, oamp).estimate == solve_oamp(ens, y, 0.1, oamp).estimate);
}
