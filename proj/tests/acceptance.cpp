// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed
//
// End-to-end acceptance suite. Runs every release criterion at its pinned
// tolerance on the reduced (desk) geometry, including a full training run,
// and prints one PASS/FAIL line per criterion. Exits nonzero when any
// criterion fails.

#include "thzce/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

using namespace thzce;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(int index, const char* name, bool ok, const std::string& detail,
            double elapsed_s) {
    std::printf("[%s] %2d %-28s %s (%.1f s)\n", ok ? "PASS" : "FAIL", index, name,
                detail.c_str(), elapsed_s);
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

std::string fmt(const char* spec, ...) {
    char buf[512];
    va_list args;
    va_start(args, spec);
    std::vsnprintf(buf, sizeof(buf), spec, args);
    va_end(args);
    return buf;
}

std::vector<char> file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
}

} // namespace

int main() {
    const std::string work = "acceptance_work";
    std::filesystem::create_directories(work);

    const ExperimentConfig cfg = desk_preset();
    const auto t_total = Clock::now();

    std::printf("building the desk-scale measurement ensemble ...\n");
    const MeasurementEnsemble ens =
        MeasurementEnsemble::build(cfg.geometry, cfg.slots, cfg.measurement_seed);

    // ---- 1. de-correlation identity -------------------------------------
    {
        const auto t0 = Clock::now();
        const Mat wm = ens.le_matrix() * ens.real_operator();
        const double rel = std::abs(ens.dim_h() - wm.trace()) / ens.dim_h();
        const double el = seconds_since(t0);
        report(1, "de-correlation tr(I-WM)=0", rel < 1e-6 && el < 1.0,
               fmt("|tr(I-WM)|/2SS_bar = %.2e, runtime %.2f s", rel, el), el);
    }

    // ---- 2. projector spectrum ------------------------------------------
    {
        const auto t0 = Clock::now();
        const Mat p = ens.pseudo_inverse() * ens.real_operator();
        Eigen::SelfAdjointEigenSolver<Mat> eig(Mat(0.5 * (p + p.transpose())));
        double worst = 0.0;
        for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
            const double l = eig.eigenvalues()[i];
            worst = std::max(worst, std::min(std::abs(l), std::abs(l - 1.0)));
        }
        double spectral = 0.0;
        for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i)
            spectral = std::max(spectral,
                                std::abs(1.0 - ens.step_size() * eig.eigenvalues()[i]));
        const double el = seconds_since(t0);
        report(2, "projector spectrum {0,1}",
               worst < 1e-8 && std::abs(spectral - 1.0) < 1e-6 && el < 30.0,
               fmt("max dist %.2e, ||I-eta P||=%.9f, runtime %.1f s", worst, spectral, el),
               el);
    }

    // ---- 3. Rayleigh distance -------------------------------------------
    {
        const auto t0 = Clock::now();
        const ArrayGeometry table1{4, 256, 5.0e-4, 5.6e-2, 3.0e11};
        const double d = rayleigh_distance(table1);
        report(3, "Rayleigh distance 20 m", std::abs(d - 20.0) / 20.0 < 0.02,
               fmt("D_Rayleigh = %.3f m", d), seconds_since(t0));
    }

    // ---- 4. complex/real forward equivalence -----------------------------
    {
        const auto t0 = Clock::now();
        double worst = 0.0;
        for (int k = 0; k < 100; ++k) {
            const ChannelRealization ch =
                synthesize_channel(cfg.geometry, cfg.material, cfg.sampling, 42000 + k);
            const ReceivedSignal sig = ens.observe(ch, 5.0, 43000 + k);
            const CVec nbar = ens.combined_noise(sig.noise_var, 43000 + k);
            const Vec via_real =
                ens.real_operator() * real_embed(ch.angular) + real_embed(nbar);
            worst = std::max(worst, (sig.y - via_real).norm() / sig.y.norm());
        }
        report(4, "complex/real equivalence", worst < 1e-10,
               fmt("max relative gap %.2e over 100 instances", worst), seconds_since(t0));
    }

    // ---- 5. gradient oracle ----------------------------------------------
    {
        const auto t0 = Clock::now();
        double worst = 0.0;
        int checked = 0, filtered = 0;
        const double h = 1e-5;
        for (int cfgi = 0; cfgi < 10; ++cfgi) {
            auto w = nn::DenoiserWeights<double>::random_init(1, 16, 7000 + cfgi);
            Rng rin(7100 + cfgi), rg(7200 + cfgi);
            nn::VecX<double> u(w.dim()), g(w.dim());
            for (int i = 0; i < w.dim(); ++i) {
                u[i] = rin.normal();
                g[i] = rg.normal();
            }
            nn::Workspace<double> ws;
            nn::GradientTape<double> tape;
            (void)w.forward_taped(u, tape, ws);
            nn::DenoiserGrads<double> grads;
            grads.set_zero_like(nn::denoiser_shapes(1));
            w.backward(tape, g, grads, nullptr, ws);

            auto probe = [&]() { return g.dot(w.forward(u)); };
            Rng pick(7300 + cfgi);
            for (int l = 0; l < nn::kNumConvLayers; ++l) {
                for (int rep = 0; rep < 3; ++rep) {
                    auto& kernel = w.layers()[l].kernel;
                    const Eigen::Index j =
                        static_cast<Eigen::Index>(pick.below(kernel.size()));
                    const double saved = kernel.data()[j];
                    auto fd_at = [&](double step) {
                        kernel.data()[j] = saved + step;
                        const double up = probe();
                        kernel.data()[j] = saved - step;
                        const double dn = probe();
                        kernel.data()[j] = saved;
                        return (up - dn) / (2 * step);
                    };
                    const double fd1 = fd_at(h), fd2 = fd_at(h / 2);
                    if (std::abs(fd1 - fd2) >
                        1e-6 * std::max({std::abs(fd1), std::abs(fd2), 1.0})) {
                        ++filtered;
                        continue;
                    }
                    const double an = grads.kernel[l].data()[j];
                    worst = std::max(worst,
                                     std::abs(an - fd1) /
                                         std::max({std::abs(an), std::abs(fd1), 1e-8}));
                    ++checked;
                }
            }
        }
        report(5, "gradient oracle", worst < 1e-4 && checked >= 200,
               fmt("max rel err %.2e over %d coords (%d kink-filtered)", worst, checked,
                   filtered),
               seconds_since(t0));
    }

    // ---- 11. OMP oracle (fast; runs before training) ----------------------
    {
        const auto t0 = Clock::now();
        Vec h = Vec::Zero(ens.dim_h());
        h[17] = 1.3;
        h[200] = -2.0;
        h[430] = 0.7;
        const Vec y = ens.real_operator() * h;
        OmpOptions opt;
        opt.sparsity = 3;
        const SolverReport rep = solve_omp(ens, y, opt);
        bool support_ok = true;
        for (Eigen::Index j = 0; j < rep.estimate.size(); ++j) {
            const bool expected = (j == 17 || j == 200 || j == 430);
            if (expected != (rep.estimate[j] != 0.0)) support_ok = false;
        }
        const double err_db = to_db((rep.estimate - h).squaredNorm() / h.squaredNorm());
        report(11, "OMP exact support recovery", support_ok && err_db < -120.0,
               fmt("NMSE %.1f dB, support %s", err_db, support_ok ? "exact" : "wrong"),
               seconds_since(t0));
    }

    // ---- datasets ---------------------------------------------------------
    std::printf("generating desk-scale datasets (%d/%d/%d) ...\n", cfg.data.train_count,
                cfg.data.val_count, cfg.data.test_count);
    const auto t_train_eval = Clock::now(); // criterion 9 budget starts here
    const auto low = cfg.regime_range("low");
    const DatasetShard train_shard =
        generate_shard(cfg, ens, "train", cfg.data.train_count, low[0], low[1], "low");
    const DatasetShard val_shard =
        generate_shard(cfg, ens, "val", cfg.data.val_count, low[0], low[1], "low");
    const DatasetShard test_shard =
        generate_shard(cfg, ens, "test", cfg.data.test_count, low[0], low[1], "low");

    // ---- 12. determinism ---------------------------------------------------
    {
        const auto t0 = Clock::now();
        const DatasetShard again =
            generate_shard(cfg, ens, "test", cfg.data.test_count, low[0], low[1], "low");
        const std::string p1 = work + "/shard_a.bin", p2 = work + "/shard_b.bin";
        test_shard.save(p1);
        again.save(p2);
        const bool shards_same = file_bytes(p1) == file_bytes(p2);

        // CSV determinism on a small benchmark slice
        ExperimentConfig small = cfg;
        small.sweep_snr = {5.0};
        small.sweep_methods = {"ls", "oamp"};
        DatasetShard slice = test_shard;
        slice.samples.resize(50);
        slice.header.count = 50;
        const auto wtmp = nn::DenoiserWeights<float>::random_init(
            cfg.geometry.num_subarrays, cfg.geometry.aes_per_subarray, 1);
        const BenchmarkResult r1 = run_benchmark(small, ens, wtmp, nullptr, slice);
        const BenchmarkResult r2 = run_benchmark(small, ens, wtmp, nullptr, slice);
        const std::string c1 = work + "/bench_a.csv", c2 = work + "/bench_b.csv";
        write_benchmark_csv(c1, r1);
        write_benchmark_csv(c2, r2);
        const bool csv_same = file_bytes(c1) == file_bytes(c2);
        report(12, "determinism (shards, CSVs)", shards_same && csv_same,
               fmt("shards %s, csv %s", shards_same ? "identical" : "differ",
                   csv_same ? "identical" : "differ"),
               seconds_since(t0));
    }

    // ---- training (low regime) ---------------------------------------------
    std::printf("training the low-SNR fixed-point denoiser (%d epochs) ...\n",
                cfg.train.epochs);
    const TrainingOutput trained =
        run_training(cfg, ens, train_shard, val_shard, "low", work, "", nullptr);
    const nn::LoadedWeights lw = nn::load_weights(trained.weights_path);
    const nn::DenoiserWeights<float>& weights = lw.weights;
    std::printf("  final val NMSE %.2f dB, Lipschitz estimate %.3f\n",
                trained.log.back().val_nmse_db, weights.lipschitz_estimate);

    // ---- 6. contraction after training --------------------------------------
    {
        const auto t0 = Clock::now();
        std::vector<nn::VecX<float>> held_out;
        {
            nn::Workspace<float> ws;
            for (int i = 0; i < 128; ++i) {
                const FixedPointTrace tr = fpn_infer_f(
                    ens, weights, test_shard.samples[i].y, cfg.solvers.fpn_epsilon,
                    cfg.solvers.fpn_max_iter, false, ws);
                held_out.push_back(tr.estimate.cast<float>());
            }
        }
        const double lip = nn::estimate_lipschitz(weights, held_out, 1e-3, 51000);
        const double ratio = max_contraction_ratio(ens, weights, test_shard.samples, 1000,
                                                   cfg.solvers.fpn_epsilon,
                                                   cfg.solvers.fpn_max_iter, 52000);
        report(6, "contraction after training", lip < 1.0 && ratio < 1.0,
               fmt("Eq.18 estimate %.3f, max pair ratio %.3f over 1000 pairs", lip, ratio),
               seconds_since(t0));
    }

    // ---- 7 + 8. convergence properties --------------------------------------
    {
        const auto t0 = Clock::now();
        const ConvergenceCurves curves = run_convergence(cfg, ens, weights, nullptr,
                                                         test_shard, {0.0, 5.0, 10.0}, 5.0);
        bool mean_fit_ok = true, per_sample_ok = true;
        std::string detail;
        for (std::size_t s = 0; s < curves.gap_snrs.size(); ++s) {
            std::vector<double> ts(curves.log10_gap[s].size());
            for (std::size_t t = 0; t < ts.size(); ++t) ts[t] = double(t);
            const double r2 = linear_fit_r2(ts, curves.log10_gap[s]);
            const double frac = curves.fit_r2_fraction_above_099[s];
            mean_fit_ok = mean_fit_ok && r2 > 0.99;
            per_sample_ok = per_sample_ok && frac >= 0.95;
            detail += fmt("%gdB: R2=%.4f frac=%.3f  ", curves.gap_snrs[s], r2, frac);
        }
        report(7, "linear convergence (gap fit)", mean_fit_ok && per_sample_ok, detail,
               seconds_since(t0));

        // criterion 8: batch NMSE at t=4 within 0.5 dB of the converged value
        // (per-iteration curve at 5 dB), plus a 95% within-15 rate on the
        // regime-mixed test shard
        const auto t1 = Clock::now();
        int fpn_row = -1;
        for (std::size_t m = 0; m < curves.methods.size(); ++m)
            if (curves.methods[m] == "fpn-oamp") fpn_row = static_cast<int>(m);
        const std::vector<double>& curve = curves.nmse_db[fpn_row];
        const double at4 = curve[4];
        const double converged_value = curve.back();
        int converged_count = 0;
        {
            std::vector<int> conv(test_shard.samples.size());
#pragma omp parallel
            {
                nn::Workspace<float> ws;
#pragma omp for schedule(dynamic, 8)
                for (int i = 0; i < static_cast<int>(test_shard.samples.size()); ++i) {
                    const FixedPointTrace tr = fpn_infer_f(
                        ens, weights, test_shard.samples[i].y, cfg.solvers.fpn_epsilon,
                        cfg.solvers.fpn_max_iter, false, ws);
                    conv[i] = tr.converged ? 1 : 0;
                }
            }
            for (int c : conv) converged_count += c;
        }
        const double frac = double(converged_count) / double(test_shard.samples.size());
        report(8, "rapid convergence",
               std::abs(at4 - converged_value) <= 0.5 && frac >= 0.95,
               fmt("NMSE(t=4) %.2f dB vs converged %.2f dB; within-15 rate %.3f", at4,
                   converged_value, frac),
               seconds_since(t1));
    }

    // ---- module invariants that need trained weights --------------------------
    {
        const auto t0 = Clock::now();
        const double pair_ratio = max_contraction_ratio(
            ens, weights, test_shard.samples, 200, cfg.solvers.fpn_epsilon,
            cfg.solvers.fpn_max_iter, 53000);
        const int n = static_cast<int>(test_shard.samples.size());
        std::vector<int> geo_ok(n, 1), trend_ok(n, 1), uniq_ok(n, 1);
#pragma omp parallel
        {
            nn::Workspace<float> ws;
#pragma omp for schedule(dynamic, 8)
            for (int i = 0; i < n; ++i) {
                const Vec h = test_shard.samples[i].h.cast<double>();
                const FixedPointTrace tr = fpn_infer_f(
                    ens, weights, test_shard.samples[i].y, cfg.solvers.fpn_epsilon,
                    cfg.solvers.fpn_max_iter, true, ws);
                // Banach-Picard: gap ratios bounded by the measured contraction
                for (std::size_t t = 0; t + 1 < tr.gap_history.size(); ++t)
                    if (tr.gap_history[t + 1] >
                        (pair_ratio + 0.05) * tr.gap_history[t])
                        geo_ok[i] = 0;
                // NMSE trend non-increasing after the first two iterations
                for (std::size_t t = 2; t + 1 < tr.iterates.size(); ++t)
                    if (nmse_db(tr.iterates[t + 1], h) >
                        nmse_db(tr.iterates[t], h) + 0.05)
                        trend_ok[i] = 0;
                // uniqueness: a random start lands within 2 epsilon
                if (i < 100) {
                    Rng rng(60000 + i);
                    Eigen::VectorXf start(ens.dim_h());
                    for (Eigen::Index j = 0; j < start.size(); ++j)
                        start[j] = static_cast<float>(rng.normal());
                    const FixedPointTrace alt = fpn_infer_from(
                        ens, weights, test_shard.samples[i].y, start,
                        cfg.solvers.fpn_epsilon, 50, false, ws);
                    if ((alt.estimate - tr.estimate).norm() > 2 * cfg.solvers.fpn_epsilon)
                        uniq_ok[i] = 0;
                }
            }
        }
        int geo = 0, trend = 0, uniq = 0;
        for (int i = 0; i < n; ++i) {
            geo += geo_ok[i];
            trend += trend_ok[i];
        }
        for (int i = 0; i < 100; ++i) uniq += uniq_ok[i];
        report(0, "fixed-point invariants",
               geo >= static_cast<int>(0.95 * n) &&
                   trend >= static_cast<int>(0.90 * n) && uniq == 100,
               fmt("geometric decrease %.3f, nmse trend %.3f, uniqueness %d/100 "
                   "(measured L %.3f)",
                   double(geo) / n, double(trend) / n, uniq, pair_ratio),
               seconds_since(t0));
    }

    // ---- 9. accuracy ordering ------------------------------------------------
    {
        const auto t0 = Clock::now();
        ExperimentConfig bench_cfg = cfg;
        bench_cfg.sweep_snr = {10.0};
        const BenchmarkResult res =
            run_benchmark(bench_cfg, ens, weights, nullptr, test_shard);
        double fpn = 0, oamp = 0, ls = 0, omp = 0, fista = 0;
        for (const auto& r : res.records) {
            if (r.method == "fpn-oamp") fpn = r.nmse_db;
            if (r.method == "oamp") oamp = r.nmse_db;
            if (r.method == "ls") ls = r.nmse_db;
            if (r.method == "omp") omp = r.nmse_db;
            if (r.method == "fista") fista = r.nmse_db;
        }
        const double budget = seconds_since(t_train_eval);
        const bool ok = (oamp - fpn) >= 5.0 && fpn < ls && fpn < omp && fpn < fista &&
                        budget < 1800.0;
        report(9, "accuracy ordering at 10 dB", ok,
               fmt("fpn %.2f oamp %.2f fista %.2f ls %.2f omp %.2f dB; gain over oamp "
                   "%.2f dB; train+eval %.0f s",
                   fpn, oamp, fista, ls, omp, oamp - fpn, budget),
               seconds_since(t0));
    }

    // ---- 10. JFB memory contract ----------------------------------------------
    {
        const auto t0 = Clock::now();
        Dataset subset(train_shard.samples.begin(), train_shard.samples.begin() + 256);
        Dataset val_subset(val_shard.samples.begin(), val_shard.samples.begin() + 32);
        TrainConfig tc = cfg.train;
        tc.epochs = 1;

        tc.max_iter_train = 2;
        nn::reset_tape_peak();
        (void)train(ens, subset, val_subset, tc, 9001);
        const double peak_short = double(nn::tape_bytes_peak());

        tc.max_iter_train = 15;
        nn::reset_tape_peak();
        (void)train(ens, subset, val_subset, tc, 9001);
        const double peak_long = double(nn::tape_bytes_peak());

        const double rel = std::abs(peak_long - peak_short) / peak_short;
        report(10, "JFB constant memory", rel <= 0.10,
               fmt("tape peak %.2f MB (T=2) vs %.2f MB (T=15), rel diff %.3f",
                   peak_short / 1048576.0, peak_long / 1048576.0, rel),
               seconds_since(t0));
    }

    std::printf("%s: %d criterion(s) failed, total %.0f s\n",
                g_failures == 0 ? "ACCEPTANCE PASSED" : "ACCEPTANCE FAILED", g_failures,
                seconds_since(t_total));
    return g_failures == 0 ? 0 : 1;
}
