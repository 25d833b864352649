// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed

#include "thzce/fpn_oamp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace thzce {

void TrainConfig::validate() const {
    if (epochs < 1) throw config_error("TrainConfig: epochs must be >= 1");
    if (lr <= 0) throw config_error("TrainConfig: lr must be positive");
    if (batch_size < 1) throw config_error("TrainConfig: batch_size must be >= 1");
    if (lr_halving_period < 1) throw config_error("TrainConfig: lr_halving_period >= 1");
    if (!(eps_train > 0) || !std::isfinite(eps_train))
        throw config_error("TrainConfig: eps_train must be finite and positive");
    if (max_iter_train < 1) throw config_error("TrainConfig: max_iter_train must be >= 1");
    if (beta < 0 || beta >= 1) throw config_error("TrainConfig: beta must be in [0, 1)");
    if (snr_regime != "low" && snr_regime != "high")
        throw config_error("TrainConfig: snr_regime must be 'low' or 'high'");
}

double nmse(const Vec& estimate, const Vec& truth) {
    if (estimate.size() != truth.size())
        throw std::invalid_argument("nmse: length mismatch");
    const double denom = truth.squaredNorm();
    if (denom == 0.0) throw std::invalid_argument("nmse: zero reference");
    return (truth - estimate).squaredNorm() / denom;
}

Eigen::VectorXf le_apply_f(const MeasurementEnsemble& ens, const Eigen::VectorXf& h,
                           const Eigen::VectorXf& y) {
    return h + ens.le_matrix_f() * (y - ens.real_operator_f() * h);
}

FixedPointTrace fpn_infer_f(const MeasurementEnsemble& ens,
                            const nn::DenoiserWeights<float>& weights,
                            const Eigen::VectorXf& y, double epsilon, int max_iter,
                            bool record_iterates, nn::Workspace<float>& ws) {
    return fpn_infer_from(ens, weights, y, Eigen::VectorXf::Zero(ens.dim_h()), epsilon,
                          max_iter, record_iterates, ws);
}

FixedPointTrace fpn_infer_from(const MeasurementEnsemble& ens,
                               const nn::DenoiserWeights<float>& weights,
                               const Eigen::VectorXf& y, const Eigen::VectorXf& start,
                               double epsilon, int max_iter, bool record_iterates,
                               nn::Workspace<float>& ws) {
    if (!(epsilon > 0) || !std::isfinite(epsilon))
        throw std::invalid_argument("fpn_infer: epsilon must be finite and positive");
    if (max_iter < 1) throw std::invalid_argument("fpn_infer: max_iter must be >= 1");
    if (y.size() != ens.dim_y()) throw std::invalid_argument("fpn_infer: bad y length");
    if (start.size() != ens.dim_h())
        throw std::invalid_argument("fpn_infer: bad start length");

    FixedPointTrace trace;
    trace.epsilon = epsilon;
    Eigen::VectorXf h = start;
    if (record_iterates) trace.iterates.push_back(h.cast<double>());

    for (int t = 0; t < max_iter; ++t) {
        const Eigen::VectorXf u = le_apply_f(ens, h, y);
        const Eigen::VectorXf h_next = weights.forward(u, ws);
        const double gap = (h_next - h).cast<double>().norm();
        if (!std::isfinite(gap))
            throw numerical_error("fpn_infer: non-finite iterate at iteration " +
                                  std::to_string(t + 1));
        trace.gap_history.push_back(gap);
        h = h_next;
        trace.iterations_used = t + 1;
        if (record_iterates) trace.iterates.push_back(h.cast<double>());
        if (gap <= epsilon) {
            trace.converged = true;
            break;
        }
    }
    trace.estimate = h.cast<double>();
    return trace;
}

FixedPointTrace fpn_infer(const MeasurementEnsemble& ens,
                          const nn::DenoiserWeights<float>& weights, const Vec& y,
                          double epsilon, int max_iter, bool record_iterates) {
    if (!(weights.lipschitz_estimate < 1.0))
        std::fprintf(stderr,
                     "fpn_infer: warning: denoiser Lipschitz estimate %.3f is not < 1; "
                     "convergence is not guaranteed\n",
                     weights.lipschitz_estimate);
    nn::Workspace<float> ws;
    return fpn_infer_f(ens, weights, y.cast<float>(), epsilon, max_iter,
                       record_iterates, ws);
}

double contraction_check(const MeasurementEnsemble& ens,
                         const nn::DenoiserWeights<float>& weights,
                         const std::vector<std::pair<Vec, Vec>>& pairs, const Vec& y) {
    nn::Workspace<float> ws;
    const Eigen::VectorXf yf = y.cast<float>();
    double worst = 0.0;
    for (const auto& [h1, h2] : pairs) {
        const double dist = (h1 - h2).norm();
        if (dist < 1e-12) continue;
        const Eigen::VectorXf f1 =
            weights.forward(le_apply_f(ens, h1.cast<float>(), yf), ws);
        const Eigen::VectorXf f2 =
            weights.forward(le_apply_f(ens, h2.cast<float>(), yf), ws);
        worst = std::max(worst, (f1 - f2).cast<double>().norm() / dist);
    }
    return worst;
}

namespace {

double mean_nmse_db(const MeasurementEnsemble& ens,
                    const nn::DenoiserWeights<float>& weights, const Dataset& data,
                    double epsilon, int max_iter) {
    if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
    const int n = static_cast<int>(data.size());
    std::vector<double> ratios(n);
    std::string error;
#pragma omp parallel
    {
        nn::Workspace<float> ws;
#pragma omp for schedule(static)
        for (int i = 0; i < n; ++i) {
            try {
                const FixedPointTrace tr =
                    fpn_infer_f(ens, weights, data[i].y, epsilon, max_iter, false, ws);
                const double denom = data[i].h.cast<double>().squaredNorm();
                ratios[i] =
                    (data[i].h.cast<double>() - tr.estimate).squaredNorm() / denom;
            } catch (const std::exception& e) {
#pragma omp critical
                if (error.empty()) error = e.what();
                ratios[i] = std::numeric_limits<double>::quiet_NaN();
            }
        }
    }
    if (!error.empty()) throw numerical_error(error);
    double acc = 0.0;
    for (double r : ratios) acc += r;
    return to_db(acc / n);
}

} // namespace

TrainResult train(const MeasurementEnsemble& ens, const Dataset& train_data,
                  const Dataset& val_data, const TrainConfig& cfg, std::uint64_t seed,
                  const TrainInit* resume, std::ostream* progress) {
    cfg.validate();
    if (train_data.empty()) throw config_error("train: empty training set");
    for (const auto& s : train_data)
        if (s.h.size() != ens.dim_h() || s.y.size() != ens.dim_y())
            throw config_error("train: sample dimensions do not match the ensemble");

    TrainResult res;
    int first_epoch = 1;
    if (resume) {
        res.weights = resume->weights;
        res.adam = resume->adam;
        first_epoch = resume->epochs_completed + 1;
    } else {
        res.weights = nn::DenoiserWeights<float>::random_init(
            ens.num_subarrays(), ens.aes_per_subarray(), split_seed(seed, 0));
        res.adam = nn::AdamState<float>::zeros_like(res.weights);
        res.weights.target_beta = cfg.beta;

        // Start from a contractive denoiser: probe L on first-iteration LE
        // outputs and rescale until below 1.
        const int probe_n = std::min<int>(cfg.batch_size, train_data.size());
        std::vector<nn::VecX<float>> probe(probe_n);
        for (int i = 0; i < probe_n; ++i) {
            const Eigen::VectorXf zero = Eigen::VectorXf::Zero(ens.dim_h());
            probe[i] = le_apply_f(ens, zero, train_data[i].y);
        }
        for (int tries = 0; tries < 10; ++tries) {
            const double l = nn::estimate_lipschitz(res.weights, probe,
                                                    cfg.lipschitz_perturb,
                                                    split_seed(seed, 1 + tries));
            res.weights.lipschitz_estimate = l;
            if (l < 1.0) break;
            res.weights.enforce_contraction(l, cfg.beta);
        }
    }

    const int n = static_cast<int>(train_data.size());
    const int batch = cfg.batch_size;
    const auto shapes = nn::denoiser_shapes(ens.num_subarrays());
    std::vector<nn::DenoiserGrads<float>> grad_slots(batch);
    for (auto& g : grad_slots) g.set_zero_like(shapes);
    nn::DenoiserGrads<float> grad_total;
    grad_total.set_zero_like(shapes);
    std::vector<nn::VecX<float>> fixed_points(batch);
    std::vector<double> sample_loss(batch);
    std::vector<int> order(n);

    for (int epoch = first_epoch; epoch <= cfg.epochs; ++epoch) {
        const double lr =
            cfg.lr * std::pow(0.5, (epoch - 1) / cfg.lr_halving_period);

        for (int i = 0; i < n; ++i) order[i] = i;
        Rng shuffle_rng(split_seed(seed, 1000000ull + epoch));
        deterministic_shuffle(order, shuffle_rng);

        double epoch_loss = 0.0;
        double last_lipschitz = res.weights.lipschitz_estimate;

        for (int start = 0, bidx = 0; start < n; start += batch, ++bidx) {
            const int bsz = std::min(batch, n - start);

            std::string error;
#pragma omp parallel
            {
                nn::Workspace<float> ws;
#pragma omp for schedule(static)
                for (int k = 0; k < bsz; ++k) {
                    try {
                        const TrainSample& smp = train_data[order[start + k]];
                        // (i) fixed-point inference, no recording
                        const FixedPointTrace tr = fpn_infer_f(
                            ens, res.weights, smp.y, cfg.eps_train,
                            cfg.max_iter_train, false, ws);
                        const Eigen::VectorXf h_hat = tr.estimate.cast<float>();
                        fixed_points[k] = h_hat;
                        // (ii) one recorded application at the fixed point
                        const Eigen::VectorXf u = le_apply_f(ens, h_hat, smp.y);
                        nn::GradientTape<float> tape;
                        const Eigen::VectorXf h_out =
                            res.weights.forward_taped(u, tape, ws);
                        // (iii)+(iv) NMSE loss, gradient through step (ii) only
                        const double denom = smp.h.cast<double>().squaredNorm();
                        sample_loss[k] =
                            (h_out - smp.h).cast<double>().squaredNorm() / denom;
                        const Eigen::VectorXf upstream =
                            (h_out - smp.h) *
                            static_cast<float>(2.0 / (denom * bsz));
                        res.weights.backward(tape, upstream, grad_slots[k], nullptr,
                                             ws);
                    } catch (const std::exception& e) {
#pragma omp critical
                        if (error.empty()) error = e.what();
                        sample_loss[k] = std::numeric_limits<double>::quiet_NaN();
                    }
                }
            }
            if (!error.empty())
                throw numerical_error("train: epoch " + std::to_string(epoch) +
                                      ", batch " + std::to_string(bidx) + ": " + error);

            double batch_loss = 0.0;
            for (int k = 0; k < bsz; ++k) batch_loss += sample_loss[k];
            batch_loss /= bsz;
            if (!std::isfinite(batch_loss))
                throw numerical_error("train: non-finite loss at epoch " +
                                      std::to_string(epoch) + ", batch " +
                                      std::to_string(bidx));
            epoch_loss += batch_loss * bsz;

            grad_total.set_zero_like(shapes);
            for (int k = 0; k < bsz; ++k) grad_total.add(grad_slots[k]); // fixed order

            // (v) optimizer step
            nn::adam_step(res.weights, grad_total, res.adam, lr);

            // (vi) contraction check on the batch's fixed points
            const std::uint64_t lip_seed =
                split_seed(seed, 2000000ull + 100000ull * epoch + bidx);
            std::vector<nn::VecX<float>> lip_inputs(fixed_points.begin(),
                                                    fixed_points.begin() + bsz);
            double lip = nn::estimate_lipschitz(res.weights, lip_inputs,
                                                cfg.lipschitz_perturb, lip_seed);
            if (lip >= 1.0) {
                res.weights.enforce_contraction(lip, cfg.beta);
                lip = nn::estimate_lipschitz(res.weights, lip_inputs,
                                             cfg.lipschitz_perturb,
                                             split_seed(seed, lip_seed));
            }
            res.weights.lipschitz_estimate = lip;
            last_lipschitz = lip;
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_nmse_db = to_db(epoch_loss / n);
        log.val_nmse_db = mean_nmse_db(ens, res.weights, val_data, cfg.eps_train,
                                       cfg.max_iter_train);
        log.lipschitz_estimate = last_lipschitz;
        log.lr = lr;
        res.log.push_back(log);
        if (progress) {
            (*progress) << "epoch " << epoch << "  train " << log.train_nmse_db
                        << " dB  val " << log.val_nmse_db << " dB  L "
                        << log.lipschitz_estimate << "  lr " << log.lr << "\n";
            progress->flush();
        }
    }

    return res;
}

} // namespace thzce
