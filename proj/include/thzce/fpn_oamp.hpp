// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed
//
// Fixed-point channel estimator: Banach-Picard iteration of the contractive
// map f = R_Theta o f_LE, contraction diagnostics, and Jacobian-free training
// on the NMSE loss (one recorded application at the approximate fixed point).

#pragma once

#include "thzce/common.hpp"
#include "thzce/measurement.hpp"
#include "thzce/nn.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace thzce {

struct FixedPointTrace {
    Vec estimate;                    // h_hat = h^(T)
    std::vector<Vec> iterates;       // h^(0..T) when recorded
    std::vector<double> gap_history; // ||h^(t+1) - h^(t)||, t = 0..T-1
    bool converged = false;          // final gap <= epsilon
    int iterations_used = 0;         // T
    double epsilon = 0.0;
};

struct TrainConfig {
    int epochs = 150;
    double lr = 1e-3;
    int batch_size = 128;
    int lr_halving_period = 30; // epochs
    double eps_train = 0.01;
    int max_iter_train = 15;
    std::string snr_regime = "low"; // "low" (0-10 dB) or "high" (10-20 dB)
    double beta = 0.99;
    double lipschitz_perturb = 1e-3;

    void validate() const;
};

struct TrainSample {
    Eigen::VectorXf h; // ground truth, real angular embedding, length 2*S*S_bar
    Eigen::VectorXf y; // received pilots, length 2*S*Q
    float snr_db = 0.0f;
};
using Dataset = std::vector<TrainSample>;

struct EpochLog {
    int epoch = 0;
    double train_nmse_db = 0.0;
    double val_nmse_db = 0.0;
    double lipschitz_estimate = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    nn::DenoiserWeights<float> weights;
    nn::AdamState<float> adam;
    std::vector<EpochLog> log;
};

// ||h - h_hat||^2 / ||h||^2; throws if ||h|| = 0.
double nmse(const Vec& estimate, const Vec& truth);
inline double nmse_db(const Vec& estimate, const Vec& truth) {
    return to_db(nmse(estimate, truth));
}

// Algorithm: h^(0) = 0; h^(t+1) = R_Theta(f_LE(h^(t); y)) until the gap
// ||h^(t+1) - h^(t)|| falls to epsilon or max_iter is reached. Computation
// runs in f32; norms accumulate in f64.
FixedPointTrace fpn_infer(const MeasurementEnsemble& ens,
                          const nn::DenoiserWeights<float>& weights, const Vec& y,
                          double epsilon, int max_iter, bool record_iterates = false);

// f32 fast path used by training and batched evaluation.
Eigen::VectorXf le_apply_f(const MeasurementEnsemble& ens, const Eigen::VectorXf& h,
                           const Eigen::VectorXf& y);
FixedPointTrace fpn_infer_f(const MeasurementEnsemble& ens,
                            const nn::DenoiserWeights<float>& weights,
                            const Eigen::VectorXf& y, double epsilon, int max_iter,
                            bool record_iterates, nn::Workspace<float>& ws);

// Diagnostic variant with a custom start point. Contraction makes the fixed
// point unique, so any start must land within 2*epsilon of the h^(0)=0 run;
// the uniqueness property tests drive this.
FixedPointTrace fpn_infer_from(const MeasurementEnsemble& ens,
                               const nn::DenoiserWeights<float>& weights,
                               const Eigen::VectorXf& y, const Eigen::VectorXf& start,
                               double epsilon, int max_iter, bool record_iterates,
                               nn::Workspace<float>& ws);

// Max of ||f(h1;y) - f(h2;y)|| / ||h1 - h2|| over the pairs; coincident pairs
// (distance < 1e-12) are skipped.
double contraction_check(const MeasurementEnsemble& ens,
                         const nn::DenoiserWeights<float>& weights,
                         const std::vector<std::pair<Vec, Vec>>& pairs, const Vec& y);

// Jacobian-free training: per batch, (i) fixed-point inference without
// recording, (ii) one recorded application at the approximate fixed point,
// (iii) batch NMSE loss, (iv) backprop through (ii) only, (v) Adam,
// (vi) Lipschitz check with kernel rescale when L >= 1.
// `resume` continues from a previous result (weights + Adam + epoch count).
struct TrainInit {
    nn::DenoiserWeights<float> weights;
    nn::AdamState<float> adam;
    int epochs_completed = 0;
};

TrainResult train(const MeasurementEnsemble& ens, const Dataset& train_data,
                  const Dataset& val_data, const TrainConfig& cfg, std::uint64_t seed,
                  const TrainInit* resume = nullptr, std::ostream* progress = nullptr);

} // namespace thzce
