// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed
//
// Fixed random one-bit analog combining over Q pilot slots, the equivalent
// real-valued linear inverse problem y = M h + n, and the de-correlated
// linear estimator W = eta * pinv(M).

#pragma once

#include "thzce/channel_model.hpp"
#include "thzce/common.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace thzce {

struct ReceivedSignal {
    Vec y;                 // length 2*S*Q, real embedding of the stacked slots
    double snr_db = 0.0;
    double noise_var = 0.0; // sigma_n^2 = 10^(-snr_db/10)
};

// Immutable after construction; observe/le_apply are pure.
class MeasurementEnsemble {
  public:
    // Draws the one-bit analog weights (+-1)/sqrt(S*S_bar), assembles the
    // complex operator, its real embedding and the LE matrix W = eta*pinv(M)
    // with eta = 2*S*S_bar / tr(pinv(M)*M).
    static MeasurementEnsemble build(const ArrayGeometry& geom, int slots,
                                     std::uint64_t seed);

    // Received pilots per the physical route: antenna-domain noise combined
    // slot by slot with the spatial channel (pilot symbol fixed to 1).
    ReceivedSignal observe(const ChannelRealization& chan, double snr_db,
                           std::uint64_t noise_seed) const;

    // Same, starting from the angular-domain real embedding h (used when the
    // ground truth comes from a dataset shard rather than a realization).
    ReceivedSignal observe_angular(const Vec& h, double snr_db,
                                   std::uint64_t noise_seed) const;

    // The combined noise vector [W_RF,q^H n_q]_q that observe() adds, for the
    // given seed; exposed so the complex and real forward routes can be
    // compared on identical noise.
    CVec combined_noise(double noise_var, std::uint64_t noise_seed) const;

    // f_LE(h; y) = h + W(y - Mh).
    Vec le_apply(const Vec& h, const Vec& y) const;

    int num_subarrays() const { return s_; }
    int aes_per_subarray() const { return s_bar_; }
    int slots() const { return q_; }
    std::uint64_t seed() const { return seed_; }
    int dim_h() const { return 2 * s_ * s_bar_; }
    int dim_y() const { return 2 * s_ * q_; }
    double step_size() const { return eta_; }

    const CMat& complex_operator() const { return m_complex_; }
    const Mat& real_operator() const { return m_; }
    const Mat& le_matrix() const { return w_; }
    const Mat& pseudo_inverse() const { return pinv_; }
    const AngularTransform& transform() const { return transform_; }

    // Float copies for the inference hot path.
    const Eigen::MatrixXf& real_operator_f() const { return m_f_; }
    const Eigen::MatrixXf& le_matrix_f() const { return w_f_; }

    // Analog sign pattern, slot-major then SA then AE, entries +-1.
    const std::vector<float>& sign_pattern() const { return signs_; }

    // JSON header (version, S, S_bar, Q, seed) + f32 sign blob. Everything
    // else is rebuilt deterministically on load.
    void save(const std::string& path) const;
    static MeasurementEnsemble load(const std::string& path);

  private:
    MeasurementEnsemble(int s, int s_bar, int q, std::uint64_t seed,
                        std::vector<float> signs);

    int s_, s_bar_, q_;
    std::uint64_t seed_;
    std::vector<float> signs_;
    AngularTransform transform_;
    CMat m_complex_; // S*Q x S*S_bar
    Mat m_;          // 2*S*Q x 2*S*S_bar
    Mat pinv_;       // pinv(M)
    Mat w_;          // eta * pinv
    double eta_ = 0.0;
    Eigen::MatrixXf m_f_, w_f_;
};

} // namespace thzce
