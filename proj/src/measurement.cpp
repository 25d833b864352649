// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed

#include "thzce/measurement.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

namespace thzce {

using nlohmann::json;

MeasurementEnsemble::MeasurementEnsemble(int s, int s_bar, int q, std::uint64_t seed,
                                         std::vector<float> signs)
    : s_(s), s_bar_(s_bar), q_(q), seed_(seed), signs_(std::move(signs)),
      transform_(s, s_bar) {
    if (q_ < 1) throw std::invalid_argument("MeasurementEnsemble: Q must be >= 1");
    const int n_ant = s_ * s_bar_;
    if (signs_.size() != static_cast<std::size_t>(q_) * n_ant)
        throw std::invalid_argument("MeasurementEnsemble: sign pattern size mismatch");

    const double scale = 1.0 / std::sqrt(static_cast<double>(n_ant));
    const CMat& u = transform_.subarray_matrix();

    // Row (q*S + s) of the complex operator is (U w_{s,q})^H on block s.
    m_complex_ = CMat::Zero(static_cast<Eigen::Index>(s_) * q_, n_ant);
    CVec w(s_bar_);
    for (int q = 0; q < q_; ++q) {
        for (int s = 0; s < s_; ++s) {
            const std::size_t base = (static_cast<std::size_t>(q) * s_ + s) * s_bar_;
            for (int j = 0; j < s_bar_; ++j)
                w[j] = std::complex<double>(signs_[base + j] * scale, 0.0);
            m_complex_.row(static_cast<Eigen::Index>(q) * s_ + s)
                .segment(static_cast<Eigen::Index>(s) * s_bar_, s_bar_) =
                (u * w).adjoint();
        }
    }

    m_ = real_embed(m_complex_);

    Eigen::CompleteOrthogonalDecomposition<Mat> cod;
    cod.setThreshold(1e-10);
    cod.compute(m_);
    pinv_ = cod.pseudoInverse();

    // tr(pinv(M) M) = tr(M pinv(M)) = sum(M .* pinv^T).
    const double trace = m_.cwiseProduct(pinv_.transpose()).sum();
    if (trace <= 0) throw numerical_error("MeasurementEnsemble: degenerate operator");
    eta_ = static_cast<double>(2 * s_ * s_bar_) / trace;
    w_ = eta_ * pinv_;

    m_f_ = m_.cast<float>();
    w_f_ = w_.cast<float>();
}

MeasurementEnsemble MeasurementEnsemble::build(const ArrayGeometry& geom, int slots,
                                               std::uint64_t seed) {
    geom.validate();
    if (slots < 1) throw std::invalid_argument("build_ensemble: Q must be >= 1");
    const int n_ant = geom.num_antennas();
    std::vector<float> signs(static_cast<std::size_t>(slots) * n_ant);
    Rng rng(seed);
    for (auto& v : signs) v = (rng.next_u64() & 1ull) ? 1.0f : -1.0f;
    return MeasurementEnsemble(geom.num_subarrays, geom.aes_per_subarray, slots, seed,
                               std::move(signs));
}

CVec MeasurementEnsemble::combined_noise(double noise_var, std::uint64_t noise_seed) const {
    Rng rng(noise_seed);
    const int n_ant = s_ * s_bar_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(n_ant));
    CVec out(static_cast<Eigen::Index>(s_) * q_);
    CVec n(n_ant);
    for (int q = 0; q < q_; ++q) {
        for (int j = 0; j < n_ant; ++j) n[j] = rng.cnormal(noise_var);
        for (int s = 0; s < s_; ++s) {
            const std::size_t base = (static_cast<std::size_t>(q) * s_ + s) * s_bar_;
            std::complex<double> acc = 0.0;
            for (int j = 0; j < s_bar_; ++j)
                acc += signs_[base + j] * scale * n[static_cast<Eigen::Index>(s) * s_bar_ + j];
            out[static_cast<Eigen::Index>(q) * s_ + s] = acc; // w^H n, w real
        }
    }
    return out;
}

ReceivedSignal MeasurementEnsemble::observe(const ChannelRealization& chan, double snr_db,
                                            std::uint64_t noise_seed) const {
    const int n_ant = s_ * s_bar_;
    if (chan.spatial.size() != n_ant)
        throw std::invalid_argument("observe: channel/ensemble dimension mismatch");
    ReceivedSignal out;
    out.snr_db = snr_db;
    out.noise_var = std::pow(10.0, -snr_db / 10.0);

    // Slot-wise combining of the spatial channel (F h_bar = h_tilde).
    const double scale = 1.0 / std::sqrt(static_cast<double>(n_ant));
    CVec y(static_cast<Eigen::Index>(s_) * q_);
    for (int q = 0; q < q_; ++q) {
        for (int s = 0; s < s_; ++s) {
            const std::size_t base = (static_cast<std::size_t>(q) * s_ + s) * s_bar_;
            std::complex<double> acc = 0.0;
            for (int j = 0; j < s_bar_; ++j)
                acc += signs_[base + j] * scale *
                       chan.spatial[static_cast<Eigen::Index>(s) * s_bar_ + j];
            y[static_cast<Eigen::Index>(q) * s_ + s] = acc;
        }
    }
    if (out.noise_var > 0.0) y += combined_noise(out.noise_var, noise_seed);
    out.y = real_embed(y);
    return out;
}

ReceivedSignal MeasurementEnsemble::observe_angular(const Vec& h, double snr_db,
                                                    std::uint64_t noise_seed) const {
    if (h.size() != dim_h())
        throw std::invalid_argument("observe_angular: dimension mismatch");
    ChannelRealization chan;
    chan.angular = real_unembed(h);
    chan.spatial = transform_.inverse(chan.angular);
    return observe(chan, snr_db, noise_seed);
}

Vec MeasurementEnsemble::le_apply(const Vec& h, const Vec& y) const {
    if (h.size() != dim_h() || y.size() != dim_y())
        throw std::invalid_argument("le_apply: dimension mismatch");
    return h + w_ * (y - m_ * h);
}

void MeasurementEnsemble::save(const std::string& path) const {
    json header;
    header["kind"] = "ensemble";
    header["version"] = 1;
    header["S"] = s_;
    header["S_bar"] = s_bar_;
    header["Q"] = q_;
    header["seed"] = seed_;
    write_container(path, header.dump(), signs_);
}

MeasurementEnsemble MeasurementEnsemble::load(const std::string& path) {
    auto [text, blob] = read_container(path);
    json header = json::parse(text, nullptr, false);
    if (header.is_discarded() || header.value("kind", "") != "ensemble")
        throw io_error("not an ensemble file: " + path);
    if (header.value("version", 0) != 1)
        throw io_error("unsupported ensemble version: " + path);
    return MeasurementEnsemble(header.at("S").get<int>(), header.at("S_bar").get<int>(),
                               header.at("Q").get<int>(),
                               header.at("seed").get<std::uint64_t>(), std::move(blob));
}

} // namespace thzce
