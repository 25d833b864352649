// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed
//
// Self-contained differentiable micro-network for the denoiser R_Theta:
// 2-D convolutions (im2col + GEMM), ReLU / leaky-ReLU, residual blocks,
// reverse-mode gradients, Adam, Lipschitz estimation and weight files.
//
// Fixed topology (9 Conv layers):
//   lift    3x3, 2S -> 64
//   3 x residual block { 3x3 64->64 + ReLU, 3x3 64->64 + ReLU, skip add }
//   head    1x1 64->64 + leaky ReLU(0.2), then 1x1 64 -> 2S
//
// The real iterate of length 2*S*S_bar is viewed as 2S feature maps of size
// sqrt(S_bar) x sqrt(S_bar): one real and one imaginary plane per subarray.
//
// Activations are (npix x channels) matrices so that the flat iterate maps
// onto feature planes without copies. Kernels are stored exactly in GEMM
// layout: (in_ch * k * k) x out_ch with row index (ky*k + kx)*in_ch + i.

#pragma once

#include "thzce/common.hpp"

#include <array>
#include <atomic>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace thzce::nn {

inline constexpr int kNumConvLayers = 9;
inline constexpr int kFeatureMaps = 64;
inline constexpr double kLeakySlope = 0.2;

template <class Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using VecX = Eigen::Vector<Scalar, Eigen::Dynamic>;

struct ConvShape {
    int out_ch = 0;
    int in_ch = 0;
    int ksize = 0; // 1 or 3, stride 1, zero padding (k-1)/2
    const char* name = "";
};

// The nine layer shapes for a given subarray count.
std::array<ConvShape, kNumConvLayers> denoiser_shapes(int num_subarrays);

template <class Scalar>
struct ConvLayer {
    ConvShape shape;
    MatX<Scalar> kernel; // (in_ch*k*k) x out_ch
    VecX<Scalar> bias;   // out_ch

    void set_zero() {
        kernel.setZero(shape.in_ch * shape.ksize * shape.ksize, shape.out_ch);
        bias.setZero(shape.out_ch);
    }
};

// Single convolution on (npix x in_ch) feature planes with square maps of
// the given side; zero padding, stride 1. Exposed for composing contrived
// networks in tests and diagnostics.
template <class Scalar>
MatX<Scalar> conv2d(const ConvLayer<Scalar>& layer, const MatX<Scalar>& x, int side);

// Running total of live recorded-activation bytes (gradient tapes), plus the
// high-water mark since the last reset. Backs the constant-memory check for
// fixed-point training.
std::size_t tape_bytes_current();
std::size_t tape_bytes_peak();
void reset_tape_peak();

namespace detail {
void tape_account(std::ptrdiff_t delta);
}

// Forward activations recorded for one application of the denoiser.
template <class Scalar>
class GradientTape {
  public:
    GradientTape() = default;
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;
    ~GradientTape() { release(); }

    void store(int slot, const MatX<Scalar>& value) {
        detail::tape_account(static_cast<std::ptrdiff_t>(value.size() * sizeof(Scalar)) -
                             static_cast<std::ptrdiff_t>(slots_[slot].size() * sizeof(Scalar)));
        slots_[slot] = value;
    }
    const MatX<Scalar>& get(int slot) const { return slots_[slot]; }

    bool valid = false;
    void release() {
        std::ptrdiff_t total = 0;
        for (auto& m : slots_) {
            total += static_cast<std::ptrdiff_t>(m.size() * sizeof(Scalar));
            m.resize(0, 0);
        }
        if (total) detail::tape_account(-total);
        valid = false;
    }

  private:
    // x0, lift_out, (block in, t1, t2) x 3, head mid: 12 tensors
    std::array<MatX<Scalar>, 12> slots_;
};

template <class Scalar>
struct DenoiserGrads {
    std::array<MatX<Scalar>, kNumConvLayers> kernel;
    std::array<VecX<Scalar>, kNumConvLayers> bias;

    void set_zero_like(const std::array<ConvShape, kNumConvLayers>& shapes) {
        for (int l = 0; l < kNumConvLayers; ++l) {
            kernel[l].setZero(shapes[l].in_ch * shapes[l].ksize * shapes[l].ksize,
                              shapes[l].out_ch);
            bias[l].setZero(shapes[l].out_ch);
        }
    }
    void add(const DenoiserGrads& other) {
        for (int l = 0; l < kNumConvLayers; ++l) {
            kernel[l] += other.kernel[l];
            bias[l] += other.bias[l];
        }
    }
    void scale(Scalar a) {
        for (int l = 0; l < kNumConvLayers; ++l) {
            kernel[l] *= a;
            bias[l] *= a;
        }
    }
};

// Scratch buffers reused across forward/backward calls (one per thread).
template <class Scalar>
struct Workspace {
    MatX<Scalar> patches;   // im2col buffer
    MatX<Scalar> a, b, c, d; // activation ping-pong
    MatX<Scalar> g1, g2, gp; // backward buffers
};

// The 9-conv-layer denoiser R_Theta with Lipschitz metadata.
template <class Scalar>
class DenoiserWeights {
  public:
    DenoiserWeights() = default;
    // Kernels and biases drawn from U(+-1/sqrt(fan_in)). The network starts
    // as a near-zero map with the residual blocks close to identity, which
    // trains far better under tight epoch budgets than variance-preserving
    // He initialization.
    static DenoiserWeights random_init(int num_subarrays, int aes_per_subarray,
                                       std::uint64_t seed);
    // All-zero parameters (output is identically zero).
    static DenoiserWeights zeros(int num_subarrays, int aes_per_subarray);

    int num_subarrays() const { return s_; }
    int aes_per_subarray() const { return s_bar_; }
    int side() const { return side_; }
    int dim() const { return 2 * s_ * s_bar_; }

    std::array<ConvLayer<Scalar>, kNumConvLayers>& layers() { return layers_; }
    const std::array<ConvLayer<Scalar>, kNumConvLayers>& layers() const { return layers_; }

    double lipschitz_estimate = std::numeric_limits<double>::quiet_NaN();
    double target_beta = 0.99;

    // R_Theta(u). Pure; same (weights, input) gives bit-identical output.
    VecX<Scalar> forward(const VecX<Scalar>& u, Workspace<Scalar>& ws) const;
    VecX<Scalar> forward(const VecX<Scalar>& u) const;

    // Forward recording the activations needed for one reverse sweep.
    VecX<Scalar> forward_taped(const VecX<Scalar>& u, GradientTape<Scalar>& tape,
                               Workspace<Scalar>& ws) const;

    // Exact reverse-mode gradients of forward w.r.t. parameters and input.
    // The tape must come from a matching forward_taped call.
    void backward(const GradientTape<Scalar>& tape, const VecX<Scalar>& upstream,
                  DenoiserGrads<Scalar>& grads, VecX<Scalar>* grad_input,
                  Workspace<Scalar>& ws) const;

    // Multiplies every kernel (not biases) by (beta/L)^(1/9); no-op if L < 1.
    void enforce_contraction(double lipschitz, double beta);

    template <class Other>
    DenoiserWeights<Other> cast() const {
        DenoiserWeights<Other> out;
        out.assign_topology(s_, s_bar_);
        for (int l = 0; l < kNumConvLayers; ++l) {
            out.layers()[l].kernel = layers_[l].kernel.template cast<Other>();
            out.layers()[l].bias = layers_[l].bias.template cast<Other>();
        }
        out.lipschitz_estimate = lipschitz_estimate;
        out.target_beta = target_beta;
        return out;
    }

    void assign_topology(int num_subarrays, int aes_per_subarray);
    void validate() const;

  private:
    int s_ = 0, s_bar_ = 0, side_ = 0;
    std::array<ConvLayer<Scalar>, kNumConvLayers> layers_;
};

template <class Scalar>
struct AdamState {
    std::array<MatX<Scalar>, kNumConvLayers> m_kernel, v_kernel;
    std::array<VecX<Scalar>, kNumConvLayers> m_bias, v_bias;
    long step = 0;

    static AdamState zeros_like(const DenoiserWeights<Scalar>& w) {
        AdamState st;
        for (int l = 0; l < kNumConvLayers; ++l) {
            const auto& ly = w.layers()[l];
            st.m_kernel[l].setZero(ly.kernel.rows(), ly.kernel.cols());
            st.v_kernel[l].setZero(ly.kernel.rows(), ly.kernel.cols());
            st.m_bias[l].setZero(ly.bias.size());
            st.v_bias[l].setZero(ly.bias.size());
        }
        return st;
    }
};

// Standard Adam with bias correction.
template <class Scalar>
void adam_step(DenoiserWeights<Scalar>& w, const DenoiserGrads<Scalar>& g,
               AdamState<Scalar>& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

// L = sum_i ||R(h_i + d_i) - R(h_i)|| / sum_i ||d_i|| with d_i Gaussian of
// per-coordinate scale perturb_scale * mean_i ||h_i|| / sqrt(dim).
template <class Scalar>
double estimate_lipschitz(const DenoiserWeights<Scalar>& w,
                          const std::vector<VecX<Scalar>>& inputs,
                          double perturb_scale, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Weight files: JSON manifest + f32 blob per layer in manifest order
// (kernel then bias); optional Adam state blobs after the layers.

struct WeightFileMeta {
    std::string regime;       // "low_snr" | "high_snr" | ""
    int epochs_completed = 0;
    double lr_next = 0.0;     // learning rate for the next epoch when resuming
    std::uint64_t train_seed = 0;
    std::string extra_json;   // free-form training metadata (JSON object text)
};

void save_weights(const std::string& path, const DenoiserWeights<float>& w,
                  const WeightFileMeta& meta,
                  const AdamState<float>* adam = nullptr);

struct LoadedWeights {
    DenoiserWeights<float> weights;
    WeightFileMeta meta;
    std::optional<AdamState<float>> adam;
};

LoadedWeights load_weights(const std::string& path);

} // namespace thzce::nn
