// SPDX-License-Identifier: Apache-2.0
//
// thzce: hybrid far/near-field THz UM-MIMO channel estimation testbed

#include "thzce/nn.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

namespace thzce::nn {

using nlohmann::json;

std::array<ConvShape, kNumConvLayers> denoiser_shapes(int num_subarrays) {
    const int ch = 2 * num_subarrays;
    return {{{kFeatureMaps, ch, 3, "lift"},
             {kFeatureMaps, kFeatureMaps, 3, "rb1a"},
             {kFeatureMaps, kFeatureMaps, 3, "rb1b"},
             {kFeatureMaps, kFeatureMaps, 3, "rb2a"},
             {kFeatureMaps, kFeatureMaps, 3, "rb2b"},
             {kFeatureMaps, kFeatureMaps, 3, "rb3a"},
             {kFeatureMaps, kFeatureMaps, 3, "rb3b"},
             {kFeatureMaps, kFeatureMaps, 1, "head1"},
             {ch, kFeatureMaps, 1, "head2"}}};
}

// --------------------------------------------------------------------------
// Tape accounting

namespace {
std::atomic<long long> g_tape_current{0};
std::atomic<long long> g_tape_peak{0};
} // namespace

void detail::tape_account(std::ptrdiff_t delta) {
    const long long now = g_tape_current.fetch_add(delta) + delta;
    long long peak = g_tape_peak.load();
    while (now > peak && !g_tape_peak.compare_exchange_weak(peak, now)) {
    }
}

std::size_t tape_bytes_current() {
    return static_cast<std::size_t>(std::max(0ll, g_tape_current.load()));
}
std::size_t tape_bytes_peak() {
    return static_cast<std::size_t>(std::max(0ll, g_tape_peak.load()));
}
void reset_tape_peak() { g_tape_peak.store(g_tape_current.load()); }

// --------------------------------------------------------------------------
// Convolution primitives

namespace {

// x: (npix x in_ch) feature planes, square side x side maps. Fills
// p: (npix x in_ch*k*k) with column (ky*k + kx)*in_ch + i.
template <class Scalar>
void im2col(const MatX<Scalar>& x, int side, int ksize, MatX<Scalar>& p) {
    const int in_ch = static_cast<int>(x.cols());
    p.setZero(x.rows(), static_cast<Eigen::Index>(in_ch) * ksize * ksize);
    const int off = ksize / 2;
    for (int ky = 0; ky < ksize; ++ky) {
        for (int kx = 0; kx < ksize; ++kx) {
            const int dy = ky - off, dx = kx - off;
            const int colbase = (ky * ksize + kx) * in_ch;
            const int xa = std::max(0, -dx), xb = std::min(side, side - dx);
            if (xb <= xa) continue;
            for (int y = std::max(0, -dy); y < std::min(side, side - dy); ++y)
                p.block(y * side + xa, colbase, xb - xa, in_ch) =
                    x.block((y + dy) * side + xa + dx, 0, xb - xa, in_ch);
        }
    }
}

// Scatter-add transpose of im2col: dx += unfold^T(p).
template <class Scalar>
void col2im_add(const MatX<Scalar>& p, int side, int ksize, MatX<Scalar>& dx) {
    const int in_ch = static_cast<int>(dx.cols());
    const int off = ksize / 2;
    for (int ky = 0; ky < ksize; ++ky) {
        for (int kx = 0; kx < ksize; ++kx) {
            const int dy = ky - off, dx_ = kx - off;
            const int colbase = (ky * ksize + kx) * in_ch;
            const int xa = std::max(0, -dx_), xb = std::min(side, side - dx_);
            if (xb <= xa) continue;
            for (int y = std::max(0, -dy); y < std::min(side, side - dy); ++y)
                dx.block((y + dy) * side + xa + dx_, 0, xb - xa, in_ch) +=
                    p.block(y * side + xa, colbase, xb - xa, in_ch);
        }
    }
}

template <class Scalar>
void conv_forward(const ConvLayer<Scalar>& c, const MatX<Scalar>& x, int side,
                  MatX<Scalar>& y, MatX<Scalar>& pbuf) {
    if (c.shape.ksize == 1) {
        y.noalias() = x * c.kernel;
    } else {
        im2col(x, side, c.shape.ksize, pbuf);
        y.noalias() = pbuf * c.kernel;
    }
    y.rowwise() += c.bias.transpose();
}

// dY -> (dK, dB, optionally dX). The conv input x is taken from the tape.
template <class Scalar>
void conv_backward(const ConvLayer<Scalar>& c, const MatX<Scalar>& x, int side,
                   const MatX<Scalar>& dy, MatX<Scalar>& dk, VecX<Scalar>& db,
                   MatX<Scalar>* dx, MatX<Scalar>& pbuf, MatX<Scalar>& dpbuf) {
    if (c.shape.ksize == 1) {
        dk.noalias() = x.transpose() * dy;
        if (dx) dx->noalias() = dy * c.kernel.transpose();
    } else {
        im2col(x, side, c.shape.ksize, pbuf);
        dk.noalias() = pbuf.transpose() * dy;
        if (dx) {
            dpbuf.noalias() = dy * c.kernel.transpose();
            dx->setZero(x.rows(), x.cols());
            col2im_add(dpbuf, side, c.shape.ksize, *dx);
        }
    }
    db = dy.colwise().sum();
}

template <class Scalar>
void relu_inplace(MatX<Scalar>& x) {
    x = x.cwiseMax(Scalar(0));
}

template <class Scalar>
void leaky_relu_inplace(MatX<Scalar>& x) {
    x = x.unaryExpr([](Scalar v) { return v > Scalar(0) ? v : Scalar(kLeakySlope) * v; });
}

// Gradient through the activation, using the recorded output.
template <class Scalar>
void relu_backward_inplace(MatX<Scalar>& g, const MatX<Scalar>& out) {
    g.array() *= (out.array() > Scalar(0)).template cast<Scalar>();
}

template <class Scalar>
void leaky_relu_backward_inplace(MatX<Scalar>& g, const MatX<Scalar>& out) {
    g.array() = (out.array() > Scalar(0))
                    .select(g.array(), Scalar(kLeakySlope) * g.array());
}

} // namespace

template <class Scalar>
MatX<Scalar> conv2d(const ConvLayer<Scalar>& layer, const MatX<Scalar>& x, int side) {
    if (x.rows() != static_cast<Eigen::Index>(side) * side ||
        x.cols() != layer.shape.in_ch)
        throw std::invalid_argument("conv2d: input shape mismatch");
    MatX<Scalar> y, pbuf;
    conv_forward(layer, x, side, y, pbuf);
    return y;
}

template MatX<float> conv2d<float>(const ConvLayer<float>&, const MatX<float>&, int);
template MatX<double> conv2d<double>(const ConvLayer<double>&, const MatX<double>&, int);

// --------------------------------------------------------------------------
// DenoiserWeights

template <class Scalar>
void DenoiserWeights<Scalar>::assign_topology(int num_subarrays, int aes_per_subarray) {
    const int side = static_cast<int>(std::lround(std::sqrt(double(aes_per_subarray))));
    if (num_subarrays < 1 || side * side != aes_per_subarray)
        throw std::invalid_argument("DenoiserWeights: S_bar must be a perfect square");
    s_ = num_subarrays;
    s_bar_ = aes_per_subarray;
    side_ = side;
    const auto shapes = denoiser_shapes(s_);
    for (int l = 0; l < kNumConvLayers; ++l) layers_[l].shape = shapes[l];
}

template <class Scalar>
void DenoiserWeights<Scalar>::validate() const {
    const auto shapes = denoiser_shapes(s_);
    for (int l = 0; l < kNumConvLayers; ++l) {
        const auto& ly = layers_[l];
        if (ly.shape.out_ch != shapes[l].out_ch || ly.shape.in_ch != shapes[l].in_ch ||
            ly.shape.ksize != shapes[l].ksize)
            throw std::invalid_argument("DenoiserWeights: unexpected layer shape");
        if (ly.kernel.rows() != ly.shape.in_ch * ly.shape.ksize * ly.shape.ksize ||
            ly.kernel.cols() != ly.shape.out_ch ||
            ly.bias.size() != ly.shape.out_ch)
            throw std::invalid_argument("DenoiserWeights: parameter size mismatch");
    }
}

template <class Scalar>
DenoiserWeights<Scalar> DenoiserWeights<Scalar>::zeros(int num_subarrays,
                                                       int aes_per_subarray) {
    DenoiserWeights w;
    w.assign_topology(num_subarrays, aes_per_subarray);
    for (auto& ly : w.layers_) ly.set_zero();
    return w;
}

template <class Scalar>
DenoiserWeights<Scalar> DenoiserWeights<Scalar>::random_init(int num_subarrays,
                                                             int aes_per_subarray,
                                                             std::uint64_t seed) {
    DenoiserWeights w = zeros(num_subarrays, aes_per_subarray);
    Rng rng(seed);
    for (auto& ly : w.layers_) {
        const double fan_in = ly.shape.in_ch * ly.shape.ksize * ly.shape.ksize;
        const double limit = 1.0 / std::sqrt(fan_in);
        Scalar* data = ly.kernel.data();
        for (Eigen::Index i = 0; i < ly.kernel.size(); ++i)
            data[i] = static_cast<Scalar>(rng.uniform(-limit, limit));
        for (Eigen::Index i = 0; i < ly.bias.size(); ++i)
            ly.bias[i] = static_cast<Scalar>(rng.uniform(-limit, limit));
    }
    return w;
}

template <class Scalar>
VecX<Scalar> DenoiserWeights<Scalar>::forward(const VecX<Scalar>& u,
                                              Workspace<Scalar>& ws) const {
    if (u.size() != dim()) throw std::invalid_argument("denoiser forward: bad length");
    const int npix = s_bar_;
    const int ch = 2 * s_;
    Eigen::Map<const MatX<Scalar>> x0(u.data(), npix, ch);

    conv_forward(layers_[0], MatX<Scalar>(x0), side_, ws.a, ws.patches); // lift
    for (int b = 0; b < 3; ++b) {
        conv_forward(layers_[1 + 2 * b], ws.a, side_, ws.b, ws.patches);
        relu_inplace(ws.b);
        conv_forward(layers_[2 + 2 * b], ws.b, side_, ws.c, ws.patches);
        relu_inplace(ws.c);
        ws.a += ws.c; // skip connection
    }
    conv_forward(layers_[7], ws.a, side_, ws.b, ws.patches);
    leaky_relu_inplace(ws.b);
    conv_forward(layers_[8], ws.b, side_, ws.c, ws.patches);

    VecX<Scalar> out(dim());
    Eigen::Map<MatX<Scalar>>(out.data(), npix, ch) = ws.c;
    return out;
}

template <class Scalar>
VecX<Scalar> DenoiserWeights<Scalar>::forward(const VecX<Scalar>& u) const {
    Workspace<Scalar> ws;
    return forward(u, ws);
}

// Tape slots: 0 x0, 1 lift-out, per block b: {3b+2 t1, 3b+3 t2, 3b+4 block-out},
// i.e. 2,3,4 / 5,6,7 / 8,9,10, and 11 head mid. Slot 1 is also block 0 input;
// block b>0 input is slot 3b+1.
template <class Scalar>
VecX<Scalar> DenoiserWeights<Scalar>::forward_taped(const VecX<Scalar>& u,
                                                    GradientTape<Scalar>& tape,
                                                    Workspace<Scalar>& ws) const {
    if (u.size() != dim()) throw std::invalid_argument("denoiser forward: bad length");
    const int npix = s_bar_;
    const int ch = 2 * s_;
    Eigen::Map<const MatX<Scalar>> x0(u.data(), npix, ch);
    tape.store(0, MatX<Scalar>(x0));

    conv_forward(layers_[0], tape.get(0), side_, ws.a, ws.patches);
    tape.store(1, ws.a);
    for (int b = 0; b < 3; ++b) {
        conv_forward(layers_[1 + 2 * b], ws.a, side_, ws.b, ws.patches);
        relu_inplace(ws.b);
        tape.store(3 * b + 2, ws.b);
        conv_forward(layers_[2 + 2 * b], ws.b, side_, ws.c, ws.patches);
        relu_inplace(ws.c);
        tape.store(3 * b + 3, ws.c);
        ws.a += ws.c;
        tape.store(3 * b + 4, ws.a);
    }
    conv_forward(layers_[7], ws.a, side_, ws.b, ws.patches);
    leaky_relu_inplace(ws.b);
    tape.store(11, ws.b);
    conv_forward(layers_[8], ws.b, side_, ws.c, ws.patches);
    tape.valid = true;

    VecX<Scalar> out(dim());
    Eigen::Map<MatX<Scalar>>(out.data(), npix, ch) = ws.c;
    return out;
}

template <class Scalar>
void DenoiserWeights<Scalar>::backward(const GradientTape<Scalar>& tape,
                                       const VecX<Scalar>& upstream,
                                       DenoiserGrads<Scalar>& grads,
                                       VecX<Scalar>* grad_input,
                                       Workspace<Scalar>& ws) const {
    if (!tape.valid) throw std::logic_error("denoiser backward: stale tape");
    if (upstream.size() != dim())
        throw std::invalid_argument("denoiser backward: bad upstream length");
    const int npix = s_bar_;
    const int ch = 2 * s_;

    MatX<Scalar>& g = ws.g1;
    g = Eigen::Map<const MatX<Scalar>>(upstream.data(), npix, ch);

    // head2 (1x1, no activation)
    conv_backward(layers_[8], tape.get(11), side_, g, grads.kernel[8], grads.bias[8],
                  &ws.g2, ws.patches, ws.gp);
    g = ws.g2;
    leaky_relu_backward_inplace(g, tape.get(11));
    // head1 (1x1)
    conv_backward(layers_[7], tape.get(10), side_, g, grads.kernel[7], grads.bias[7],
                  &ws.g2, ws.patches, ws.gp);
    g = ws.g2;

    for (int b = 2; b >= 0; --b) {
        const MatX<Scalar>& block_in = tape.get(b == 0 ? 1 : 3 * b + 1);
        // through the second conv of the block
        ws.d = g;
        relu_backward_inplace(ws.d, tape.get(3 * b + 3));
        conv_backward(layers_[2 + 2 * b], tape.get(3 * b + 2), side_, ws.d,
                      grads.kernel[2 + 2 * b], grads.bias[2 + 2 * b], &ws.g2,
                      ws.patches, ws.gp);
        relu_backward_inplace(ws.g2, tape.get(3 * b + 2));
        conv_backward(layers_[1 + 2 * b], block_in, side_, ws.g2,
                      grads.kernel[1 + 2 * b], grads.bias[1 + 2 * b], &ws.d,
                      ws.patches, ws.gp);
        g += ws.d; // skip path adds the upstream gradient unchanged
    }

    conv_backward(layers_[0], tape.get(0), side_, g, grads.kernel[0], grads.bias[0],
                  grad_input ? &ws.g2 : nullptr, ws.patches, ws.gp);
    if (grad_input) {
        grad_input->resize(dim());
        Eigen::Map<MatX<Scalar>>(grad_input->data(), npix, ch) = ws.g2;
    }
}

template <class Scalar>
void DenoiserWeights<Scalar>::enforce_contraction(double lipschitz, double beta) {
    if (beta < 0.0 || beta >= 1.0)
        throw std::invalid_argument("enforce_contraction: beta must be in [0, 1)");
    if (lipschitz < 1.0) return;
    const Scalar factor =
        static_cast<Scalar>(std::pow(beta / lipschitz, 1.0 / kNumConvLayers));
    for (auto& ly : layers_) ly.kernel *= factor;
}

template <class Scalar>
void adam_step(DenoiserWeights<Scalar>& w, const DenoiserGrads<Scalar>& g,
               AdamState<Scalar>& state, double lr, double beta1, double beta2,
               double eps) {
    state.step += 1;
    const Scalar b1 = static_cast<Scalar>(beta1);
    const Scalar b2 = static_cast<Scalar>(beta2);
    const Scalar corr1 = static_cast<Scalar>(1.0 - std::pow(beta1, state.step));
    const Scalar corr2 = static_cast<Scalar>(1.0 - std::pow(beta2, state.step));
    const Scalar a = static_cast<Scalar>(lr);
    const Scalar e = static_cast<Scalar>(eps);

    auto update = [&](auto& param, auto& m, auto& v, const auto& grad) {
        m = b1 * m + (Scalar(1) - b1) * grad;
        v = (b2 * v.array() + (Scalar(1) - b2) * grad.array().square()).matrix();
        param.array() -= a * (m.array() / corr1) /
                         ((v.array() / corr2).sqrt() + e);
    };
    for (int l = 0; l < kNumConvLayers; ++l) {
        update(w.layers()[l].kernel, state.m_kernel[l], state.v_kernel[l], g.kernel[l]);
        update(w.layers()[l].bias, state.m_bias[l], state.v_bias[l], g.bias[l]);
    }
}

template <class Scalar>
double estimate_lipschitz(const DenoiserWeights<Scalar>& w,
                          const std::vector<VecX<Scalar>>& inputs,
                          double perturb_scale, std::uint64_t seed) {
    if (inputs.empty())
        throw std::invalid_argument("estimate_lipschitz: batch must be non-empty");
    double mean_norm = 0.0;
    for (const auto& h : inputs) mean_norm += h.template cast<double>().norm();
    mean_norm /= static_cast<double>(inputs.size());
    const double sigma = perturb_scale * mean_norm / std::sqrt(double(w.dim()));

    const int n = static_cast<int>(inputs.size());
    std::vector<double> nums(n), dens(n);
#pragma omp parallel
    {
        Workspace<Scalar> ws;
#pragma omp for schedule(static)
        for (int i = 0; i < n; ++i) {
            Rng rng(split_seed(seed, static_cast<std::uint64_t>(i)));
            VecX<Scalar> delta(w.dim());
            for (Eigen::Index j = 0; j < delta.size(); ++j)
                delta[j] = static_cast<Scalar>(sigma * rng.normal());
            const VecX<Scalar> base = w.forward(inputs[i], ws);
            const VecX<Scalar> pert = w.forward(inputs[i] + delta, ws);
            nums[i] = (pert - base).template cast<double>().norm();
            dens[i] = delta.template cast<double>().norm();
        }
    }
    double num = 0.0, den = 0.0;
    for (int i = 0; i < n; ++i) { // fixed reduction order
        num += nums[i];
        den += dens[i];
    }
    if (den == 0.0) throw numerical_error("estimate_lipschitz: zero perturbation");
    return num / den;
}

// --------------------------------------------------------------------------
// Weight files

namespace {

void append_matrix(std::vector<float>& blob, const MatX<float>& m) {
    blob.insert(blob.end(), m.data(), m.data() + m.size());
}
void append_vector(std::vector<float>& blob, const VecX<float>& v) {
    blob.insert(blob.end(), v.data(), v.data() + v.size());
}

const float* take_matrix(const float* p, const float* end, MatX<float>& m) {
    if (p + m.size() > end) throw io_error("weight blob too short");
    std::copy(p, p + m.size(), m.data());
    return p + m.size();
}
const float* take_vector(const float* p, const float* end, VecX<float>& v) {
    if (p + v.size() > end) throw io_error("weight blob too short");
    std::copy(p, p + v.size(), v.data());
    return p + v.size();
}

} // namespace

void save_weights(const std::string& path, const DenoiserWeights<float>& w,
                  const WeightFileMeta& meta, const AdamState<float>* adam) {
    w.validate();
    json manifest;
    manifest["kind"] = "weights";
    manifest["version"] = 1;
    manifest["S"] = w.num_subarrays();
    manifest["S_bar"] = w.aes_per_subarray();
    manifest["beta"] = w.target_beta;
    manifest["lipschitz_estimate"] = w.lipschitz_estimate;
    manifest["regime"] = meta.regime;
    manifest["epochs_completed"] = meta.epochs_completed;
    manifest["lr_next"] = meta.lr_next;
    manifest["train_seed"] = meta.train_seed;
    json layers = json::array();
    for (const auto& ly : w.layers())
        layers.push_back({{"name", ly.shape.name},
                          {"out", ly.shape.out_ch},
                          {"in", ly.shape.in_ch},
                          {"k", ly.shape.ksize}});
    manifest["layers"] = layers;
    manifest["adam"] = {{"present", adam != nullptr},
                        {"step", adam ? adam->step : 0}};
    if (!meta.extra_json.empty()) manifest["training"] = json::parse(meta.extra_json);

    std::vector<float> blob;
    for (const auto& ly : w.layers()) {
        append_matrix(blob, ly.kernel);
        append_vector(blob, ly.bias);
    }
    if (adam) {
        for (int l = 0; l < kNumConvLayers; ++l) {
            append_matrix(blob, adam->m_kernel[l]);
            append_vector(blob, adam->m_bias[l]);
        }
        for (int l = 0; l < kNumConvLayers; ++l) {
            append_matrix(blob, adam->v_kernel[l]);
            append_vector(blob, adam->v_bias[l]);
        }
    }
    write_container(path, manifest.dump(), blob);
}

LoadedWeights load_weights(const std::string& path) {
    auto [text, blob] = read_container(path);
    json manifest = json::parse(text, nullptr, false);
    if (manifest.is_discarded() || manifest.value("kind", "") != "weights")
        throw io_error("not a weight file: " + path);
    if (manifest.value("version", 0) != 1)
        throw io_error("unsupported weight file version: " + path);

    LoadedWeights out;
    out.weights = DenoiserWeights<float>::zeros(manifest.at("S").get<int>(),
                                                manifest.at("S_bar").get<int>());
    out.weights.target_beta = manifest.value("beta", 0.99);
    out.weights.lipschitz_estimate =
        manifest.value("lipschitz_estimate", std::numeric_limits<double>::quiet_NaN());
    out.meta.regime = manifest.value("regime", "");
    out.meta.epochs_completed = manifest.value("epochs_completed", 0);
    out.meta.lr_next = manifest.value("lr_next", 0.0);
    out.meta.train_seed = manifest.value("train_seed", std::uint64_t(0));
    if (manifest.contains("training")) out.meta.extra_json = manifest["training"].dump();

    const float* p = blob.data();
    const float* end = blob.data() + blob.size();
    for (auto& ly : out.weights.layers()) {
        p = take_matrix(p, end, ly.kernel);
        p = take_vector(p, end, ly.bias);
    }
    if (manifest.contains("adam") && manifest["adam"].value("present", false)) {
        AdamState<float> st = AdamState<float>::zeros_like(out.weights);
        st.step = manifest["adam"].value("step", 0l);
        for (int l = 0; l < kNumConvLayers; ++l) {
            p = take_matrix(p, end, st.m_kernel[l]);
            p = take_vector(p, end, st.m_bias[l]);
        }
        for (int l = 0; l < kNumConvLayers; ++l) {
            p = take_matrix(p, end, st.v_kernel[l]);
            p = take_vector(p, end, st.v_bias[l]);
        }
        out.adam = std::move(st);
    }
    if (p != end) throw io_error("weight blob has trailing data: " + path);
    out.weights.validate();
    return out;
}

// --------------------------------------------------------------------------
// Explicit instantiations

template class DenoiserWeights<float>;
template class DenoiserWeights<double>;
template void adam_step<float>(DenoiserWeights<float>&, const DenoiserGrads<float>&,
                               AdamState<float>&, double, double, double, double);
template void adam_step<double>(DenoiserWeights<double>&, const DenoiserGrads<double>&,
                                AdamState<double>&, double, double, double, double);
template double estimate_lipschitz<float>(const DenoiserWeights<float>&,
                                          const std::vector<VecX<float>>&, double,
                                          std::uint64_t);
template double estimate_lipschitz<double>(const DenoiserWeights<double>&,
                                           const std::vector<VecX<double>>&, double,
                                           std::uint64_t);

} // namespace thzce::nn
