#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tbcough/augmentation.hpp"  // child_seed
#include "tbcough/error.hpp"

namespace tbcough {

template <typename T>
struct Tensor4 {
    std::size_t n = 0, c = 0, h = 0, w = 0;
    std::vector<T> data;

    Tensor4() = default;
    Tensor4(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_, T fill = T{})
        : n(n_), c(c_), h(h_), w(w_), data(n_ * c_ * h_ * w_, fill) {}

    std::size_t plane_size() const noexcept { return h * w; }
    T* plane(std::size_t i, std::size_t ch) { return data.data() + (i * c + ch) * h * w; }
    const T* plane(std::size_t i, std::size_t ch) const { return data.data() + (i * c + ch) * h * w; }
    T& at(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) { return plane(i, ch)[y * w + x]; }
    const T& at(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) const { return plane(i, ch)[y * w + x]; }
    bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

/// Network and optimizer settings. Defaults follow the published training
/// table: batch 16, lr 6e-5, 150 epochs, 6 blocks of 5x5 convolutions,
/// dropout 0.25, cross-entropy, AdamW, linear one-cycle annealing.
struct CnnConfig {
    std::vector<std::size_t> channels{16, 32, 64, 128, 256, 256};
    std::size_t kernel = 5;
    std::size_t in_channels = 1;
    std::size_t input_h = 128;
    std::size_t input_w = 64;
    double dropout = 0.25;
    std::size_t batch_size = 16;
    double max_lr = 6e-5;
    std::size_t epochs = 150;
    double pct_start = 0.3;
    double div_factor = 25.0;
    double final_div_factor = 1e4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    void validate() const {
        require(!channels.empty(), ErrorCode::InvalidArgument, "need at least one conv block");
        require(kernel % 2 == 1, ErrorCode::InvalidArgument, "kernel size must be odd for same padding");
        require(dropout >= 0.0 && dropout < 1.0, ErrorCode::InvalidArgument, "dropout must be in [0, 1)");
        require(max_lr > 0.0, ErrorCode::InvalidArgument, "max_lr must be positive");
        require(batch_size >= 1, ErrorCode::InvalidArgument, "batch size must be >= 1");
        require(in_channels >= 1, ErrorCode::InvalidArgument, "in_channels must be >= 1");
    }
};

template <typename T>
struct ConvBlock {
    std::size_t in_ch = 0, out_ch = 0, k = 0;
    std::vector<T> weight;  // out_ch x in_ch x k x k
    std::vector<T> bias;
    std::vector<T> gamma;
    std::vector<T> beta;
    std::vector<T> running_mean;
    std::vector<T> running_var;

    bool operator==(const ConvBlock&) const = default;
};

template <typename T>
struct CnnModel {
    std::size_t in_channels = 1;
    std::size_t kernel = 5;
    std::vector<ConvBlock<T>> blocks;
    std::vector<T> head_weight;  // 2 x channels of last block
    std::vector<T> head_bias;    // 2

    bool operator==(const CnnModel&) const = default;
};

/// Visits trainable tensors in a fixed order: per block weight, bias,
/// gamma, beta; then head weight and bias.
template <typename Model, typename Fn>
void for_each_parameter(Model& m, Fn&& fn) {
    for (auto& b : m.blocks) {
        fn(std::span(b.weight));
        fn(std::span(b.bias));
        fn(std::span(b.gamma));
        fn(std::span(b.beta));
    }
    fn(std::span(m.head_weight));
    fn(std::span(m.head_bias));
}

template <typename T>
std::size_t parameter_count(const CnnModel<T>& m) {
    std::size_t n = 0;
    for_each_parameter(m, [&](auto s) { n += s.size(); });
    return n;
}

/// Same layout as `m`, all zeros (used for gradients and optimizer moments).
template <typename T>
CnnModel<T> zeros_like(const CnnModel<T>& m) {
    CnnModel<T> z = m;
    for_each_parameter(z, [](auto s) { std::fill(s.begin(), s.end(), T{}); });
    for (auto& b : z.blocks) {
        std::fill(b.running_mean.begin(), b.running_mean.end(), T{});
        std::fill(b.running_var.begin(), b.running_var.end(), T{});
    }
    return z;
}

/// Kaiming-uniform (fan-in) weights, zero biases, batch-norm scale 1 / shift 0.
template <typename T>
CnnModel<T> cnn_init(const CnnConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    CnnModel<T> m;
    m.in_channels = cfg.in_channels;
    m.kernel = cfg.kernel;
    std::mt19937_64 rng(seed);
    std::size_t in = cfg.in_channels;
    for (std::size_t out : cfg.channels) {
        ConvBlock<T> b;
        b.in_ch = in;
        b.out_ch = out;
        b.k = cfg.kernel;
        const double bound = std::sqrt(6.0 / static_cast<double>(in * cfg.kernel * cfg.kernel));
        std::uniform_real_distribution<double> u(-bound, bound);
        b.weight.resize(out * in * cfg.kernel * cfg.kernel);
        for (auto& v : b.weight) v = static_cast<T>(u(rng));
        b.bias.assign(out, T{});
        b.gamma.assign(out, T{1});
        b.beta.assign(out, T{});
        b.running_mean.assign(out, T{});
        b.running_var.assign(out, T{1});
        m.blocks.push_back(std::move(b));
        in = out;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    m.head_weight.resize(2 * in);
    for (auto& v : m.head_weight) v = static_cast<T>(u(rng));
    m.head_bias.assign(2, T{});
    return m;
}

// ---------------------------------------------------------------------------
// Layers

namespace detail {

/// Unfolds one (C, H, W) image into a (C*k*k, H*W) patch matrix for "same"
/// padding, row index (c*k + ky)*k + kx.
template <typename T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* col) {
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto h = static_cast<std::ptrdiff_t>(H), w = static_cast<std::ptrdiff_t>(W);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* dst = col + ((c * k + ky) * k + kx) * H * W;
                const auto dy = static_cast<std::ptrdiff_t>(ky) - pad, dx = static_cast<std::ptrdiff_t>(kx) - pad;
                const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(w, w - dx);
                for (std::ptrdiff_t y = 0; y < h; ++y) {
                    T* d = dst + y * w;
                    const std::ptrdiff_t yy = y + dy;
                    if (yy < 0 || yy >= h || x0 >= x1) {
                        std::fill(d, d + w, T{});
                        continue;
                    }
                    const T* s = img + (static_cast<std::ptrdiff_t>(c) * h + yy) * w + dx;
                    std::fill(d, d + x0, T{});
                    std::copy(s + x0, s + x1, d + x0);
                    std::fill(d + x1, d + w, T{});
                }
            }
}

/// Adjoint of im2col: accumulates patch gradients back into the image.
template <typename T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* img) {
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto h = static_cast<std::ptrdiff_t>(H), w = static_cast<std::ptrdiff_t>(W);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* src = col + ((c * k + ky) * k + kx) * H * W;
                const auto dy = static_cast<std::ptrdiff_t>(ky) - pad, dx = static_cast<std::ptrdiff_t>(kx) - pad;
                const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(w, w - dx);
                for (std::ptrdiff_t y = 0; y < h; ++y) {
                    const std::ptrdiff_t yy = y + dy;
                    if (yy < 0 || yy >= h) continue;
                    T* d = img + (static_cast<std::ptrdiff_t>(c) * h + yy) * w + dx;
                    const T* s = src + y * w;
                    for (std::ptrdiff_t xx = x0; xx < x1; ++xx) d[xx] += s[xx];
                }
            }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

/// Stride-1 cross-correlation with zero "same" padding.
template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, std::span<const T> weight, std::span<const T> bias,
                          std::size_t out_ch, std::size_t k) {
    require(k % 2 == 1, ErrorCode::InvalidArgument, "kernel size must be odd");
    require(weight.size() == out_ch * x.c * k * k, ErrorCode::ShapeMismatch, "conv weight shape mismatch");
    require(bias.size() == out_ch, ErrorCode::ShapeMismatch, "conv bias shape mismatch");
    const auto HW = static_cast<Eigen::Index>(x.h * x.w), K = static_cast<Eigen::Index>(x.c * k * k);
    Tensor4<T> out(x.n, out_ch, x.h, x.w);
    std::vector<T> col(static_cast<std::size_t>(K * HW));
    Eigen::Map<const detail::RowMat<T>> Wm(weight.data(), static_cast<Eigen::Index>(out_ch), K);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.data(), static_cast<Eigen::Index>(out_ch));
    for (std::size_t i = 0; i < x.n; ++i) {
        detail::im2col(x.plane(i, 0), x.c, x.h, x.w, k, col.data());
        Eigen::Map<const detail::RowMat<T>> C(col.data(), K, HW);
        Eigen::Map<detail::RowMat<T>> Z(out.plane(i, 0), static_cast<Eigen::Index>(out_ch), HW);
        Z.noalias() = Wm * C;
        Z.colwise() += b;
    }
    return out;
}

/// Gradients of conv2d_forward, accumulated into `dweight` and `dbias`.
/// `dx` may be null for the first layer.
template <typename T>
void conv2d_backward(const Tensor4<T>& x, std::span<const T> weight, const Tensor4<T>& dz, std::size_t k,
                     Tensor4<T>* dx, std::span<T> dweight, std::span<T> dbias) {
    const std::size_t out_ch = dz.c;
    const auto HW = static_cast<Eigen::Index>(x.h * x.w), K = static_cast<Eigen::Index>(x.c * k * k);
    const auto O = static_cast<Eigen::Index>(out_ch);
    if (dx) *dx = Tensor4<T>(x.n, x.c, x.h, x.w);
    std::vector<T> col(static_cast<std::size_t>(K * HW)), dcol;
    if (dx) dcol.resize(col.size());
    Eigen::Map<const detail::RowMat<T>> Wm(weight.data(), O, K);
    Eigen::Map<detail::RowMat<T>> dW(dweight.data(), O, K);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(dbias.data(), O);
    for (std::size_t i = 0; i < x.n; ++i) {
        Eigen::Map<const detail::RowMat<T>> G(dz.plane(i, 0), O, HW);
        // Plain loop: Eigen's vectorized reductions peel by pointer alignment,
        // which would make the rounding depend on where the allocator put dz.
        for (std::size_t o = 0; o < out_ch; ++o) {
            const T* g = dz.plane(i, o);
            T acc = 0;
            for (Eigen::Index p = 0; p < HW; ++p) acc += g[p];
            db[static_cast<Eigen::Index>(o)] += acc;
        }
        detail::im2col(x.plane(i, 0), x.c, x.h, x.w, k, col.data());
        Eigen::Map<const detail::RowMat<T>> C(col.data(), K, HW);
        dW.noalias() += G * C.transpose();
        if (dx) {
            Eigen::Map<detail::RowMat<T>> D(dcol.data(), K, HW);
            D.noalias() = Wm.transpose() * G;
            detail::col2im_add(dcol.data(), x.c, x.h, x.w, k, dx->plane(i, 0));
        }
    }
}

enum class Mode { Train, Eval };

template <typename T>
struct BlockCache {
    Tensor4<T> input;
    Tensor4<T> xhat;        // normalized conv output
    Tensor4<T> pre_relu;    // gamma * xhat + beta
    std::vector<T> inv_std;
    std::vector<double> batch_mean;
    std::vector<double> batch_var;  // biased
    std::vector<std::uint32_t> argmax;  // per pooled element, flat index into the un-pooled plane
    std::vector<T> dropout_scale;           // per pooled element, 0 or 1/(1-p); empty when off
};

/// Inverted dropout multipliers: 0 with probability p, else 1/(1-p).
template <typename T>
std::vector<T> dropout_mask(std::size_t count, double p, std::uint64_t seed) {
    std::vector<T> mask(count);
    std::mt19937_64 rng(seed);
    const T keep = static_cast<T>(1.0 / (1.0 - p));
    for (auto& m : mask) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        m = u < p ? T{} : keep;
    }
    return mask;
}

/// conv -> batch-norm -> ReLU -> 2x2 max-pool -> dropout (train only).
/// Eval mode normalizes with running statistics and never drops.
template <typename T>
Tensor4<T> block_forward(const ConvBlock<T>& b, const Tensor4<T>& x, Mode mode, double dropout,
                         std::uint64_t dropout_seed, double bn_eps = 1e-5, BlockCache<T>* cache = nullptr) {
    require(x.c == b.in_ch, ErrorCode::ShapeMismatch, "block input channel mismatch");
    require(x.h >= 2 && x.w >= 2, ErrorCode::ShapeMismatch, "input too small for 2x2 pooling");
    auto z = conv2d_forward<T>(x, b.weight, b.bias, b.out_ch, b.k);
    const std::size_t C = b.out_ch, plane = z.plane_size();
    const double count = static_cast<double>(z.n * plane);

    std::vector<double> mean(C), var(C);
    std::vector<T> inv_std(C);
    for (std::size_t c = 0; c < C; ++c) {
        if (mode == Mode::Train) {
            double s = 0.0;
            for (std::size_t i = 0; i < z.n; ++i) {
                const T* p = z.plane(i, c);
                for (std::size_t j = 0; j < plane; ++j) s += p[j];
            }
            const double mu = s / count;
            double v = 0.0;
            for (std::size_t i = 0; i < z.n; ++i) {
                const T* p = z.plane(i, c);
                for (std::size_t j = 0; j < plane; ++j) v += (p[j] - mu) * (p[j] - mu);
            }
            mean[c] = mu;
            var[c] = v / count;
        } else {
            mean[c] = b.running_mean[c];
            var[c] = b.running_var[c];
        }
        inv_std[c] = static_cast<T>(1.0 / std::sqrt(var[c] + bn_eps));
    }

    Tensor4<T> xhat(z.n, C, z.h, z.w), y(z.n, C, z.h, z.w);
    for (std::size_t i = 0; i < z.n; ++i)
        for (std::size_t c = 0; c < C; ++c) {
            const T* zp = z.plane(i, c);
            T* xp = xhat.plane(i, c);
            T* yp = y.plane(i, c);
            const T mu = static_cast<T>(mean[c]);
            const T is = inv_std[c], g = b.gamma[c], be = b.beta[c];
            for (std::size_t j = 0; j < plane; ++j) {
                xp[j] = (zp[j] - mu) * is;
                yp[j] = g * xp[j] + be;
            }
        }

    const std::size_t ph = z.h / 2, pw = z.w / 2;
    Tensor4<T> out(z.n, C, ph, pw);
    std::vector<std::uint32_t> argmax(out.data.size());
    for (std::size_t i = 0; i < z.n; ++i)
        for (std::size_t c = 0; c < C; ++c) {
            const T* yp = y.plane(i, c);
            T* op = out.plane(i, c);
            std::uint32_t* ap = argmax.data() + (i * C + c) * ph * pw;
            for (std::size_t py = 0; py < ph; ++py)
                for (std::size_t px = 0; px < pw; ++px) {
                    // ReLU then max; ties resolve to the first position in
                    // row-major order.
                    std::size_t best = (2 * py) * z.w + 2 * px;
                    T bv = std::max(yp[best], T{});
                    for (std::size_t cand : {best + 1, best + z.w, best + z.w + 1}) {
                        const T v = std::max(yp[cand], T{});
                        if (v > bv) {
                            bv = v;
                            best = cand;
                        }
                    }
                    op[py * pw + px] = bv;
                    ap[py * pw + px] = static_cast<std::uint32_t>(best);
                }
        }

    std::vector<T> scale;
    if (mode == Mode::Train && dropout > 0.0) {
        scale = dropout_mask<T>(out.data.size(), dropout, dropout_seed);
        for (std::size_t j = 0; j < out.data.size(); ++j) out.data[j] *= scale[j];
    }

    if (cache) {
        cache->input = x;
        cache->xhat = std::move(xhat);
        cache->pre_relu = std::move(y);
        cache->inv_std = std::move(inv_std);
        cache->batch_mean = std::move(mean);
        cache->batch_var = std::move(var);
        cache->argmax = std::move(argmax);
        cache->dropout_scale = std::move(scale);
    }
    return out;
}

template <typename T>
void check_input_geometry(const CnnModel<T>& m, const Tensor4<T>& x) {
    require(x.c == m.in_channels, ErrorCode::ShapeMismatch, "input channel count mismatch");
    std::size_t h = x.h, w = x.w;
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        require(h >= 2 && w >= 2, ErrorCode::ShapeMismatch,
                "input too small for " + std::to_string(m.blocks.size()) + " poolings");
        h /= 2;
        w /= 2;
    }
}

namespace detail {
template <typename T>
std::vector<T> global_average_pool(const Tensor4<T>& x) {
    std::vector<T> out(x.n * x.c);
    for (std::size_t i = 0; i < x.n; ++i)
        for (std::size_t c = 0; c < x.c; ++c) {
            const T* p = x.plane(i, c);
            double s = 0.0;
            for (std::size_t j = 0; j < x.plane_size(); ++j) s += p[j];
            out[i * x.c + c] = static_cast<T>(s / static_cast<double>(x.plane_size()));
        }
    return out;
}

template <typename T>
std::vector<T> dense_logits(const CnnModel<T>& m, const std::vector<T>& feats, std::size_t n, std::size_t C) {
    std::vector<T> logits(n * 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < 2; ++o) {
            T acc = m.head_bias[o];
            for (std::size_t c = 0; c < C; ++c) acc += m.head_weight[o * C + c] * feats[i * C + c];
            logits[i * 2 + o] = acc;
        }
    return logits;
}
}  // namespace detail

/// Eval-mode logits, batch x 2 (row-major).
template <typename T>
std::vector<T> forward_logits(const CnnModel<T>& m, const Tensor4<T>& x, double bn_eps = 1e-5) {
    check_input_geometry(m, x);
    Tensor4<T> h = x;
    for (const auto& b : m.blocks) h = block_forward(b, h, Mode::Eval, 0.0, 0, bn_eps);
    const auto feats = detail::global_average_pool(h);
    return detail::dense_logits(m, feats, h.n, h.c);
}

template <typename T>
std::vector<double> softmax_positive(std::span<const T> logits) {
    std::vector<double> out(logits.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double a = logits[2 * i], b = logits[2 * i + 1];
        out[i] = 1.0 / (1.0 + std::exp(a - b));
    }
    return out;
}

template <typename T>
struct LossAndGrads {
    double loss = 0.0;
    std::size_t correct = 0;
    CnnModel<T> grads;
    std::vector<std::vector<double>> batch_mean;  // per block
    std::vector<std::vector<double>> batch_var;   // per block, biased
    std::vector<double> batch_count;              // per block, elements per channel
};

namespace detail {
/// Max-pool and ReLU backward: each pooled gradient goes to its argmax in the
/// un-pooled plane when that pre-activation was positive.
template <typename T>
Tensor4<T> pool_relu_backward(const Tensor4<T>& pre_relu, const std::vector<std::uint32_t>& argmax,
                              const Tensor4<T>& dpooled) {
    const auto& y = pre_relu;
    Tensor4<T> dy(y.n, y.c, y.h, y.w);
    for (std::size_t i = 0; i < y.n; ++i)
        for (std::size_t c = 0; c < y.c; ++c) {
            const std::size_t base = (i * y.c + c) * dpooled.plane_size();
            const T* yp = y.plane(i, c);
            T* dyp = dy.plane(i, c);
            const T* dp = dpooled.plane(i, c);
            for (std::size_t j = 0; j < dpooled.plane_size(); ++j) {
                const std::uint32_t a = argmax[base + j];
                if (yp[a] > T{}) dyp[a] += dp[j];
            }
        }
    return dy;
}
}  // namespace detail

/// Training-mode forward (batch statistics, dropout) and full backward pass
/// for mean softmax cross-entropy over the batch.
template <typename T>
LossAndGrads<T> loss_and_grads(const CnnModel<T>& m, const Tensor4<T>& x, std::span<const int> labels,
                               double dropout = 0.0, std::uint64_t dropout_seed = 0, double bn_eps = 1e-5) {
    check_input_geometry(m, x);
    require(labels.size() == x.n, ErrorCode::LengthMismatch, "labels do not match batch size");
    for (int l : labels) require(l == 0 || l == 1, ErrorCode::InvalidArgument, "labels must be 0 or 1");

    const std::size_t B = m.blocks.size();
    std::vector<BlockCache<T>> caches(B);
    Tensor4<T> h = x;
    for (std::size_t b = 0; b < B; ++b)
        h = block_forward(m.blocks[b], h, Mode::Train, dropout, child_seed(dropout_seed, b), bn_eps, &caches[b]);
    const std::size_t N = h.n, C = h.c;
    const auto feats = detail::global_average_pool(h);
    const auto logits = detail::dense_logits(m, feats, N, C);

    LossAndGrads<T> out;
    out.grads = zeros_like(m);
    std::vector<T> dlogits(N * 2);
    double loss = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const double a = logits[2 * i], c = logits[2 * i + 1];
        const double mx = std::max(a, c);
        const double lse = mx + std::log(std::exp(a - mx) + std::exp(c - mx));
        loss += lse - (labels[i] ? c : a);
        const double p1 = std::exp(c - lse), p0 = std::exp(a - lse);
        dlogits[2 * i] = static_cast<T>((p0 - (labels[i] == 0)) / static_cast<double>(N));
        dlogits[2 * i + 1] = static_cast<T>((p1 - (labels[i] == 1)) / static_cast<double>(N));
        out.correct += static_cast<std::size_t>((c > a) == (labels[i] == 1));
    }
    out.loss = loss / static_cast<double>(N);
    require(std::isfinite(out.loss), ErrorCode::Divergence, "non-finite loss");

    // Dense head and global average pool.
    auto& g = out.grads;
    std::vector<T> dfeats(N * C, T{});
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t o = 0; o < 2; ++o) {
            const T d = dlogits[i * 2 + o];
            g.head_bias[o] += d;
            for (std::size_t c = 0; c < C; ++c) {
                g.head_weight[o * C + c] += d * feats[i * C + c];
                dfeats[i * C + c] += d * m.head_weight[o * C + c];
            }
        }
    Tensor4<T> dh(N, C, h.h, h.w);
    const T inv_area = static_cast<T>(1.0 / static_cast<double>(h.plane_size()));
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c) {
            T* p = dh.plane(i, c);
            std::fill(p, p + dh.plane_size(), dfeats[i * C + c] * inv_area);
        }

    for (std::size_t b = B; b-- > 0;) {
        const auto& blk = m.blocks[b];
        auto& gb = g.blocks[b];
        auto& cache = caches[b];
        if (!cache.dropout_scale.empty())
            for (std::size_t j = 0; j < dh.data.size(); ++j) dh.data[j] *= cache.dropout_scale[j];

        const auto& y = cache.pre_relu;
        const Tensor4<T> dy = detail::pool_relu_backward(y, cache.argmax, dh);

        // Batch-norm (training statistics).
        const std::size_t plane = y.plane_size();
        const double M = static_cast<double>(y.n * plane);
        Tensor4<T> dz(y.n, y.c, y.h, y.w);
        for (std::size_t c = 0; c < y.c; ++c) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0, dgamma = 0.0, dbeta = 0.0;
            for (std::size_t i = 0; i < y.n; ++i) {
                const T* dyp = dy.plane(i, c);
                const T* xp = cache.xhat.plane(i, c);
                for (std::size_t j = 0; j < plane; ++j) {
                    dgamma += static_cast<double>(dyp[j]) * xp[j];
                    dbeta += dyp[j];
                }
            }
            gb.gamma[c] += static_cast<T>(dgamma);
            gb.beta[c] += static_cast<T>(dbeta);
            sum_dxhat = dbeta * blk.gamma[c];
            sum_dxhat_xhat = dgamma * blk.gamma[c];
            const double is = cache.inv_std[c];
            for (std::size_t i = 0; i < y.n; ++i) {
                const T* dyp = dy.plane(i, c);
                const T* xp = cache.xhat.plane(i, c);
                T* dzp = dz.plane(i, c);
                for (std::size_t j = 0; j < plane; ++j) {
                    const double dxhat = static_cast<double>(dyp[j]) * blk.gamma[c];
                    dzp[j] = static_cast<T>(is / M * (M * dxhat - sum_dxhat - xp[j] * sum_dxhat_xhat));
                }
            }
        }

        Tensor4<T> dx;
        conv2d_backward<T>(cache.input, blk.weight, dz, blk.k, b > 0 ? &dx : nullptr, gb.weight, gb.bias);
        out.batch_mean.insert(out.batch_mean.begin(), cache.batch_mean);
        out.batch_var.insert(out.batch_var.begin(), cache.batch_var);
        out.batch_count.insert(out.batch_count.begin(), M);
        if (b > 0) dh = std::move(dx);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

template <typename T>
struct AdamWState {
    CnnModel<T> m;
    CnnModel<T> v;
    std::size_t step = 0;
};

template <typename T>
AdamWState<T> adamw_init(const CnnModel<T>& params) {
    return {zeros_like(params), zeros_like(params), 0};
}

/// One AdamW update with bias-corrected moments and decoupled decay:
/// p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
template <typename T>
void adamw_step(CnnModel<T>& params, const CnnModel<T>& grads, AdamWState<T>& state, double lr,
                double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    std::vector<std::span<T>> p, mm, vv;
    std::vector<std::span<const T>> g;
    for_each_parameter(params, [&](auto s) { p.push_back(s); });
    for_each_parameter(state.m, [&](auto s) { mm.push_back(s); });
    for_each_parameter(state.v, [&](auto s) { vv.push_back(s); });
    for_each_parameter(grads, [&](auto s) { g.push_back(s); });
    require(p.size() == g.size(), ErrorCode::ShapeMismatch, "gradient layout mismatch");
    for (std::size_t t = 0; t < g.size(); ++t)
        for (T v : g[t]) require(std::isfinite(static_cast<double>(v)), ErrorCode::NonFinite, "non-finite gradient");

    ++state.step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    const double decay = 1.0 - lr * weight_decay;
    for (std::size_t t = 0; t < p.size(); ++t) {
        require(p[t].size() == g[t].size(), ErrorCode::ShapeMismatch, "gradient layout mismatch");
        for (std::size_t i = 0; i < p[t].size(); ++i) {
            const double gi = g[t][i];
            const double mi = beta1 * mm[t][i] + (1.0 - beta1) * gi;
            const double vi = beta2 * vv[t][i] + (1.0 - beta2) * gi * gi;
            mm[t][i] = static_cast<T>(mi);
            vv[t][i] = static_cast<T>(vi);
            const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
            p[t][i] = static_cast<T>(static_cast<double>(p[t][i]) * decay - lr * update);
        }
    }
}

/// One-cycle learning rate with linear annealing: from max_lr/div up to
/// max_lr at step pct_start*total, then down to max_lr/final_div at the last
/// step.
inline double onecycle_lr(std::size_t step, std::size_t total_steps, double max_lr, double pct_start = 0.3,
                          double div = 25.0, double final_div = 1e4) {
    require(total_steps > 0, ErrorCode::InvalidArgument, "total_steps must be positive");
    require(step < total_steps, ErrorCode::InvalidArgument, "step out of range");
    require(pct_start > 0.0 && pct_start < 1.0, ErrorCode::InvalidArgument, "pct_start must be in (0, 1)");
    const double start = max_lr / div, end = max_lr / final_div;
    const double peak = pct_start * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    auto lerp = [](double a, double b, double f) { return a * (1.0 - f) + b * f; };
    if (s <= peak) return lerp(start, max_lr, s / peak);
    const double last = static_cast<double>(total_steps - 1);
    if (last <= peak) return max_lr;
    return lerp(max_lr, end, (s - peak) / (last - peak));
}

// ---------------------------------------------------------------------------
// Training

struct CnnEpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    std::optional<double> val_loss;
    std::optional<double> val_accuracy;
};

template <typename T>
struct CnnTrainResult {
    CnnModel<T> model;
    std::vector<CnnEpochStats> history;
    std::vector<double> lr_log;
};

/// A labeled image set: each image is in_channels x input_h x input_w.
template <typename T>
struct ImageSet {
    std::vector<std::vector<T>> images;
    std::vector<int> labels;
};

template <typename T>
Tensor4<T> make_batch(const std::vector<std::vector<T>>& images, std::span<const std::size_t> idx,
                      const CnnConfig& cfg) {
    Tensor4<T> x(idx.size(), cfg.in_channels, cfg.input_h, cfg.input_w);
    const std::size_t sz = cfg.in_channels * cfg.input_h * cfg.input_w;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& img = images[idx[i]];
        require(img.size() == sz, ErrorCode::ShapeMismatch, "image size does not match config");
        std::copy(img.begin(), img.end(), x.data.begin() + static_cast<std::ptrdiff_t>(i * sz));
    }
    return x;
}

/// Eval-mode positive-class probabilities, computed in chunks of `batch`.
template <typename T>
std::vector<double> cnn_predict_proba(const CnnModel<T>& m, const std::vector<std::vector<T>>& images,
                                      const CnnConfig& cfg, std::size_t batch = 16) {
    std::vector<double> out;
    out.reserve(images.size());
    std::vector<std::size_t> idx;
    for (std::size_t s = 0; s < images.size(); s += batch) {
        idx.clear();
        for (std::size_t i = s; i < std::min(images.size(), s + batch); ++i) idx.push_back(i);
        const auto x = make_batch(images, idx, cfg);
        const auto logits = forward_logits(m, x, cfg.bn_eps);
        const auto p = softmax_positive<T>(logits);
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

/// Shuffled mini-batches, AdamW and the one-cycle schedule. Deterministic in
/// `seed`. `validation`, if given, is only scored for the per-epoch history.
template <typename T>
CnnTrainResult<T> cnn_train(const ImageSet<T>& train, const CnnConfig& cfg, std::uint64_t seed,
                            const ImageSet<T>* validation = nullptr,
                            const std::function<void(const CnnEpochStats&)>& on_epoch = {}) {
    cfg.validate();
    require(train.images.size() == train.labels.size(), ErrorCode::LengthMismatch, "images and labels differ");
    require(!train.images.empty(), ErrorCode::InvalidArgument, "no training images");
    const auto pos = std::count(train.labels.begin(), train.labels.end(), 1);
    require(pos > 0 && static_cast<std::size_t>(pos) < train.labels.size(), ErrorCode::SingleClass,
            "training labels contain a single class");

    CnnTrainResult<T> result;
    result.model = cnn_init<T>(cfg, child_seed(seed, 0));
    auto state = adamw_init(result.model);
    std::mt19937_64 shuffle_rng(child_seed(seed, 1));

    const std::size_t n = train.images.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = steps_per_epoch * cfg.epochs;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> batch_labels;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t s = 0; s < n; s += cfg.batch_size) {
            const std::size_t e = std::min(n, s + cfg.batch_size);
            const std::span<const std::size_t> idx(order.data() + s, e - s);
            const auto x = make_batch(train.images, idx, cfg);
            batch_labels.clear();
            for (std::size_t i : idx) batch_labels.push_back(train.labels[i]);
            LossAndGrads<T> lg;
            try {
                lg = loss_and_grads(result.model, x, batch_labels, cfg.dropout, child_seed(seed, 1000 + step),
                                    cfg.bn_eps);
            } catch (const Error& err) {
                if (err.code() == ErrorCode::Divergence)
                    fail(ErrorCode::Divergence, "training diverged at epoch " + std::to_string(epoch));
                throw;
            }
            const double lr = onecycle_lr(step, total, cfg.max_lr, cfg.pct_start, cfg.div_factor,
                                          cfg.final_div_factor);
            result.lr_log.push_back(lr);
            adamw_step(result.model, lg.grads, state, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps);
            // Running statistics use the unbiased batch variance.
            for (std::size_t b = 0; b < result.model.blocks.size(); ++b) {
                auto& blk = result.model.blocks[b];
                const double dims = lg.batch_count[b];
                const double unbias = dims > 1 ? dims / (dims - 1) : 1.0;
                for (std::size_t c = 0; c < blk.out_ch; ++c) {
                    blk.running_mean[c] = static_cast<T>((1 - cfg.bn_momentum) * blk.running_mean[c] +
                                                         cfg.bn_momentum * lg.batch_mean[b][c]);
                    blk.running_var[c] = static_cast<T>((1 - cfg.bn_momentum) * blk.running_var[c] +
                                                        cfg.bn_momentum * lg.batch_var[b][c] * unbias);
                }
            }
            loss_sum += lg.loss * static_cast<double>(idx.size());
            correct += lg.correct;
            ++step;
        }
        CnnEpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / static_cast<double>(n);
        stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
        if (validation && !validation->images.empty()) {
            const auto p = cnn_predict_proba(result.model, validation->images, cfg);
            double vl = 0.0;
            std::size_t vc = 0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double q = std::clamp(p[i], 1e-12, 1.0 - 1e-12);
                vl -= validation->labels[i] ? std::log(q) : std::log(1.0 - q);
                vc += static_cast<std::size_t>((p[i] >= 0.5) == (validation->labels[i] == 1));
            }
            stats.val_loss = vl / static_cast<double>(p.size());
            stats.val_accuracy = static_cast<double>(vc) / static_cast<double>(p.size());
        }
        if (on_epoch) on_epoch(stats);
        result.history.push_back(stats);
    }
    return result;
}

}  // namespace tbcough
