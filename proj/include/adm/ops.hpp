#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "adm/tensor.hpp"

namespace adm {

/// Geometry of a 2-D convolution. Kernels are laid out (out, in, kh, kw),
/// activations (n, c, h, w).
struct ConvSpec {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;

    void validate() const {
        if (in_channels == 0 || out_channels == 0) {
            throw std::invalid_argument("ConvSpec: channel counts must be positive");
        }
        if (kernel_h == 0 || kernel_w == 0 || stride == 0) {
            throw std::invalid_argument("ConvSpec: kernel extents and stride must be positive");
        }
        if (padding >= kernel_h || padding >= kernel_w) {
            throw std::invalid_argument("ConvSpec: padding " + std::to_string(padding) +
                                        " must be smaller than kernel extent");
        }
    }

    std::size_t out_h(std::size_t in_h) const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
    std::size_t out_w(std::size_t in_w) const { return (in_w + 2 * padding - kernel_w) / stride + 1; }

    std::vector<std::size_t> kernel_shape() const { return {out_channels, in_channels, kernel_h, kernel_w}; }

    bool operator==(const ConvSpec&) const = default;
};

/// Batch-normalization state for one channel axis: running statistics plus
/// the trainable affine pair.
template <typename T>
struct BNParams {
    std::vector<T> mean;
    std::vector<T> var;
    std::vector<T> gamma;
    std::vector<T> beta;
    T epsilon = T(1e-5);

    static BNParams identity(std::size_t channels, T eps = T(1e-5)) {
        BNParams p;
        p.mean.assign(channels, T(0));
        p.var.assign(channels, T(1));
        p.gamma.assign(channels, T(1));
        p.beta.assign(channels, T(0));
        p.epsilon = eps;
        return p;
    }

    std::size_t channels() const { return gamma.size(); }

    void validate() const {
        const std::size_t c = gamma.size();
        if (mean.size() != c || var.size() != c || beta.size() != c) {
            throw std::invalid_argument("BNParams: vector lengths differ (gamma " + std::to_string(c) +
                                        ", mean " + std::to_string(mean.size()) + ", var " +
                                        std::to_string(var.size()) + ", beta " + std::to_string(beta.size()) + ")");
        }
        if (!(epsilon >= T(0))) throw std::invalid_argument("BNParams: epsilon must be non-negative");
        for (std::size_t i = 0; i < c; ++i) {
            if (!(var[i] + epsilon > T(0))) {
                throw std::invalid_argument("BNParams: var + epsilon not positive at channel " + std::to_string(i));
            }
        }
    }
};

namespace detail {

template <typename T>
void check_conv_args(const Tensor<T>& x, const Tensor<T>& kernel, const std::vector<T>& bias,
                     const ConvSpec& spec) {
    spec.validate();
    if (x.rank() != 4) {
        throw std::invalid_argument("conv2d: input rank " + std::to_string(x.rank()) + ", expected 4 (n,c,h,w)");
    }
    if (x.shape[1] != spec.in_channels) {
        throw std::invalid_argument("conv2d: input channels " + std::to_string(x.shape[1]) +
                                    " != spec.in_channels " + std::to_string(spec.in_channels));
    }
    if (kernel.shape != spec.kernel_shape()) {
        throw std::invalid_argument("conv2d: kernel shape " + Tensor<T>::shape_str(kernel.shape) +
                                    " != spec kernel shape " + Tensor<T>::shape_str(spec.kernel_shape()));
    }
    if (bias.size() != spec.out_channels) {
        throw std::invalid_argument("conv2d: bias length " + std::to_string(bias.size()) +
                                    " != out_channels " + std::to_string(spec.out_channels));
    }
    if (x.shape[2] + 2 * spec.padding < spec.kernel_h || x.shape[3] + 2 * spec.padding < spec.kernel_w) {
        throw std::invalid_argument("conv2d: spatial input " + std::to_string(x.shape[2]) + "x" +
                                    std::to_string(x.shape[3]) + " smaller than kernel");
    }
}

}  // namespace detail

/// Cross-correlation (deep-learning convolution), zero padding, fixed
/// accumulation order.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const std::vector<T>& bias,
                 const ConvSpec& spec) {
    detail::check_conv_args(x, kernel, bias, spec);
    const std::size_t n = x.shape[0], ci = spec.in_channels, hi = x.shape[2], wi = x.shape[3];
    const std::size_t co = spec.out_channels, kh = spec.kernel_h, kw = spec.kernel_w;
    const std::size_t ho = spec.out_h(hi), wo = spec.out_w(wi);
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(spec.padding);

    Tensor<T> y({n, co, ho, wo});
    const T* xd = x.data.data();
    const T* kd = kernel.data.data();
    T* yd = y.data.data();

    for (std::size_t in = 0; in < n; ++in) {
        for (std::size_t oc = 0; oc < co; ++oc) {
            for (std::size_t oh = 0; oh < ho; ++oh) {
                for (std::size_t ow = 0; ow < wo; ++ow) {
                    T acc = bias[oc];
                    for (std::size_t ic = 0; ic < ci; ++ic) {
                        const T* xp = xd + ((in * ci + ic) * hi) * wi;
                        const T* kp = kd + ((oc * ci + ic) * kh) * kw;
                        for (std::size_t r = 0; r < kh; ++r) {
                            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * spec.stride + r) - pad;
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(hi)) continue;
                            for (std::size_t s = 0; s < kw; ++s) {
                                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * spec.stride + s) - pad;
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(wi)) continue;
                                acc += xp[ih * static_cast<std::ptrdiff_t>(wi) + iw] * kp[r * kw + s];
                            }
                        }
                    }
                    yd[((in * co + oc) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    return y;
}

/// Inference-mode batch normalization: gamma * (x - mean) / sqrt(var + eps) + beta
/// per channel (axis 1).
template <typename T>
Tensor<T> batchnorm_infer(const Tensor<T>& x, const BNParams<T>& p) {
    p.validate();
    if (x.rank() < 2) throw std::invalid_argument("batchnorm_infer: input rank must be >= 2");
    if (x.shape[1] != p.channels()) {
        throw std::invalid_argument("batchnorm_infer: input channels " + std::to_string(x.shape[1]) +
                                    " != param channels " + std::to_string(p.channels()));
    }
    std::size_t inner = 1;
    for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.shape[i];
    const std::size_t n = x.shape[0], c = x.shape[1];

    Tensor<T> y(x.shape);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T scale = p.gamma[ch] / std::sqrt(p.var[ch] + p.epsilon);
        const T shift = p.beta[ch] - scale * p.mean[ch];
        for (std::size_t in = 0; in < n; ++in) {
            const std::size_t base = (in * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) y.data[base + i] = scale * x.data[base + i] + shift;
        }
    }
    return y;
}

/// Numerically stable softmax along `axis` of a 1-D or 2-D tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, std::size_t axis = 1) {
    for (T v : logits.data) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw std::invalid_argument("softmax: non-finite input");
        }
    }
    Tensor<T> x = logits;
    std::size_t rows, cols;
    bool along_rows;
    if (x.rank() == 1) {
        rows = 1;
        cols = x.shape[0];
        along_rows = true;
        if (axis != 0) throw std::invalid_argument("softmax: axis out of range for rank-1 input");
    } else if (x.rank() == 2) {
        rows = x.shape[0];
        cols = x.shape[1];
        if (axis > 1) throw std::invalid_argument("softmax: axis out of range for rank-2 input");
        along_rows = (axis == 1);
    } else {
        throw std::invalid_argument("softmax: rank " + std::to_string(x.rank()) + " unsupported");
    }

    Tensor<T> y(x.shape);
    const std::size_t groups = along_rows ? rows : cols;
    const std::size_t len = along_rows ? cols : rows;
    for (std::size_t g = 0; g < groups; ++g) {
        auto idx = [&](std::size_t i) { return along_rows ? g * cols + i : i * cols + g; };
        T mx = x.data[idx(0)];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, x.data[idx(i)]);
        T denom = T(0);
        for (std::size_t i = 0; i < len; ++i) denom += std::exp(x.data[idx(i)] - mx);
        for (std::size_t i = 0; i < len; ++i) y.data[idx(i)] = std::exp(x.data[idx(i)] - mx) / denom;
    }
    return y;
}

/// 1 - cos(a, b). Defined only for nonzero inputs; result lies in [0, 2].
template <typename T>
T cosine_distance(const Tensor<T>& a, const Tensor<T>& b) {
    a.require_same_shape(b, "cosine_distance");
    T dot = T(0), na = T(0), nb = T(0);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        dot += a.data[i] * b.data[i];
        na += a.data[i] * a.data[i];
        nb += b.data[i] * b.data[i];
    }
    if (na == T(0) || nb == T(0)) {
        throw std::invalid_argument("cosine_distance: zero-norm input has no direction");
    }
    T c = dot / (std::sqrt(na) * std::sqrt(nb));
    c = std::clamp(c, T(-1), T(1));
    return T(1) - c;
}

/// Elementwise logistic 1/(1+exp(-v)).
template <typename T>
Tensor<T> sigmoid_gate(const Tensor<T>& v) {
    Tensor<T> y(v.shape);
    for (std::size_t i = 0; i < v.data.size(); ++i) y.data[i] = T(1) / (T(1) + std::exp(-v.data[i]));
    return y;
}

template <typename T>
T sigmoid_scalar(T v) {
    return T(1) / (T(1) + std::exp(-v));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    return y;
}

/// Global average pooling (n,c,h,w) -> (n,c).
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 4) throw std::invalid_argument("global_avg_pool: input rank must be 4");
    const std::size_t n = x.shape[0], c = x.shape[1], inner = x.shape[2] * x.shape[3];
    Tensor<T> y({n, c});
    for (std::size_t in = 0; in < n; ++in) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T acc = T(0);
            const std::size_t base = (in * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) acc += x.data[base + i];
            y.at2(in, ch) = acc / static_cast<T>(inner);
        }
    }
    return y;
}

/// y = x * W^T + b with x (n,d), W (c,d), b length c.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::vector<T>& b) {
    if (x.rank() != 2 || w.rank() != 2) throw std::invalid_argument("linear: inputs must be rank 2");
    if (x.shape[1] != w.shape[1]) {
        throw std::invalid_argument("linear: feature dim " + std::to_string(x.shape[1]) + " != weight dim " +
                                    std::to_string(w.shape[1]));
    }
    if (!b.empty() && b.size() != w.shape[0]) {
        throw std::invalid_argument("linear: bias length " + std::to_string(b.size()) + " != out dim " +
                                    std::to_string(w.shape[0]));
    }
    const std::size_t n = x.shape[0], d = x.shape[1], c = w.shape[0];
    Tensor<T> y({n, c});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            T acc = b.empty() ? T(0) : b[j];
            for (std::size_t k = 0; k < d; ++k) acc += x.at2(i, k) * w.at2(j, k);
            y.at2(i, j) = acc;
        }
    }
    return y;
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& t, std::size_t row) {
    if (t.rank() != 2) throw std::invalid_argument("argmax_row: rank must be 2");
    const std::size_t c = t.shape[1];
    if (c == 0) throw std::invalid_argument("argmax_row: empty row");
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
        if (t.at2(row, j) > t.at2(row, best)) best = j;  // ties keep the lowest index
    }
    return best;
}

}  // namespace adm
