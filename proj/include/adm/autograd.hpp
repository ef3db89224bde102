#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "adm/ops.hpp"
#include "adm/tensor.hpp"

namespace adm {

/// Reverse-mode automatic differentiation over a dynamically recorded graph.
/// Every operation creates a node holding the forward value and a closure
/// that pushes the node's gradient into its parents. Gradient propagation is
/// pruned at nodes that cannot reach a trainable leaf.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // sized on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backprop;

    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor<T>(value.shape);
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var leaf(Tensor<T> value, bool requires_grad) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    const Tensor<T>& value() const { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool valid() const { return static_cast<bool>(node_); }
    std::shared_ptr<Node<T>> node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> bp) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->parents.reserve(parents.size());
    bool needs = false;
    for (auto& p : parents) {
        needs = needs || p.node()->requires_grad;
        n->parents.push_back(p.node());
    }
    n->requires_grad = needs;
    if (needs) n->backprop = std::move(bp);
    return Var<T>(std::move(n));
}

}  // namespace detail

/// Populate grad fields of every node reachable from a scalar loss.
template <typename T>
void backward(const Var<T>& loss) {
    auto root = loss.node();
    if (!root) throw std::invalid_argument("backward: empty variable");
    if (root->value.numel() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                    Tensor<T>::shape_str(root->value.shape));
    }
    // Iterative DFS; parent order is structural, so the visit order is
    // reproducible run to run.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        Node<T>* n = stack.back().first;
        const std::size_t next = stack.back().second;
        if (next < n->parents.size()) {
            ++stack.back().second;
            Node<T>* p = n->parents[next].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->grad = Tensor<T>(root->value.shape, T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backprop && !n->grad.data.empty()) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
    a.value().require_same_shape(b.value(), "add");
    Tensor<T> y = a.value();
    y += b.value();
    return detail::make_op<T>(std::move(y), {a, b}, [](Node<T>& n) {
        for (std::size_t k = 0; k < 2; ++k) {
            auto& p = *n.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.data.size(); ++i) p.grad.data[i] += n.grad.data[i];
        }
    });
}

template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
    a.value().require_same_shape(b.value(), "sub");
    Tensor<T> y(a.value().shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = a.value().data[i] - b.value().data[i];
    return detail::make_op<T>(std::move(y), {a, b}, [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.data.size(); ++i) pa.grad.data[i] += n.grad.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.data.size(); ++i) pb.grad.data[i] -= n.grad.data[i];
        }
    });
}

template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
    a.value().require_same_shape(b.value(), "mul");
    Tensor<T> y(a.value().shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = a.value().data[i] * b.value().data[i];
    return detail::make_op<T>(std::move(y), {a, b}, [](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.data.size(); ++i)
                pa.grad.data[i] += n.grad.data[i] * pb.value.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.data.size(); ++i)
                pb.grad.data[i] += n.grad.data[i] * pa.value.data[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> y(a.value().shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = c * a.value().data[i];
    return detail::make_op<T>(std::move(y), {a}, [c](Node<T>& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.data.size(); ++i) p.grad.data[i] += c * n.grad.data[i];
    });
}

/// Multiply activations (n,c,...) by a fixed per-channel factor. The factor
/// is not a differentiable input; gates in the merging algebra are constants
/// with respect to the recorded graph.
template <typename T>
Var<T> mul_channel(const Var<T>& a, std::vector<T> w) {
    const Tensor<T>& x = a.value();
    if (x.rank() < 2 || x.shape[1] != w.size()) {
        throw std::invalid_argument("mul_channel: channel count " +
                                    std::to_string(x.rank() < 2 ? 0 : x.shape[1]) + " != gate length " +
                                    std::to_string(w.size()));
    }
    std::size_t inner = 1;
    for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.shape[i];
    const std::size_t n = x.shape[0], c = x.shape[1];
    Tensor<T> y(x.shape);
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (in * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) y.data[base + i] = x.data[base + i] * w[ch];
        }
    return detail::make_op<T>(std::move(y), {a}, [w = std::move(w), n, c, inner](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t in = 0; in < n; ++in)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t base = (in * c + ch) * inner;
                for (std::size_t i = 0; i < inner; ++i) p.grad.data[base + i] += nd.grad.data[base + i] * w[ch];
            }
    });
}

/// Multiply by a fixed tensor of the same shape (elementwise gate).
template <typename T>
Var<T> mul_fixed(const Var<T>& a, Tensor<T> m) {
    a.value().require_same_shape(m, "mul_fixed");
    Tensor<T> y(m.shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = a.value().data[i] * m.data[i];
    return detail::make_op<T>(std::move(y), {a}, [m = std::move(m)](Node<T>& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.data.size(); ++i) p.grad.data[i] += n.grad.data[i] * m.data[i];
    });
}

template <typename T>
Var<T> detach(const Var<T>& a) {
    return Var<T>::constant(a.value());
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Var<T> relu(const Var<T>& a) {
    Tensor<T> y = relu(a.value());
    return detail::make_op<T>(std::move(y), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.data.size(); ++i)
            if (p.value.data[i] > T(0)) p.grad.data[i] += n.grad.data[i];
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> y = sigmoid_gate(a.value());
    return detail::make_op<T>(std::move(y), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
            const T s = n.value.data[i];
            p.grad.data[i] += n.grad.data[i] * s * (T(1) - s);
        }
    });
}

/// Elementwise square root; the subgradient at zero is taken as zero.
template <typename T>
Var<T> sqrt_elem(const Var<T>& a) {
    Tensor<T> y(a.value().shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) {
        if (a.value().data[i] < T(0)) throw std::invalid_argument("sqrt_elem: negative input");
        y.data[i] = std::sqrt(a.value().data[i]);
    }
    return detail::make_op<T>(std::move(y), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
            if (n.value.data[i] > T(0)) p.grad.data[i] += n.grad.data[i] / (T(2) * n.value.data[i]);
        }
    });
}

/// x*log(x) with the 0*log(0)=0 convention; inputs must be non-negative.
template <typename T>
Var<T> xlogx(const Var<T>& a) {
    Tensor<T> y(a.value().shape);
    for (std::size_t i = 0; i < y.data.size(); ++i) {
        const T v = a.value().data[i];
        if (v < T(0)) throw std::invalid_argument("xlogx: negative input");
        y.data[i] = v > T(0) ? v * std::log(v) : T(0);
    }
    return detail::make_op<T>(std::move(y), {a}, [](Node<T>& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.data.size(); ++i) {
            const T v = p.value.data[i];
            if (v > T(0)) p.grad.data[i] += n.grad.data[i] * (std::log(v) + T(1));
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution
// ---------------------------------------------------------------------------

/// y = x * W^T + b; x (n,d), W (c,d), b (c) or empty.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>()) {
    const std::vector<T> bias =
        b.valid() ? std::vector<T>(b.value().data.begin(), b.value().data.end()) : std::vector<T>();
    Tensor<T> y = linear(x.value(), w.value(), bias);
    std::vector<Var<T>> parents = {x, w};
    if (b.valid()) parents.push_back(b);
    return detail::make_op<T>(std::move(y), std::move(parents), [](Node<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pw = *nd.parents[1];
        const std::size_t n = px.value.shape[0], d = px.value.shape[1], c = pw.value.shape[0];
        if (px.requires_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    const T g = nd.grad.at2(i, j);
                    for (std::size_t k = 0; k < d; ++k) px.grad.at2(i, k) += g * pw.value.at2(j, k);
                }
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    const T g = nd.grad.at2(i, j);
                    for (std::size_t k = 0; k < d; ++k) pw.grad.at2(j, k) += g * px.value.at2(i, k);
                }
        }
        if (nd.parents.size() > 2 && nd.parents[2]->requires_grad) {
            auto& pb = *nd.parents[2];
            pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) pb.grad.data[j] += nd.grad.at2(i, j);
        }
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, const ConvSpec& spec) {
    const std::vector<T> bvec = bias.valid()
                                    ? std::vector<T>(bias.value().data.begin(), bias.value().data.end())
                                    : std::vector<T>(spec.out_channels, T(0));
    Tensor<T> y = conv2d(x.value(), kernel.value(), bvec, spec);
    std::vector<Var<T>> parents = {x, kernel};
    if (bias.valid()) parents.push_back(bias);
    return detail::make_op<T>(std::move(y), std::move(parents), [spec](Node<T>& nd) {
        auto& px = *nd.parents[0];
        auto& pk = *nd.parents[1];
        Node<T>* pb = nd.parents.size() > 2 ? nd.parents[2].get() : nullptr;
        const std::size_t n = px.value.shape[0], ci = spec.in_channels;
        const std::size_t hi = px.value.shape[2], wi = px.value.shape[3];
        const std::size_t co = spec.out_channels, kh = spec.kernel_h, kw = spec.kernel_w;
        const std::size_t ho = nd.value.shape[2], wo = nd.value.shape[3];
        const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(spec.padding);
        const bool want_dx = px.requires_grad;
        const bool want_dk = pk.requires_grad;
        const bool want_db = pb && pb->requires_grad;
        if (want_dx) px.ensure_grad();
        if (want_dk) pk.ensure_grad();
        if (want_db) pb->ensure_grad();
        for (std::size_t in = 0; in < n; ++in)
            for (std::size_t oc = 0; oc < co; ++oc)
                for (std::size_t oh = 0; oh < ho; ++oh)
                    for (std::size_t ow = 0; ow < wo; ++ow) {
                        const T g = nd.grad.data[((in * co + oc) * ho + oh) * wo + ow];
                        if (g == T(0)) continue;
                        if (want_db) pb->grad.data[oc] += g;
                        for (std::size_t ic = 0; ic < ci; ++ic)
                            for (std::size_t r = 0; r < kh; ++r) {
                                const std::ptrdiff_t ih =
                                    static_cast<std::ptrdiff_t>(oh * spec.stride + r) - pad;
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(hi)) continue;
                                for (std::size_t s = 0; s < kw; ++s) {
                                    const std::ptrdiff_t iw =
                                        static_cast<std::ptrdiff_t>(ow * spec.stride + s) - pad;
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(wi)) continue;
                                    const std::size_t xi = ((in * ci + ic) * hi + ih) * wi + iw;
                                    const std::size_t ki = ((oc * ci + ic) * kh + r) * kw + s;
                                    if (want_dx) px.grad.data[xi] += g * pk.value.data[ki];
                                    if (want_dk) pk.grad.data[ki] += g * px.value.data[xi];
                                }
                            }
                    }
    });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Training-mode batch normalization over axis 1 of an (n,c,h,w) tensor.
/// Normalizes with biased batch statistics and, when `running` is non-null,
/// updates the running estimates in place (unbiased variance, fixed
/// momentum), mirroring the usual deep-learning convention.
template <typename T>
Var<T> batchnorm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                       std::vector<T>* running_mean, std::vector<T>* running_var, T eps,
                       T momentum = T(0.1)) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 4) throw std::invalid_argument("batchnorm_train: input rank must be 4");
    const std::size_t n = xv.shape[0], c = xv.shape[1], inner = xv.shape[2] * xv.shape[3];
    if (gamma.value().numel() != c || beta.value().numel() != c) {
        throw std::invalid_argument("batchnorm_train: param length " + std::to_string(gamma.value().numel()) +
                                    " != channels " + std::to_string(c));
    }
    const std::size_t cnt = n * inner;
    if (cnt < 2) throw std::invalid_argument("batchnorm_train: needs at least 2 values per channel");

    std::vector<T> mean(c, T(0)), var(c, T(0)), inv_std(c, T(0));
    for (std::size_t ch = 0; ch < c; ++ch) {
        T m = T(0);
        for (std::size_t in = 0; in < n; ++in) {
            const std::size_t base = (in * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) m += xv.data[base + i];
        }
        m /= static_cast<T>(cnt);
        T v = T(0);
        for (std::size_t in = 0; in < n; ++in) {
            const std::size_t base = (in * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                const T d = xv.data[base + i] - m;
                v += d * d;
            }
        }
        v /= static_cast<T>(cnt);
        mean[ch] = m;
        var[ch] = v;
        inv_std[ch] = T(1) / std::sqrt(v + eps);
    }
    if (running_mean && running_var) {
        const T unbias = static_cast<T>(cnt) / static_cast<T>(cnt - 1);
        for (std::size_t ch = 0; ch < c; ++ch) {
            (*running_mean)[ch] = (T(1) - momentum) * (*running_mean)[ch] + momentum * mean[ch];
            (*running_var)[ch] = (T(1) - momentum) * (*running_var)[ch] + momentum * var[ch] * unbias;
        }
    }

    Tensor<T> xhat(xv.shape);
    Tensor<T> y(xv.shape);
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (in * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                const T h = (xv.data[base + i] - mean[ch]) * inv_std[ch];
                xhat.data[base + i] = h;
                y.data[base + i] = gamma.value().data[ch] * h + beta.value().data[ch];
            }
        }

    return detail::make_op<T>(
        std::move(y), {x, gamma, beta},
        [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, inner](Node<T>& nd) {
            auto& px = *nd.parents[0];
            auto& pg = *nd.parents[1];
            auto& pbt = *nd.parents[2];
            const std::size_t cnt = n * inner;
            std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
            for (std::size_t in = 0; in < n; ++in)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t base = (in * c + ch) * inner;
                    for (std::size_t i = 0; i < inner; ++i) {
                        sum_g[ch] += nd.grad.data[base + i];
                        sum_gx[ch] += nd.grad.data[base + i] * xhat.data[base + i];
                    }
                }
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (std::size_t ch = 0; ch < c; ++ch) pg.grad.data[ch] += sum_gx[ch];
            }
            if (pbt.requires_grad) {
                pbt.ensure_grad();
                for (std::size_t ch = 0; ch < c; ++ch) pbt.grad.data[ch] += sum_g[ch];
            }
            if (px.requires_grad) {
                px.ensure_grad();
                for (std::size_t in = 0; in < n; ++in)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const T gch = pg.value.data[ch];
                        const T k = gch * inv_std[ch];
                        const T mg = sum_g[ch] / static_cast<T>(cnt);
                        const T mgx = sum_gx[ch] / static_cast<T>(cnt);
                        const std::size_t base = (in * c + ch) * inner;
                        for (std::size_t i = 0; i < inner; ++i) {
                            px.grad.data[base + i] +=
                                k * (nd.grad.data[base + i] - mg - xhat.data[base + i] * mgx);
                        }
                    }
            }
        });
}

/// Inference-mode batch normalization as a fixed per-channel affine map.
template <typename T>
Var<T> batchnorm_infer(const Var<T>& x, const BNParams<T>& p) {
    Tensor<T> y = batchnorm_infer(x.value(), p);
    std::vector<T> scale(p.channels());
    for (std::size_t ch = 0; ch < p.channels(); ++ch) scale[ch] = p.gamma[ch] / std::sqrt(p.var[ch] + p.epsilon);
    const std::size_t n = x.value().shape[0], c = p.channels();
    std::size_t inner = 1;
    for (std::size_t i = 2; i < x.value().rank(); ++i) inner *= x.value().shape[i];
    return detail::make_op<T>(std::move(y), {x}, [scale = std::move(scale), n, c, inner](Node<T>& nd) {
        auto& px = *nd.parents[0];
        px.ensure_grad();
        for (std::size_t in = 0; in < n; ++in)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t base = (in * c + ch) * inner;
                for (std::size_t i = 0; i < inner; ++i) px.grad.data[base + i] += nd.grad.data[base + i] * scale[ch];
            }
    });
}

// ---------------------------------------------------------------------------
// Shape ops and reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    Tensor<T> y = global_avg_pool(x.value());
    const std::size_t n = x.value().shape[0], c = x.value().shape[1];
    const std::size_t inner = x.value().shape[2] * x.value().shape[3];
    return detail::make_op<T>(std::move(y), {x}, [n, c, inner](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        const T invn = T(1) / static_cast<T>(inner);
        for (std::size_t in = 0; in < n; ++in)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const T g = nd.grad.at2(in, ch) * invn;
                const std::size_t base = (in * c + ch) * inner;
                for (std::size_t i = 0; i < inner; ++i) p.grad.data[base + i] += g;
            }
    });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
    Tensor<T> y = softmax(x.value(), 1);
    return detail::make_op<T>(std::move(y), {x}, [](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        const std::size_t rows = nd.value.shape[0], cols = nd.value.shape[1];
        for (std::size_t i = 0; i < rows; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j < cols; ++j) dot += nd.grad.at2(i, j) * nd.value.at2(i, j);
            for (std::size_t j = 0; j < cols; ++j)
                p.grad.at2(i, j) += nd.value.at2(i, j) * (nd.grad.at2(i, j) - dot);
        }
    });
}

template <typename T>
Var<T> log_softmax_rows(const Var<T>& x) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("log_softmax_rows: rank must be 2");
    const std::size_t rows = xv.shape[0], cols = xv.shape[1];
    Tensor<T> y(xv.shape);
    for (std::size_t i = 0; i < rows; ++i) {
        T mx = xv.at2(i, 0);
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xv.at2(i, j));
        T denom = T(0);
        for (std::size_t j = 0; j < cols; ++j) denom += std::exp(xv.at2(i, j) - mx);
        const T lse = mx + std::log(denom);
        for (std::size_t j = 0; j < cols; ++j) y.at2(i, j) = xv.at2(i, j) - lse;
    }
    return detail::make_op<T>(std::move(y), {x}, [](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        const std::size_t rows = nd.value.shape[0], cols = nd.value.shape[1];
        for (std::size_t i = 0; i < rows; ++i) {
            T gsum = T(0);
            for (std::size_t j = 0; j < cols; ++j) gsum += nd.grad.at2(i, j);
            for (std::size_t j = 0; j < cols; ++j)
                p.grad.at2(i, j) += nd.grad.at2(i, j) - std::exp(nd.value.at2(i, j)) * gsum;
        }
    });
}

/// Row-wise log(sum(exp(x))) with the max-shift; output shape (rows).
template <typename T>
Var<T> logsumexp_rows(const Var<T>& x) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("logsumexp_rows: rank must be 2");
    const std::size_t rows = xv.shape[0], cols = xv.shape[1];
    Tensor<T> y({rows});
    for (std::size_t i = 0; i < rows; ++i) {
        T mx = xv.at2(i, 0);
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xv.at2(i, j));
        T denom = T(0);
        for (std::size_t j = 0; j < cols; ++j) denom += std::exp(xv.at2(i, j) - mx);
        y.data[i] = mx + std::log(denom);
    }
    return detail::make_op<T>(std::move(y), {x}, [](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        const std::size_t rows = p.value.shape[0], cols = p.value.shape[1];
        for (std::size_t i = 0; i < rows; ++i) {
            const T g = nd.grad.data[i];
            for (std::size_t j = 0; j < cols; ++j)
                p.grad.at2(i, j) += g * std::exp(p.value.at2(i, j) - nd.value.data[i]);
        }
    });
}

/// Main diagonal of a square matrix; output shape (n).
template <typename T>
Var<T> diag(const Var<T>& x) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 2 || xv.shape[0] != xv.shape[1]) {
        throw std::invalid_argument("diag: input must be square, got " + Tensor<T>::shape_str(xv.shape));
    }
    const std::size_t n = xv.shape[0];
    Tensor<T> y({n});
    for (std::size_t i = 0; i < n; ++i) y.data[i] = xv.at2(i, i);
    return detail::make_op<T>(std::move(y), {x}, [n](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) p.grad.at2(i, i) += nd.grad.data[i];
    });
}

template <typename T>
Var<T> row_sum(const Var<T>& x) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("row_sum: rank must be 2");
    const std::size_t rows = xv.shape[0], cols = xv.shape[1];
    Tensor<T> y({rows});
    for (std::size_t i = 0; i < rows; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < cols; ++j) acc += xv.at2(i, j);
        y.data[i] = acc;
    }
    return detail::make_op<T>(std::move(y), {x}, [](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        const std::size_t rows = p.value.shape[0], cols = p.value.shape[1];
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) p.grad.at2(i, j) += nd.grad.data[i];
    });
}

/// Column means of an (n,d) matrix; output shape (d).
template <typename T>
Var<T> mean_rows(const Var<T>& x) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("mean_rows: rank must be 2");
    const std::size_t rows = xv.shape[0], cols = xv.shape[1];
    Tensor<T> y({cols});
    for (std::size_t j = 0; j < cols; ++j) {
        T acc = T(0);
        for (std::size_t i = 0; i < rows; ++i) acc += xv.at2(i, j);
        y.data[j] = acc / static_cast<T>(rows);
    }
    return detail::make_op<T>(std::move(y), {x}, [](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        const std::size_t rows = p.value.shape[0], cols = p.value.shape[1];
        const T inv = T(1) / static_cast<T>(rows);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) p.grad.at2(i, j) += nd.grad.data[j] * inv;
    });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    T acc = T(0);
    for (T v : x.value().data) acc += v;
    return detail::make_op<T>(Tensor<T>::from_values({1}, {acc}), {x}, [](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        const T g = nd.grad.data[0];
        for (std::size_t i = 0; i < p.grad.data.size(); ++i) p.grad.data[i] += g;
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    const std::size_t n = x.value().numel();
    if (n == 0) throw std::invalid_argument("mean_all: empty tensor");
    T acc = T(0);
    for (T v : x.value().data) acc += v;
    acc /= static_cast<T>(n);
    return detail::make_op<T>(Tensor<T>::from_values({1}, {acc}), {x}, [n](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        const T g = nd.grad.data[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < p.grad.data.size(); ++i) p.grad.data[i] += g;
    });
}

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[0] != bv.shape[0]) {
        throw std::invalid_argument("concat_cols: row counts differ (" + Tensor<T>::shape_str(av.shape) +
                                    " vs " + Tensor<T>::shape_str(bv.shape) + ")");
    }
    const std::size_t n = av.shape[0], ca = av.shape[1], cb = bv.shape[1];
    Tensor<T> y({n, ca + cb});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < ca; ++j) y.at2(i, j) = av.at2(i, j);
        for (std::size_t j = 0; j < cb; ++j) y.at2(i, ca + j) = bv.at2(i, j);
    }
    return detail::make_op<T>(std::move(y), {a, b}, [n, ca, cb](Node<T>& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < ca; ++j) pa.grad.at2(i, j) += nd.grad.at2(i, j);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < cb; ++j) pb.grad.at2(i, j) += nd.grad.at2(i, ca + j);
        }
    });
}

/// Select rows by index (duplicates allowed); gradients scatter-add back.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> idx) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("gather_rows: rank must be 2");
    const std::size_t cols = xv.shape[1];
    for (std::size_t i : idx) {
        if (i >= xv.shape[0]) {
            throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " out of " +
                                        std::to_string(xv.shape[0]) + " rows");
        }
    }
    Tensor<T> y({idx.size(), cols});
    for (std::size_t m = 0; m < idx.size(); ++m)
        for (std::size_t j = 0; j < cols; ++j) y.at2(m, j) = xv.at2(idx[m], j);
    return detail::make_op<T>(std::move(y), {x}, [idx = std::move(idx), cols](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t m = 0; m < idx.size(); ++m)
            for (std::size_t j = 0; j < cols; ++j) p.grad.at2(idx[m], j) += nd.grad.at2(m, j);
    });
}

/// Row-wise l2 normalization; zero rows are rejected.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x) {
    const Tensor<T>& xv = x.value();
    if (xv.rank() != 2) throw std::invalid_argument("l2_normalize_rows: rank must be 2");
    const std::size_t rows = xv.shape[0], cols = xv.shape[1];
    std::vector<T> norms(rows);
    Tensor<T> y(xv.shape);
    for (std::size_t i = 0; i < rows; ++i) {
        T ss = T(0);
        for (std::size_t j = 0; j < cols; ++j) ss += xv.at2(i, j) * xv.at2(i, j);
        if (ss == T(0)) throw std::invalid_argument("l2_normalize_rows: zero row " + std::to_string(i));
        norms[i] = std::sqrt(ss);
        for (std::size_t j = 0; j < cols; ++j) y.at2(i, j) = xv.at2(i, j) / norms[i];
    }
    return detail::make_op<T>(std::move(y), {x}, [norms = std::move(norms)](Node<T>& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        const std::size_t rows = nd.value.shape[0], cols = nd.value.shape[1];
        for (std::size_t i = 0; i < rows; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j < cols; ++j) dot += nd.grad.at2(i, j) * nd.value.at2(i, j);
            for (std::size_t j = 0; j < cols; ++j)
                p.grad.at2(i, j) += (nd.grad.at2(i, j) - nd.value.at2(i, j) * dot) / norms[i];
        }
    });
}

/// Negative log-likelihood of integer labels against log-probabilities,
/// scaled per sample: loss = -(scale/n) * sum_i logp[i, y_i].
template <typename T>
Var<T> nll_scaled(const Var<T>& logp, const std::vector<std::size_t>& labels, T per_sample_scale) {
    const Tensor<T>& lp = logp.value();
    if (lp.rank() != 2) throw std::invalid_argument("nll_scaled: rank must be 2");
    if (labels.size() != lp.shape[0]) {
        throw std::invalid_argument("nll_scaled: label count " + std::to_string(labels.size()) +
                                    " != rows " + std::to_string(lp.shape[0]));
    }
    const std::size_t n = lp.shape[0];
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= lp.shape[1]) {
            throw std::invalid_argument("nll_scaled: label " + std::to_string(labels[i]) + " out of " +
                                        std::to_string(lp.shape[1]) + " classes at row " + std::to_string(i));
        }
        acc -= lp.at2(i, labels[i]);
    }
    acc *= per_sample_scale / static_cast<T>(n);
    return detail::make_op<T>(Tensor<T>::from_values({1}, {acc}), {logp},
                              [labels, per_sample_scale, n](Node<T>& nd) {
                                  auto& p = *nd.parents[0];
                                  p.ensure_grad();
                                  const T g = nd.grad.data[0] * per_sample_scale / static_cast<T>(n);
                                  for (std::size_t i = 0; i < n; ++i) p.grad.at2(i, labels[i]) -= g;
                              });
}

}  // namespace adm
