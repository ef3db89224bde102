#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "adm/autograd.hpp"
#include "adm/ops.hpp"
#include "adm/rng.hpp"
#include "adm/tensor.hpp"

namespace adm {

/// How the novel branch joins the frozen base branch.
///   IMM: plain addition of the two branch outputs.
///   AFF: novel output gated elementwise by the logistic of the negated base
///        output; input-dependent, so such a layer cannot be merged.
///   AMM: novel output gated per channel by the logistic of the negated base
///        gate parameters; constant in x, so the layer merges exactly.
enum class MergeMode { IMM, AFF, AMM };

inline const char* merge_mode_name(MergeMode m) {
    switch (m) {
        case MergeMode::IMM: return "imm";
        case MergeMode::AFF: return "aff";
        case MergeMode::AMM: return "amm";
    }
    throw std::invalid_argument("merge_mode_name: unknown mode");
}

inline MergeMode parse_merge_mode(const std::string& s) {
    if (s == "imm") return MergeMode::IMM;
    if (s == "aff") return MergeMode::AFF;
    if (s == "amm") return MergeMode::AMM;
    throw std::invalid_argument("parse_merge_mode: '" + s + "' is not one of imm|aff|amm");
}

/// A convolution followed by batch normalization, the unit everything below
/// folds and merges. The convolution itself carries no bias; the BN shift
/// plays that role.
template <typename T>
struct ConvBNUnit {
    ConvSpec spec;
    Tensor<T> kernel;  // (out, in, kh, kw)
    BNParams<T> bn;

    void validate() const {
        spec.validate();
        if (kernel.shape != spec.kernel_shape()) {
            throw std::invalid_argument("ConvBNUnit: kernel shape " + Tensor<T>::shape_str(kernel.shape) +
                                        " != spec shape " + Tensor<T>::shape_str(spec.kernel_shape()));
        }
        bn.validate();
        if (bn.channels() != spec.out_channels) {
            throw std::invalid_argument("ConvBNUnit: bn channels " + std::to_string(bn.channels()) +
                                        " != out_channels " + std::to_string(spec.out_channels));
        }
    }
};

/// A single convolution with per-channel bias: the result of folding a
/// ConvBNUnit, and the only form the base model keeps between tasks.
template <typename T>
struct FoldedConv {
    ConvSpec spec;
    Tensor<T> kernel;
    std::vector<T> bias;

    void validate() const {
        spec.validate();
        if (kernel.shape != spec.kernel_shape()) {
            throw std::invalid_argument("FoldedConv: kernel shape " + Tensor<T>::shape_str(kernel.shape) +
                                        " != spec shape " + Tensor<T>::shape_str(spec.kernel_shape()));
        }
        if (bias.size() != spec.out_channels) {
            throw std::invalid_argument("FoldedConv: bias length " + std::to_string(bias.size()) +
                                        " != out_channels " + std::to_string(spec.out_channels));
        }
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, kernel, bias, spec); }
};

/// Frozen base convolution paired with a trainable novel CONV+BN branch plus
/// the per-channel gate parameters carried between tasks.
template <typename T>
struct DualBranchLayer {
    FoldedConv<T> base;
    ConvBNUnit<T> novel;
    std::vector<T> gate_gamma;  // one per output channel
    MergeMode mode = MergeMode::AMM;

    void validate() const {
        base.validate();
        novel.validate();
        if (!(base.spec == novel.spec)) {
            throw std::invalid_argument("DualBranchLayer: branch geometries differ");
        }
        if (gate_gamma.size() != base.spec.out_channels) {
            throw std::invalid_argument("DualBranchLayer: gate length " + std::to_string(gate_gamma.size()) +
                                        " != out_channels " + std::to_string(base.spec.out_channels));
        }
    }
};

/// Per-channel attenuation G(-gamma) in (0,1); larger gamma, smaller gate.
template <typename T>
std::vector<T> gate_from_gamma(const std::vector<T>& gamma) {
    std::vector<T> g(gamma.size());
    for (std::size_t i = 0; i < gamma.size(); ++i) g[i] = sigmoid_scalar(-gamma[i]);
    return g;
}

/// Collapse a CONV+BN unit into one convolution with bias. Per output
/// channel c with s = gamma_c / sqrt(var_c + eps):
///   kernel'_c = s * kernel_c,  bias'_c = beta_c - s * mean_c.
template <typename T>
FoldedConv<T> fold_conv_bn(const ConvBNUnit<T>& u) {
    u.validate();
    const std::size_t co = u.spec.out_channels;
    const std::size_t per = u.kernel.numel() / co;
    FoldedConv<T> f;
    f.spec = u.spec;
    f.kernel = u.kernel;
    f.bias.resize(co);
    for (std::size_t c = 0; c < co; ++c) {
        const T s = u.bn.gamma[c] / std::sqrt(u.bn.var[c] + u.bn.epsilon);
        for (std::size_t i = 0; i < per; ++i) f.kernel.data[c * per + i] *= s;
        f.bias[c] = u.bn.beta[c] - s * u.bn.mean[c];
    }
    return f;
}

namespace detail {

template <typename T>
Tensor<T> novel_branch_infer(const Tensor<T>& x, const ConvBNUnit<T>& u) {
    const std::vector<T> no_bias(u.spec.out_channels, T(0));
    return batchnorm_infer(conv2d(x, u.kernel, no_bias, u.spec), u.bn);
}

}  // namespace detail

/// Additive dual-branch forward: base(x) + BN(conv(x, novel)).
template <typename T>
Tensor<T> imm_forward(const Tensor<T>& x, const DualBranchLayer<T>& layer) {
    if (layer.mode != MergeMode::IMM) throw std::invalid_argument("imm_forward: layer mode is not imm");
    layer.validate();
    Tensor<T> y = layer.base.forward(x);
    y += detail::novel_branch_infer(x, layer.novel);
    return y;
}

/// Feature-gated forward: f_b + G(-f_b) ⊗ f_n. The gate depends on x, which
/// is exactly why this variant cannot be folded into one convolution.
template <typename T>
Tensor<T> aff_forward(const Tensor<T>& x, const DualBranchLayer<T>& layer) {
    if (layer.mode != MergeMode::AFF) throw std::invalid_argument("aff_forward: layer mode is not aff");
    layer.validate();
    Tensor<T> fb = layer.base.forward(x);
    Tensor<T> fn = detail::novel_branch_infer(x, layer.novel);
    for (std::size_t i = 0; i < fb.data.size(); ++i) {
        fb.data[i] += sigmoid_scalar(-fb.data[i]) * fn.data[i];
    }
    return fb;
}

/// Parameter-gated forward: f_b + G(-gamma_b) ⊗ f_n with the gate broadcast
/// over each output channel.
template <typename T>
Tensor<T> amm_forward(const Tensor<T>& x, const DualBranchLayer<T>& layer) {
    if (layer.mode != MergeMode::AMM) throw std::invalid_argument("amm_forward: layer mode is not amm");
    layer.validate();
    Tensor<T> fb = layer.base.forward(x);
    Tensor<T> fn = detail::novel_branch_infer(x, layer.novel);
    const std::vector<T> gate = gate_from_gamma(layer.gate_gamma);
    const std::size_t n = fb.shape[0], c = fb.shape[1], inner = fb.shape[2] * fb.shape[3];
    for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (in * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) fb.data[base + i] += gate[ch] * fn.data[base + i];
        }
    return fb;
}

/// Additively merge two folded convolutions of identical geometry.
template <typename T>
FoldedConv<T> imm_merge(const FoldedConv<T>& base, const FoldedConv<T>& novel) {
    base.validate();
    novel.validate();
    if (!(base.spec == novel.spec)) throw std::invalid_argument("imm_merge: geometries differ");
    FoldedConv<T> out = base;
    for (std::size_t i = 0; i < out.kernel.data.size(); ++i) out.kernel.data[i] += novel.kernel.data[i];
    for (std::size_t c = 0; c < out.bias.size(); ++c) out.bias[c] += novel.bias[c];
    return out;
}

/// Merge with the per-channel constant gate: kernel' = W_b + G(-gamma)·W_n,
/// bias' = B_b + G(-gamma)·B_n. Exact because the gate does not depend on x.
template <typename T>
FoldedConv<T> amm_merge(const FoldedConv<T>& base, const FoldedConv<T>& novel,
                        const std::vector<T>& gamma_b) {
    base.validate();
    novel.validate();
    if (!(base.spec == novel.spec)) throw std::invalid_argument("amm_merge: geometries differ");
    if (gamma_b.size() != base.spec.out_channels) {
        throw std::invalid_argument("amm_merge: gate length " + std::to_string(gamma_b.size()) +
                                    " != out_channels " + std::to_string(base.spec.out_channels));
    }
    const std::vector<T> gate = gate_from_gamma(gamma_b);
    const std::size_t co = base.spec.out_channels;
    const std::size_t per = base.kernel.numel() / co;
    FoldedConv<T> out = base;
    for (std::size_t c = 0; c < co; ++c) {
        for (std::size_t i = 0; i < per; ++i) out.kernel.data[c * per + i] += gate[c] * novel.kernel.data[c * per + i];
        out.bias[c] += gate[c] * novel.bias[c];
    }
    return out;
}

/// Gate-parameter carry to the next task: gamma' = gamma_b + G(-gamma_b)·gamma_n.
template <typename T>
std::vector<T> gamma_update(const std::vector<T>& gamma_b, const std::vector<T>& gamma_n) {
    if (gamma_b.size() != gamma_n.size()) {
        throw std::invalid_argument("gamma_update: lengths differ (" + std::to_string(gamma_b.size()) +
                                    " vs " + std::to_string(gamma_n.size()) + ")");
    }
    std::vector<T> out(gamma_b.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = gamma_b[i] + sigmoid_scalar(-gamma_b[i]) * gamma_n[i];
    }
    return out;
}

/// Result of consuming a dual-branch layer: the single convolution that
/// replaces it and the gate parameters for the next expansion.
template <typename T>
struct MergedLayer {
    FoldedConv<T> folded;
    std::vector<T> gate_gamma;
};

/// Fold the novel branch and merge it into the base according to the layer
/// mode. Feature-gated layers have an input-dependent gate and are rejected.
template <typename T>
MergedLayer<T> merge_layer(const DualBranchLayer<T>& layer) {
    layer.validate();
    if (layer.mode == MergeMode::AFF) {
        throw std::invalid_argument("merge_layer: feature-gated (aff) layers cannot be merged losslessly");
    }
    const FoldedConv<T> novel = fold_conv_bn(layer.novel);
    MergedLayer<T> out;
    out.folded = layer.mode == MergeMode::IMM ? imm_merge(layer.base, novel)
                                              : amm_merge(layer.base, novel, layer.gate_gamma);
    out.gate_gamma = gamma_update(layer.gate_gamma, layer.novel.bn.gamma);
    return out;
}

/// Fresh novel branch: kernel from a small zero-mean normal scaled by the
/// square root of the fan-in, identity BN affine, unit running variance.
template <typename T>
ConvBNUnit<T> make_novel_branch(const ConvSpec& spec, Rng& rng, T eps = T(1e-5)) {
    spec.validate();
    ConvBNUnit<T> u;
    u.spec = spec;
    u.kernel = Tensor<T>(spec.kernel_shape());
    const double fan_in = static_cast<double>(spec.in_channels * spec.kernel_h * spec.kernel_w);
    rng.fill_normal(u.kernel, 0.0, 0.01 / std::sqrt(fan_in));
    u.bn = BNParams<T>::identity(spec.out_channels, eps);
    return u;
}

// ---------------------------------------------------------------------------
// Graph-building forward for training the novel branch
// ---------------------------------------------------------------------------

/// Training-time dual-branch forward. The base weights enter the graph as
/// constants (they are frozen) but the base conv still propagates gradients
/// to its input, so stacked layers train correctly; the novel CONV+BN runs
/// in batch-statistics mode over the given parameter variables, updating the
/// unit's running estimates in place when requested. Gates never receive
/// gradients: the feature gate is a fixed tensor computed from the frozen
/// base output, the channel gate a fixed per-channel constant.
template <typename T>
Var<T> dual_branch_train_forward(const Var<T>& x, DualBranchLayer<T>& layer, const Var<T>& novel_kernel,
                                 const Var<T>& novel_gamma, const Var<T>& novel_beta,
                                 bool update_running) {
    layer.validate();
    Var<T> fb = conv2d(x, Var<T>::constant(layer.base.kernel),
                       Var<T>::constant(Tensor<T>::from_values({layer.base.bias.size()}, layer.base.bias)),
                       layer.base.spec);
    Var<T> h = conv2d(x, novel_kernel, Var<T>(), layer.novel.spec);
    Var<T> fn = batchnorm_train<T>(h, novel_gamma, novel_beta,
                                   update_running ? &layer.novel.bn.mean : nullptr,
                                   update_running ? &layer.novel.bn.var : nullptr, layer.novel.bn.epsilon);
    switch (layer.mode) {
        case MergeMode::IMM:
            return fb + fn;
        case MergeMode::AFF: {
            Tensor<T> gate = fb.value();
            for (auto& v : gate.data) v = sigmoid_scalar(-v);
            return fb + mul_fixed(fn, std::move(gate));
        }
        case MergeMode::AMM:
            return fb + mul_channel(fn, gate_from_gamma(layer.gate_gamma));
    }
    throw std::invalid_argument("dual_branch_train_forward: unknown mode");
}

}  // namespace adm
