#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adm/autograd.hpp"
#include "adm/head.hpp"
#include "adm/metrics.hpp"
#include "adm/ops.hpp"
#include "adm/prototypes.hpp"
#include "adm/reparam.hpp"
#include "adm/rng.hpp"
#include "adm/tensor.hpp"

namespace adm {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Stochastic gradient descent with classical momentum and optional L2
/// weight decay (decay is added to the gradient, the usual coupled form).
/// Velocities are allocated on first use and bound to the parameter list by
/// size, so the same optimizer instance must always see the same parameters.
struct SgdMomentum {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::vector<Tensorf> velocity;

    void step(const std::vector<Var<float>>& params) {
        if (velocity.empty()) {
            velocity.reserve(params.size());
            for (const auto& p : params) velocity.push_back(zeros_like(p.value()));
        }
        if (velocity.size() != params.size()) {
            throw std::invalid_argument("sgd: parameter list changed size: " +
                                        std::to_string(params.size()) + " vs " +
                                        std::to_string(velocity.size()));
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto node = params[i].node();
            Tensorf& value = node->value;
            if (velocity[i].data.size() != value.data.size()) {
                throw std::invalid_argument("sgd: parameter " + std::to_string(i) +
                                            " changed shape");
            }
            const bool has_grad = node->grad.data.size() == value.data.size();
            for (std::size_t k = 0; k < value.data.size(); ++k) {
                const float g = (has_grad ? node->grad.data[k] : 0.0f) +
                                static_cast<float>(weight_decay) * value.data[k];
                velocity[i].data[k] = static_cast<float>(momentum) * velocity[i].data[k] + g;
                value.data[k] -= static_cast<float>(lr) * velocity[i].data[k];
            }
            node->grad = Tensorf();  // fresh accumulation next backward
        }
    }
};

inline void zero_grads(const std::vector<Var<float>>& params) {
    for (const auto& p : params) p.node()->grad = Tensorf();
}

// ---------------------------------------------------------------------------
// Trainable backbone (pretraining form)
// ---------------------------------------------------------------------------

/// One CONV+BN block under training: weights live in graph leaves, running
/// statistics in plain vectors updated by the training forward.
struct TrainableBlock {
    ConvSpec spec;
    Var<float> kernel;
    Var<float> gamma;
    Var<float> beta;
    std::vector<float> running_mean;
    std::vector<float> running_var;
};

struct TrainableConvNet {
    std::vector<TrainableBlock> blocks;
    float bn_eps = 1e-5f;

    /// Pooled feature graph: CONV -> BN (batch stats) -> ReLU per block,
    /// then global average pooling to (n, d).
    Var<float> features(const Var<float>& x, bool update_running) {
        Var<float> h = x;
        for (auto& b : blocks) {
            h = conv2d(h, b.kernel, Var<float>(), b.spec);
            h = batchnorm_train<float>(h, b.gamma, b.beta,
                                       update_running ? &b.running_mean : nullptr,
                                       update_running ? &b.running_var : nullptr, bn_eps);
            h = relu(h);
        }
        return global_avg_pool(h);
    }

    std::vector<Var<float>> parameters() const {
        std::vector<Var<float>> out;
        out.reserve(blocks.size() * 3);
        for (const auto& b : blocks) {
            out.push_back(b.kernel);
            out.push_back(b.gamma);
            out.push_back(b.beta);
        }
        return out;
    }

    /// Snapshot of each block as a foldable CONV+BN unit carrying the
    /// current weights and running statistics.
    std::vector<ConvBNUnit<float>> units() const {
        std::vector<ConvBNUnit<float>> out;
        out.reserve(blocks.size());
        for (const auto& b : blocks) {
            ConvBNUnit<float> u;
            u.spec = b.spec;
            u.kernel = b.kernel.value();
            u.bn.mean = b.running_mean;
            u.bn.var = b.running_var;
            u.bn.gamma = b.gamma.value().data;
            u.bn.beta = b.beta.value().data;
            u.bn.epsilon = bn_eps;
            out.push_back(std::move(u));
        }
        return out;
    }
};

/// Fresh backbone of 3x3 stride-1 pad-1 CONV+BN blocks with the given
/// channel widths, He-initialized kernels, and identity BN affine.
inline TrainableConvNet make_trainable_net(std::size_t in_dims,
                                           const std::vector<std::size_t>& widths, Rng& rng) {
    if (in_dims == 0 || widths.empty()) {
        throw std::invalid_argument("make_trainable_net: need input channels and at least one block");
    }
    TrainableConvNet net;
    std::size_t in = in_dims;
    for (std::size_t w : widths) {
        if (w == 0) throw std::invalid_argument("make_trainable_net: zero-width block");
        TrainableBlock b;
        b.spec = ConvSpec{in, w, 3, 3, 1, 1};
        Tensorf kernel(b.spec.kernel_shape());
        const double fan_in = static_cast<double>(in * 9);
        rng.fill_normal(kernel, 0.0, std::sqrt(2.0 / fan_in));
        b.kernel = Var<float>::leaf(std::move(kernel), true);
        b.gamma = Var<float>::leaf(Tensorf({w}, 1.0f), true);
        b.beta = Var<float>::leaf(Tensorf({w}, 0.0f), true);
        b.running_mean.assign(w, 0.0f);
        b.running_var.assign(w, 1.0f);
        net.blocks.push_back(std::move(b));
        in = w;
    }
    return net;
}

// ---------------------------------------------------------------------------
// Folded single-branch model (deployment form)
// ---------------------------------------------------------------------------

/// The deployable model: folded conv stack, the per-layer scale vectors
/// recorded before folding (they seed the merge gates), the joint head over
/// every class seen so far, and feature prototypes for replay.
struct BaseModel {
    std::vector<FoldedConv<float>> layers;
    std::vector<std::vector<float>> gate_gamma;  // per layer, pre-fold BN scales
    Tensorf head_w;                              // (classes, d)
    Tensorf head_b;                              // (classes)
    PrototypeStore<float> prototypes;

    std::size_t classes() const { return head_w.shape.empty() ? 0 : head_w.shape[0]; }
    std::size_t feature_dim() const { return layers.empty() ? 0 : layers.back().spec.out_channels; }

    void validate() const {
        if (layers.empty()) throw std::invalid_argument("BaseModel: no layers");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            layers[i].validate();
            if (gate_gamma.size() != layers.size() ||
                gate_gamma[i].size() != layers[i].spec.out_channels) {
                throw std::invalid_argument("BaseModel: gate record does not match layer " +
                                            std::to_string(i));
            }
        }
        if (head_w.rank() != 2 || head_w.shape[1] != feature_dim()) {
            throw std::invalid_argument("BaseModel: head width does not match feature dim");
        }
        if (head_b.numel() != classes()) {
            throw std::invalid_argument("BaseModel: head bias does not match class count");
        }
    }
};

/// Folds a trained backbone into the deployable stack, recording each
/// block's BN scale vector before it disappears into the kernels.
inline BaseModel fold_backbone(const TrainableConvNet& net, Tensorf head_w, Tensorf head_b,
                               PrototypeStore<float> prototypes) {
    BaseModel m;
    for (const auto& unit : net.units()) {
        m.gate_gamma.push_back(unit.bn.gamma);
        m.layers.push_back(fold_conv_bn(unit));
    }
    m.head_w = std::move(head_w);
    m.head_b = std::move(head_b);
    m.prototypes = std::move(prototypes);
    m.validate();
    return m;
}

inline Tensorf base_features(const BaseModel& m, const Tensorf& x) {
    Tensorf h = x;
    for (const auto& layer : m.layers) h = relu(layer.forward(h));
    return global_avg_pool(h);
}

inline Tensorf base_logits(const BaseModel& m, const Tensorf& x) {
    return linear(base_features(m, x), m.head_w,
                  std::vector<float>(m.head_b.data.begin(), m.head_b.data.end()));
}

inline std::vector<std::size_t> predict(const Tensorf& logits) {
    std::vector<std::size_t> out(logits.shape[0]);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax_row(logits, i);
    return out;
}

/// Backbone weights only — the quantity the no-growth invariant tracks.
inline std::size_t backbone_parameter_count(const BaseModel& m) {
    std::size_t count = 0;
    for (const auto& layer : m.layers) count += layer.kernel.numel() + layer.bias.size();
    return count;
}

// ---------------------------------------------------------------------------
// Expanded dual-branch model (novel-task training form)
// ---------------------------------------------------------------------------

/// Live novel-branch parameters; the matching DualBranchLayer keeps the
/// frozen base, the gate record, and the novel running statistics.
struct NovelBranch {
    Var<float> kernel;
    Var<float> gamma;
    Var<float> beta;
};

struct ExpandedModel {
    BaseModel base;  // frozen pre-expansion snapshot
    MergeMode mode = MergeMode::AMM;
    std::vector<DualBranchLayer<float>> layers;
    std::vector<NovelBranch> novel;
    Var<float> head_base_w, head_base_b;    // trained by feature replay only
    Var<float> head_novel_w, head_novel_b;  // fresh columns for this task
    Var<float> proj_w1, proj_b1, proj_w2, proj_b2;  // contrastive projection
    std::size_t novel_classes = 0;
    bool merged = false;  // branches already consumed by a merge

    std::vector<Var<float>> trainable_parameters() const {
        std::vector<Var<float>> out;
        for (const auto& b : novel) {
            out.push_back(b.kernel);
            out.push_back(b.gamma);
            out.push_back(b.beta);
        }
        out.push_back(head_base_w);
        out.push_back(head_base_b);
        out.push_back(head_novel_w);
        out.push_back(head_novel_b);
        out.push_back(proj_w1);
        out.push_back(proj_b1);
        out.push_back(proj_w2);
        out.push_back(proj_b2);
        return out;
    }
};

/// Grows a dual branch on every layer and |C_novel| joint-head columns.
/// Novel kernels and head columns start near zero so the expanded network
/// initially tracks the base model.
inline ExpandedModel expand_model(const BaseModel& base, std::size_t novel_classes, MergeMode mode,
                                  Rng& rng) {
    base.validate();
    if (novel_classes == 0) {
        throw std::invalid_argument("expand_model: need at least one novel class");
    }
    ExpandedModel m;
    m.base = base;
    m.mode = mode;
    m.novel_classes = novel_classes;
    for (std::size_t i = 0; i < base.layers.size(); ++i) {
        DualBranchLayer<float> layer;
        layer.base = base.layers[i];
        layer.novel = make_novel_branch<float>(base.layers[i].spec, rng);
        layer.gate_gamma = base.gate_gamma[i];
        layer.mode = mode;
        layer.validate();

        NovelBranch live;
        live.kernel = Var<float>::leaf(layer.novel.kernel, true);
        live.gamma = Var<float>::leaf(Tensorf::from_values({layer.novel.bn.gamma.size()},
                                                           layer.novel.bn.gamma),
                                      true);
        live.beta = Var<float>::leaf(Tensorf::from_values({layer.novel.bn.beta.size()},
                                                          layer.novel.bn.beta),
                                     true);
        m.layers.push_back(std::move(layer));
        m.novel.push_back(std::move(live));
    }

    const std::size_t d = base.feature_dim();
    m.head_base_w = Var<float>::leaf(base.head_w, true);
    m.head_base_b = Var<float>::leaf(base.head_b, true);
    Tensorf novel_w({novel_classes, d});
    rng.fill_normal(novel_w, 0.0, 0.01 / std::sqrt(static_cast<double>(d)));
    m.head_novel_w = Var<float>::leaf(std::move(novel_w), true);
    m.head_novel_b = Var<float>::leaf(Tensorf({novel_classes}, 0.0f), true);

    Tensorf w1({d, d}), w2({d, d});
    rng.fill_normal(w1, 0.0, std::sqrt(2.0 / static_cast<double>(d)));
    rng.fill_normal(w2, 0.0, std::sqrt(2.0 / static_cast<double>(d)));
    m.proj_w1 = Var<float>::leaf(std::move(w1), true);
    m.proj_b1 = Var<float>::leaf(Tensorf({d}, 0.0f), true);
    m.proj_w2 = Var<float>::leaf(std::move(w2), true);
    // The output bias starts slightly off zero: a sample that silences the
    // whole hidden layer still projects onto a fixed direction instead of a
    // zero row, which the normalized contrastive objective rejects.
    m.proj_b2 = Var<float>::leaf(Tensorf({d}, 0.01f), true);
    return m;
}

/// Copies the live novel parameters back into the layer snapshots so the
/// tensor-level forwards and the merge see the trained values.
inline void sync_novel(ExpandedModel& m) {
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        m.layers[i].novel.kernel = m.novel[i].kernel.value();
        m.layers[i].novel.bn.gamma = m.novel[i].gamma.value().data;
        m.layers[i].novel.bn.beta = m.novel[i].beta.value().data;
    }
}

namespace detail {

inline Tensorf combined_layer_forward(const Tensorf& x, const DualBranchLayer<float>& layer) {
    switch (layer.mode) {
        case MergeMode::IMM: return imm_forward(x, layer);
        case MergeMode::AFF: return aff_forward(x, layer);
        case MergeMode::AMM: return amm_forward(x, layer);
    }
    throw std::invalid_argument("combined_layer_forward: unknown mode");
}

}  // namespace detail

/// Inference-mode pooled features of the dual-branch network (novel BN uses
/// running statistics). Syncs the live parameters first.
inline Tensorf expanded_features_infer(ExpandedModel& m, const Tensorf& x) {
    sync_novel(m);
    Tensorf h = x;
    for (const auto& layer : m.layers) h = relu(detail::combined_layer_forward(h, layer));
    return global_avg_pool(h);
}

/// Current joint head as a plain tensor structure.
inline JointHead<float> snapshot_head(const ExpandedModel& m) {
    JointHead<float> head;
    head.base_w = m.head_base_w.value();
    head.base_b = m.head_base_b.value();
    head.novel_w = m.head_novel_w.value();
    head.novel_b = m.head_novel_b.value();
    return head;
}

inline Tensorf expanded_joint_logits(ExpandedModel& m, const Tensorf& x) {
    return snapshot_head(m).joint_logits(expanded_features_infer(m, x));
}

/// Training-graph pooled features through both branches.
inline Var<float> expanded_features_train(ExpandedModel& m, const Tensorf& x, bool update_running) {
    Var<float> h = Var<float>::constant(x);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        h = relu(dual_branch_train_forward(h, m.layers[i], m.novel[i].kernel, m.novel[i].gamma,
                                           m.novel[i].beta, update_running));
    }
    return global_avg_pool(h);
}

/// Two-layer projection used by the contrastive objective.
inline Var<float> project_features(const ExpandedModel& m, const Var<float>& features) {
    Var<float> h = relu(linear(features, m.proj_w1, m.proj_b1));
    return linear(h, m.proj_w2, m.proj_b2);
}

/// Per-branch magnitude distribution at the final layer on the given inputs:
/// the frozen base features against the gated novel contribution, both after
/// global average pooling. Only meaningful while the branches are distinct.
inline MagnitudeSummary magnitude_report(ExpandedModel& m, const Tensorf& inputs,
                                         std::size_t bins = 20) {
    if (m.merged) {
        throw std::invalid_argument(
            "magnitude_report: model already merged; branches are indistinguishable");
    }
    sync_novel(m);
    Tensorf h = inputs;
    for (std::size_t i = 0; i + 1 < m.layers.size(); ++i) {
        h = relu(detail::combined_layer_forward(h, m.layers[i]));
    }
    const auto& last = m.layers.back();
    const Tensorf base_out = last.base.forward(h);
    const Tensorf combined = detail::combined_layer_forward(h, last);
    Tensorf contribution = combined;
    for (std::size_t k = 0; k < contribution.data.size(); ++k) contribution.data[k] -= base_out.data[k];
    return summarize_magnitudes(max_abs_per_sample(global_avg_pool(base_out)),
                                max_abs_per_sample(global_avg_pool(contribution)), bins);
}

}  // namespace adm
