#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adm/autograd.hpp"
#include "adm/config.hpp"
#include "adm/data.hpp"
#include "adm/head.hpp"
#include "adm/losses.hpp"
#include "adm/metrics.hpp"
#include "adm/model.hpp"
#include "adm/ops.hpp"
#include "adm/prototypes.hpp"
#include "adm/reparam.hpp"
#include "adm/rng.hpp"
#include "adm/tensor.hpp"

// End-to-end orchestration: supervised pretraining of the base model,
// adaptive training of the dual-branch expansion on each unlabeled task,
// the lossless merge back to the original size, and the evaluation loop
// over a task stream.

namespace adm {

namespace detail {

// Stage keys for forking the run generator, so each stage draws from its
// own stream no matter how many samples the others consume.
inline constexpr std::uint64_t kForkInit = 0x1a171000;
inline constexpr std::uint64_t kForkBatches = 0xba7c4000;
inline constexpr std::uint64_t kForkReplay = 0x4e91a900;
inline constexpr std::uint64_t kForkTask = 0x7a5c0000;  // + task index
inline constexpr std::uint64_t kForkTrain = 0x74a11000;

/// Gathers sample rows of an (n, ...) tensor into a batch tensor.
inline Tensorf gather_samples(const Tensorf& data, const std::vector<std::size_t>& idx) {
    if (data.rank() == 0 || data.shape[0] == 0) {
        throw std::invalid_argument("gather_samples: empty data tensor");
    }
    const std::size_t row = data.numel() / data.shape[0];
    std::vector<std::size_t> shape = data.shape;
    shape[0] = idx.size();
    Tensorf out(shape);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= data.shape[0]) {
            throw std::invalid_argument("gather_samples: index " + std::to_string(idx[i]) +
                                        " out of range");
        }
        std::copy(data.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * row),
                  data.data.begin() + static_cast<std::ptrdiff_t>((idx[i] + 1) * row),
                  out.data.begin() + static_cast<std::ptrdiff_t>(i * row));
    }
    return out;
}

template <typename T>
std::vector<T> gather_values(const std::vector<T>& values, const std::vector<std::size_t>& idx) {
    std::vector<T> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = values[idx[i]];
    return out;
}

/// Deterministic batch iterator: shuffles once per epoch and drops the
/// partial tail, so every batch has exactly `batch` samples.
class BatchCursor {
  public:
    BatchCursor(std::size_t n, std::size_t batch, Rng rng)
        : batch_(batch), rng_(std::move(rng)) {
        if (batch == 0) throw std::invalid_argument("batch cursor: batch size must be positive");
        if (batch > n) {
            throw std::invalid_argument("batch cursor: batch size " + std::to_string(batch) +
                                        " exceeds dataset size " + std::to_string(n));
        }
        order_.resize(n);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        rng_.shuffle(order_);
    }

    std::vector<std::size_t> next() {
        if (pos_ + batch_ > order_.size()) {
            rng_.shuffle(order_);
            pos_ = 0;
        }
        std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                     order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
        pos_ += batch_;
        return idx;
    }

  private:
    std::size_t batch_;
    std::size_t pos_ = 0;
    std::vector<std::size_t> order_;
    Rng rng_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: supervised pretraining on the labeled base task
// ---------------------------------------------------------------------------

/// Trains a fresh backbone and head on the labeled base task with
/// cross-entropy, folds every CONV+BN block, and records one feature
/// prototype per class from the folded network. With zero steps this
/// returns the folded initialization unchanged.
inline BaseModel pretrain_base(const ExperimentConfig& cfg, const LabeledSet& task) {
    cfg.validate();
    const std::size_t classes = cfg.base_classes();
    if (task.size() == 0) throw std::invalid_argument("pretrain_base: base task is empty");
    if (task.inputs.rank() != 4 || task.inputs.shape[0] != task.size()) {
        throw std::invalid_argument("pretrain_base: inputs must be (n, dims, s, s) with one row per label");
    }
    if (task.inputs.shape[1] != cfg.input_dims) {
        throw std::invalid_argument("pretrain_base: task has " + std::to_string(task.inputs.shape[1]) +
                                    " input channels, config expects " + std::to_string(cfg.input_dims));
    }
    std::vector<std::size_t> counts(classes, 0);
    for (std::size_t y : task.labels) {
        if (y >= classes) {
            throw std::invalid_argument("pretrain_base: label " + std::to_string(y) +
                                        " outside the " + std::to_string(classes) + " base classes");
        }
        ++counts[y];
    }
    for (std::size_t c = 0; c < classes; ++c) {
        if (counts[c] < 2) {
            throw std::invalid_argument("pretrain_base: class " + std::to_string(c) + " has " +
                                        std::to_string(counts[c]) +
                                        " samples; prototypes need at least 2");
        }
    }

    Rng rng(cfg.seed);
    Rng init_rng = rng.fork(detail::kForkInit);
    TrainableConvNet net = make_trainable_net(cfg.input_dims, cfg.conv_channels, init_rng);
    const std::size_t d = cfg.feature_dim();
    Tensorf head_w_init({classes, d});
    init_rng.fill_normal(head_w_init, 0.0, 0.01 / std::sqrt(static_cast<double>(d)));
    Var<float> head_w = Var<float>::leaf(std::move(head_w_init), true);
    Var<float> head_b = Var<float>::leaf(Tensorf({classes}, 0.0f), true);

    std::vector<Var<float>> params = net.parameters();
    params.push_back(head_w);
    params.push_back(head_b);
    SgdMomentum opt;
    opt.lr = cfg.pretrain_lr;
    opt.momentum = cfg.momentum;
    opt.weight_decay = cfg.weight_decay;

    detail::BatchCursor cursor(task.size(), cfg.batch_size, rng.fork(detail::kForkBatches));
    for (std::size_t step = 0; step < cfg.pretrain_steps; ++step) {
        const std::vector<std::size_t> idx = cursor.next();
        const Tensorf xb = detail::gather_samples(task.inputs, idx);
        const std::vector<std::size_t> yb = detail::gather_values(task.labels, idx);
        Var<float> feats = net.features(Var<float>::constant(xb), true);
        Var<float> logits = linear(feats, head_w, head_b);
        Var<float> loss = nll_scaled(log_softmax_rows(logits), yb, 1.0f);
        backward(loss);
        opt.step(params);
    }

    BaseModel model = fold_backbone(net, head_w.value(), head_b.value(), PrototypeStore<float>{});
    model.prototypes = compute_prototypes(base_features(model, task.inputs), task.labels, classes);
    return model;
}

// ---------------------------------------------------------------------------
// Stage 2: adaptive training of the expanded model on an unlabeled task
// ---------------------------------------------------------------------------

/// Optimizes the novel branch, the fresh head columns, and the projection
/// head on the two-view unlabeled task. Base weights stay frozen: the old
/// head columns receive gradients only through feature replay, never
/// through the task losses. Loss terms with zero weight are dropped from
/// the graph entirely; the self-training term additionally ramps up over
/// `ramp_length` steps.
inline void train_task(ExpandedModel& m, const UnlabeledSet& task, const ExperimentConfig& cfg,
                       Rng rng) {
    cfg.validate();
    if (m.merged) throw std::invalid_argument("train_task: model already merged");
    if (task.size() == 0) throw std::invalid_argument("train_task: task dataset is empty");
    if (task.view1.shape != task.clean.shape || task.view2.shape != task.clean.shape) {
        throw std::invalid_argument("train_task: views and clean samples disagree in shape");
    }
    if (task.clean.shape[1] != m.base.layers.front().spec.in_channels) {
        throw std::invalid_argument("train_task: task has " + std::to_string(task.clean.shape[1]) +
                                    " input channels, model expects " +
                                    std::to_string(m.base.layers.front().spec.in_channels));
    }
    if (cfg.w_kd <= 0 && cfg.w_contrastive <= 0 && cfg.w_replay <= 0 && cfg.w_triplet <= 0 &&
        cfg.w_prob_reg <= 0 && cfg.w_self <= 0) {
        return;  // nothing to optimize
    }

    LossSchedule sched;
    sched.ramp_length = static_cast<double>(cfg.ramp_length);
    sched.tau_u = cfg.tau_u;
    sched.margin = cfg.margin;
    sched.hinge = cfg.hinge;

    const std::size_t old_classes = m.base.classes();
    const std::vector<Var<float>> params = m.trainable_parameters();
    SgdMomentum opt;
    opt.lr = cfg.novel_lr;
    opt.momentum = cfg.momentum;
    opt.weight_decay = cfg.weight_decay;

    detail::BatchCursor cursor(task.size(), cfg.batch_size, rng.fork(detail::kForkBatches));
    Rng replay_rng = rng.fork(detail::kForkReplay);

    for (std::size_t step = 0; step < cfg.novel_steps; ++step) {
        const std::vector<std::size_t> idx = cursor.next();
        const Tensorf x1 = detail::gather_samples(task.view1, idx);
        Var<float> f1 = expanded_features_train(m, x1, true);

        LossParts<float> parts;
        if (cfg.w_kd > 0) {
            // Drift penalty against the frozen base features of the same view.
            const Tensorf fb = base_features(m.base, x1);
            parts.kd = scale(kd_loss(Var<float>::constant(fb), f1), static_cast<float>(cfg.w_kd));
        }
        if (cfg.w_contrastive > 0) {
            const Tensorf x2 = detail::gather_samples(task.view2, idx);
            Var<float> f2 = expanded_features_train(m, x2, false);
            parts.contrastive = scale(contrastive_loss(project_features(m, f1), project_features(m, f2),
                                                       static_cast<float>(sched.tau_u)),
                                      static_cast<float>(cfg.w_contrastive));
        }

        // The joint logits for self-training and the triplet term read the old
        // head columns as constants: those columns must not chase the novel
        // task, they are maintained by replay alone.
        Var<float> logits_novel;
        if (cfg.w_self > 0 || cfg.w_triplet > 0 || cfg.w_prob_reg > 0) {
            logits_novel = linear(f1, m.head_novel_w, m.head_novel_b);
        }
        Var<float> joint;
        if (cfg.w_self > 0 || cfg.w_triplet > 0) {
            Var<float> logits_old = linear(f1, Var<float>::constant(m.head_base_w.value()),
                                           Var<float>::constant(m.head_base_b.value()));
            joint = concat_cols(logits_old, logits_novel);
        }
        if (cfg.w_self > 0) {
            const std::vector<std::size_t> pseudo = pseudo_labels(logits_novel.value(), old_classes);
            parts.self_train = scale(self_train_loss(joint, pseudo), static_cast<float>(cfg.w_self));
        }
        if (cfg.w_triplet > 0) {
            const TripletIndices trips = mine_triplets(f1.value());
            parts.triplet = scale(triplet_loss(gather_triplets(joint, trips), sched.hinge,
                                               static_cast<float>(sched.margin)),
                                  static_cast<float>(cfg.w_triplet));
        }
        if (cfg.w_prob_reg > 0) {
            parts.prob_reg = scale(prob_regularization(softmax_rows(logits_novel)),
                                   static_cast<float>(cfg.w_prob_reg));
        }
        if (cfg.w_replay > 0) {
            parts.replay = scale(feature_replay_loss(m.head_base_w, m.head_base_b, m.base.prototypes,
                                                     cfg.replay_per_class, replay_rng,
                                                     Var<float>::constant(m.head_novel_w.value()),
                                                     Var<float>::constant(m.head_novel_b.value())),
                                 static_cast<float>(cfg.w_replay));
        }

        Var<float> loss = total_loss(parts, sched.omega(static_cast<double>(step)));
        backward(loss);
        opt.step(params);
    }
}

// ---------------------------------------------------------------------------
// Stage 3: lossless merge back to the base size
// ---------------------------------------------------------------------------

/// Consumes the dual branches into single convolutions and stacks the novel
/// head columns under the old ones. The result has exactly the backbone
/// shape of the pre-expansion model; prototypes are carried over unchanged
/// and extended separately. Feature-gated (aff) expansions are rejected:
/// their gate depends on the input, so no single convolution reproduces
/// them.
inline BaseModel merge_task(ExpandedModel& m) {
    if (m.merged) throw std::invalid_argument("merge_task: model already merged");
    if (m.mode == MergeMode::AFF) {
        throw std::invalid_argument(
            "merge_task: feature-gated (aff) branches have an input-dependent gate "
            "and no lossless merged form");
    }
    sync_novel(m);

    BaseModel out;
    for (const auto& layer : m.layers) {
        MergedLayer<float> merged = merge_layer(layer);
        out.layers.push_back(std::move(merged.folded));
        out.gate_gamma.push_back(std::move(merged.gate_gamma));
    }

    const JointHead<float> head = snapshot_head(m);
    const std::size_t d = m.base.feature_dim();
    const std::size_t total = m.base.classes() + m.novel_classes;
    Tensorf w({total, d});
    Tensorf b({total});
    std::copy(head.base_w.data.begin(), head.base_w.data.end(), w.data.begin());
    std::copy(head.novel_w.data.begin(), head.novel_w.data.end(),
              w.data.begin() + static_cast<std::ptrdiff_t>(head.base_w.data.size()));
    std::copy(head.base_b.data.begin(), head.base_b.data.end(), b.data.begin());
    std::copy(head.novel_b.data.begin(), head.novel_b.data.end(),
              b.data.begin() + static_cast<std::ptrdiff_t>(head.base_b.data.size()));
    out.head_w = std::move(w);
    out.head_b = std::move(b);
    out.prototypes = m.base.prototypes;

    m.merged = true;
    out.validate();
    return out;
}

/// Adds one feature prototype per novel head column, labeled by the merged
/// model's own predictions on the task samples. A cluster the head assigns
/// fewer than two samples cannot carry a variance, so it falls back to the
/// pooled statistics of the whole task.
inline void extend_prototypes(BaseModel& model, const Tensorf& inputs, std::size_t old_classes) {
    model.validate();
    const std::size_t total = model.classes();
    if (old_classes >= total) {
        throw std::invalid_argument("extend_prototypes: model has no classes beyond the first " +
                                    std::to_string(old_classes));
    }
    if (model.prototypes.size() != old_classes) {
        throw std::invalid_argument("extend_prototypes: store covers " +
                                    std::to_string(model.prototypes.size()) + " classes, expected " +
                                    std::to_string(old_classes));
    }
    const Tensorf feats = base_features(model, inputs);
    const std::size_t n = feats.shape[0];
    const std::size_t d = feats.shape[1];
    if (n < 2) throw std::invalid_argument("extend_prototypes: need at least 2 task samples");
    const std::vector<std::size_t> preds =
        predict(linear(feats, model.head_w,
                       std::vector<float>(model.head_b.data.begin(), model.head_b.data.end())));

    // Pooled fallback statistics over the whole task.
    Prototype<float> pooled;
    pooled.mean.assign(d, 0.0f);
    pooled.var.assign(d, 0.0f);
    pooled.count = n;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) pooled.mean[k] += feats.data[i * d + k];
    }
    for (std::size_t k = 0; k < d; ++k) pooled.mean[k] /= static_cast<float>(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            const float delta = feats.data[i * d + k] - pooled.mean[k];
            pooled.var[k] += delta * delta;
        }
    }
    for (std::size_t k = 0; k < d; ++k) pooled.var[k] /= static_cast<float>(n - 1);

    for (std::size_t c = old_classes; c < total; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < n; ++i) {
            if (preds[i] == c) members.push_back(i);
        }
        if (members.size() < 2) {
            model.prototypes.classes.push_back(pooled);
            continue;
        }
        Prototype<float> p;
        p.mean.assign(d, 0.0f);
        p.var.assign(d, 0.0f);
        p.count = members.size();
        for (std::size_t i : members) {
            for (std::size_t k = 0; k < d; ++k) p.mean[k] += feats.data[i * d + k];
        }
        for (std::size_t k = 0; k < d; ++k) p.mean[k] /= static_cast<float>(members.size());
        for (std::size_t i : members) {
            for (std::size_t k = 0; k < d; ++k) {
                const float delta = feats.data[i * d + k] - p.mean[k];
                p.var[k] += delta * delta;
            }
        }
        for (std::size_t k = 0; k < d; ++k) p.var[k] /= static_cast<float>(members.size() - 1);
        model.prototypes.classes.push_back(std::move(p));
    }
    model.prototypes.validate();
}

// ---------------------------------------------------------------------------
// Stage 4: evaluation against a task stream
// ---------------------------------------------------------------------------

namespace detail {

/// Inputs and hidden labels for scoring task `task_index`: everything the
/// model learned before (base task plus earlier novel tasks) forms the old
/// split, the task itself the new split. Clean samples throughout.
struct EvalSplit {
    Tensorf inputs;
    std::vector<std::size_t> labels;
    std::size_t old_classes = 0;
    std::size_t new_classes = 0;
};

inline EvalSplit build_eval_split(const TaskStream& stream, std::size_t task_index) {
    if (task_index == 0 || task_index >= stream.task_classes.size()) {
        throw std::invalid_argument("evaluate: task " + std::to_string(task_index) +
                                    " is not a novel task of this stream");
    }
    if (stream.novel.size() + 1 != stream.task_classes.size() ||
        stream.hidden_labels.size() != stream.novel.size()) {
        throw std::invalid_argument("evaluate: stream bookkeeping is inconsistent");
    }
    EvalSplit split;
    for (std::size_t t = 0; t < task_index; ++t) split.old_classes += stream.task_classes[t];
    split.new_classes = stream.task_classes[task_index];

    std::vector<const Tensorf*> chunks = {&stream.base.inputs};
    split.labels = stream.base.labels;
    for (std::size_t t = 1; t <= task_index; ++t) {
        chunks.push_back(&stream.novel[t - 1].clean);
        const auto& hidden = stream.hidden_labels[t - 1];
        split.labels.insert(split.labels.end(), hidden.begin(), hidden.end());
    }

    std::size_t rows = 0;
    for (const Tensorf* c : chunks) rows += c->shape[0];
    std::vector<std::size_t> shape = stream.base.inputs.shape;
    shape[0] = rows;
    split.inputs = Tensorf(shape);
    std::size_t offset = 0;
    for (const Tensorf* c : chunks) {
        std::copy(c->data.begin(), c->data.end(),
                  split.inputs.data.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += c->data.size();
    }
    return split;
}

}  // namespace detail

/// Scores the folded model on task `task_index` of the stream: plain
/// accuracy on the old split, cluster accuracy (after the one-to-one
/// re-assignment of novel head columns) on the new split, and their
/// count-weighted union.
inline MetricsRow evaluate_merged(const BaseModel& model, const TaskStream& stream,
                                  std::size_t task_index) {
    const detail::EvalSplit split = detail::build_eval_split(stream, task_index);
    if (model.classes() != split.old_classes + split.new_classes) {
        throw std::invalid_argument("evaluate_merged: model covers " +
                                    std::to_string(model.classes()) + " classes but task " +
                                    std::to_string(task_index) + " expects " +
                                    std::to_string(split.old_classes + split.new_classes));
    }
    const std::vector<std::size_t> preds = predict(base_logits(model, split.inputs));
    return evaluate_predictions(preds, split.labels, split.old_classes, split.new_classes,
                                task_index);
}

/// Same protocol on the still-expanded model, through the dual-branch
/// inference forward and the joint head.
inline MetricsRow evaluate_expanded(ExpandedModel& m, const TaskStream& stream,
                                    std::size_t task_index) {
    if (m.merged) throw std::invalid_argument("evaluate_expanded: model already merged");
    const detail::EvalSplit split = detail::build_eval_split(stream, task_index);
    const std::size_t classes = m.base.classes() + m.novel_classes;
    if (classes != split.old_classes + split.new_classes) {
        throw std::invalid_argument("evaluate_expanded: model covers " + std::to_string(classes) +
                                    " classes but task " + std::to_string(task_index) +
                                    " expects " +
                                    std::to_string(split.old_classes + split.new_classes));
    }
    const std::vector<std::size_t> preds = predict(expanded_joint_logits(m, split.inputs));
    return evaluate_predictions(preds, split.labels, split.old_classes, split.new_classes,
                                task_index);
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

/// Metrics for one novel task, taken just before and just after its merge.
/// A lossless merge leaves the two rows identical.
struct TaskOutcome {
    MetricsRow pre_merge;
    MetricsRow post_merge;
};

struct ExperimentResult {
    BaseModel model;                 // final folded model, all classes
    std::vector<TaskOutcome> tasks;  // one entry per novel task
    MetricsReport report;            // post-merge rows, ready for rendering
};

/// Runs the full protocol on a prepared stream: pretrain on the labeled
/// base task, then for each novel task expand, train, score, merge, extend
/// the prototypes, and score again. The stream must match the config's
/// task structure; all randomness forks off `cfg.seed`.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const TaskStream& stream) {
    cfg.validate();
    if (stream.task_classes != cfg.task_classes) {
        throw std::invalid_argument("run_experiment: stream task structure does not match config");
    }

    ExperimentResult out;
    BaseModel model = pretrain_base(cfg, stream.base);
    Rng rng(cfg.seed);
    for (std::size_t t = 1; t < cfg.task_classes.size(); ++t) {
        Rng task_rng = rng.fork(detail::kForkTask + t);
        ExpandedModel expanded = expand_model(model, cfg.task_classes[t], cfg.merge_mode, task_rng);
        train_task(expanded, stream.novel[t - 1], cfg, task_rng.fork(detail::kForkTrain));

        TaskOutcome outcome;
        outcome.pre_merge = evaluate_expanded(expanded, stream, t);
        const std::size_t old_classes = model.classes();
        model = merge_task(expanded);
        extend_prototypes(model, stream.novel[t - 1].clean, old_classes);
        outcome.post_merge = evaluate_merged(model, stream, t);

        out.report.push_back(outcome.post_merge);
        out.tasks.push_back(std::move(outcome));
    }
    out.model = std::move(model);
    return out;
}

/// Convenience overload that synthesizes the stream from the config.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    return run_experiment(cfg, make_synthetic_stream(cfg));
}

}  // namespace adm
