#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "adm/autograd.hpp"
#include "adm/ops.hpp"
#include "adm/prototypes.hpp"
#include "adm/rng.hpp"
#include "adm/tensor.hpp"

namespace adm {

/// Ramp weight in [0,1]: exp(-5 (1 - min(t,T)/T)^2). Starts near zero
/// (e^-5 at t=0), reaches 1 at t = T, and never decreases.
inline double rampup(double t, double ramp_length) {
    if (!(ramp_length > 0.0)) throw std::invalid_argument("rampup: ramp length must be positive");
    const double r = 1.0 - std::min(t, ramp_length) / ramp_length;
    return std::exp(-5.0 * r * r);
}

/// Hyperparameters shared by the discovery objectives.
struct LossSchedule {
    double ramp_length = 50.0;  // steps until the self-training weight saturates
    double tau_u = 0.5;         // contrastive temperature
    double margin = 1.0;        // only used when hinge is on
    bool hinge = false;         // optional hinged triplet variant

    double omega(double step) const { return rampup(step, ramp_length); }
};

/// Instance-discrimination loss between two views of the same batch. Rows
/// are re-normalized internally; for each anchor i the positive is row i of
/// the other view and the denominator sums the anchor's similarities to the
/// whole other view (positive included), keeping every per-row term
/// non-negative.
template <typename T>
Var<T> contrastive_loss(const Var<T>& z, const Var<T>& z_other, T tau) {
    const Tensor<T>& a = z.value();
    const Tensor<T>& b = z_other.value();
    if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("contrastive_loss: inputs must be rank 2");
    a.require_same_shape(b, "contrastive_loss");
    if (a.shape[0] < 2) {
        throw std::invalid_argument("contrastive_loss: batch of " + std::to_string(a.shape[0]) +
                                    " has no negatives");
    }
    if (!(tau > T(0))) throw std::invalid_argument("contrastive_loss: temperature must be positive");
    Var<T> zn = l2_normalize_rows(z);
    Var<T> on = l2_normalize_rows(z_other);
    Var<T> sims = scale(linear(zn, on), T(1) / tau);  // (B,B): anchor row x other-view column
    return mean_all(logsumexp_rows(sims) - diag(sims));
}

/// Mean Euclidean distance between paired feature rows; the drift penalty
/// that anchors the novel representation to the frozen base one.
template <typename T>
Var<T> kd_loss(const Var<T>& f_base, const Var<T>& f_novel) {
    f_base.value().require_same_shape(f_novel.value(), "kd_loss");
    if (f_base.value().rank() != 2) throw std::invalid_argument("kd_loss: inputs must be rank 2");
    Var<T> d = f_base - f_novel;
    return mean_all(sqrt_elem(row_sum(d * d)));
}

/// Pseudo-label for one row of novel-class logits: offset argmax into the
/// joint label space. Ties break toward the lowest index.
template <typename T>
std::size_t pseudo_label(const Tensor<T>& novel_logits_row, std::size_t base_classes) {
    if (novel_logits_row.rank() != 1 || novel_logits_row.numel() == 0) {
        throw std::invalid_argument("pseudo_label: need a non-empty rank-1 logits row");
    }
    std::size_t best = 0;
    for (std::size_t j = 1; j < novel_logits_row.numel(); ++j) {
        if (novel_logits_row.data[j] > novel_logits_row.data[best]) best = j;
    }
    return base_classes + best;
}

/// Row-wise pseudo-labels for a batch of novel-class logits.
template <typename T>
std::vector<std::size_t> pseudo_labels(const Tensor<T>& novel_logits, std::size_t base_classes) {
    if (novel_logits.rank() != 2 || novel_logits.shape[1] == 0) {
        throw std::invalid_argument("pseudo_labels: need non-empty rank-2 logits");
    }
    std::vector<std::size_t> out(novel_logits.shape[0]);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = base_classes + argmax_row(novel_logits, i);
    return out;
}

/// Cross-entropy of joint logits against pseudo-labels, scaled by the
/// reciprocal of the joint class count and averaged over the batch.
template <typename T>
Var<T> self_train_loss(const Var<T>& joint_logits, const std::vector<std::size_t>& pseudo) {
    const Tensor<T>& l = joint_logits.value();
    if (l.rank() != 2 || l.shape[1] == 0) throw std::invalid_argument("self_train_loss: need rank-2 logits");
    const T scale = T(1) / static_cast<T>(l.shape[1]);
    return nll_scaled(log_softmax_rows(joint_logits), pseudo, scale);
}

/// Row indices of each anchor's nearest and farthest batch neighbor.
struct TripletIndices {
    std::vector<std::size_t> positive;
    std::vector<std::size_t> negative;
};

/// For each anchor, the positive is the closest other row by cosine distance
/// and the negative the farthest. Rows without a direction (zero norm) are
/// treated as distance 1 from everything. Ties break toward the lowest row.
template <typename T>
TripletIndices mine_triplets(const Tensor<T>& features) {
    if (features.rank() != 2) throw std::invalid_argument("mine_triplets: features must be rank 2");
    const std::size_t n = features.shape[0], d = features.shape[1];
    if (n < 3) {
        throw std::invalid_argument("mine_triplets: batch of " + std::to_string(n) +
                                    " cannot supply distinct positive and negative");
    }
    std::vector<T> norms(n, T(0));
    for (std::size_t i = 0; i < n; ++i) {
        T ss = T(0);
        for (std::size_t j = 0; j < d; ++j) ss += features.at2(i, j) * features.at2(i, j);
        norms[i] = std::sqrt(ss);
    }
    auto distance = [&](std::size_t i, std::size_t j) -> T {
        if (norms[i] == T(0) || norms[j] == T(0)) return T(1);
        T dot = T(0);
        for (std::size_t k = 0; k < d; ++k) dot += features.at2(i, k) * features.at2(j, k);
        T c = dot / (norms[i] * norms[j]);
        c = std::clamp(c, T(-1), T(1));
        return T(1) - c;
    };
    TripletIndices out;
    out.positive.resize(n);
    out.negative.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t pos = i == 0 ? 1 : 0;
        std::size_t neg = pos;
        T dpos = distance(i, pos), dneg = dpos;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const T dj = distance(i, j);
            if (dj < dpos) {
                dpos = dj;
                pos = j;
            }
            if (dj > dneg) {
                dneg = dj;
                neg = j;
            }
        }
        out.positive[i] = pos;
        out.negative[i] = neg;
    }
    return out;
}

/// Aligned anchor/positive/negative logits rows over the joint label space.
template <typename T>
struct TripletBatch {
    Var<T> anchor;
    Var<T> positive;
    Var<T> negative;

    void validate() const {
        const Tensor<T>& a = anchor.value();
        if (a.rank() != 2 || a.shape[1] == 0) throw std::invalid_argument("TripletBatch: malformed anchor");
        a.require_same_shape(positive.value(), "TripletBatch");
        a.require_same_shape(negative.value(), "TripletBatch");
    }
};

template <typename T>
TripletBatch<T> gather_triplets(const Var<T>& joint_logits, const TripletIndices& idx) {
    const std::size_t n = joint_logits.value().shape[0];
    if (idx.positive.size() != n || idx.negative.size() != n) {
        throw std::invalid_argument("gather_triplets: index count " + std::to_string(idx.positive.size()) +
                                    " != rows " + std::to_string(n));
    }
    std::vector<std::size_t> anchors(n);
    for (std::size_t i = 0; i < n; ++i) anchors[i] = i;
    return TripletBatch<T>{gather_rows(joint_logits, anchors), gather_rows(joint_logits, idx.positive),
                           gather_rows(joint_logits, idx.negative)};
}

/// Pull the anchor's class distribution toward its positive and away from
/// its negative: mean over rows of
///   (1/C) Σ_k (σ(a)_k − σ(p)_k)² − (1/C) Σ_k (σ(a)_k − σ(n)_k)².
/// The plain form can go negative; the optional hinge clamps each row at
/// max(0, pos − neg + margin).
template <typename T>
Var<T> triplet_loss(const TripletBatch<T>& t, bool hinge = false, T margin = T(1)) {
    t.validate();
    if (hinge && margin < T(0)) throw std::invalid_argument("triplet_loss: margin must be non-negative");
    const T inv_c = T(1) / static_cast<T>(t.anchor.value().shape[1]);
    Var<T> sa = softmax_rows(t.anchor);
    Var<T> dp = sa - softmax_rows(t.positive);
    Var<T> dn = sa - softmax_rows(t.negative);
    Var<T> per_row = scale(row_sum(dp * dp) - row_sum(dn * dn), inv_c);
    if (hinge) {
        per_row = relu(per_row + Var<T>::constant(Tensor<T>(per_row.value().shape, margin)));
    }
    return mean_all(per_row);
}

/// Negative entropy of the batch-mean novel distribution: Σ p̄ log p̄.
/// Minimizing it spreads the mean prediction toward uniform, the guard
/// against assigning every sample to one novel class.
template <typename T>
Var<T> prob_regularization(const Var<T>& novel_probs) {
    const Tensor<T>& p = novel_probs.value();
    if (p.rank() != 2 || p.shape[1] == 0) throw std::invalid_argument("prob_regularization: need rank-2 rows");
    for (std::size_t i = 0; i < p.shape[0]; ++i) {
        T sum = T(0);
        for (std::size_t j = 0; j < p.shape[1]; ++j) {
            if (p.at2(i, j) < T(0)) {
                throw std::invalid_argument("prob_regularization: negative probability at row " +
                                            std::to_string(i));
            }
            sum += p.at2(i, j);
        }
        if (std::abs(static_cast<double>(sum) - 1.0) > 1e-4) {
            throw std::invalid_argument("prob_regularization: row " + std::to_string(i) +
                                        " sums to " + std::to_string(static_cast<double>(sum)));
        }
    }
    return sum_all(xlogx(mean_rows(novel_probs)));
}

/// Replay of the frozen base classes: per class, draw feature vectors from
/// the stored Gaussian and take cross-entropy against that class, averaged
/// over all draws. When the novel head columns are supplied, the softmax
/// normalizes over the whole joint head, so the base columns learn to
/// dominate the novel ones on old-class features — pass those columns as
/// constants to keep their own training confined to the discovery losses.
template <typename T>
Var<T> feature_replay_loss(const Var<T>& base_w, const Var<T>& base_b, const PrototypeStore<T>& store,
                           std::size_t samples_per_class, Rng& rng,
                           const Var<T>& novel_w = Var<T>(), const Var<T>& novel_b = Var<T>()) {
    store.validate();
    if (samples_per_class == 0) throw std::invalid_argument("feature_replay_loss: need at least 1 draw");
    if (novel_w.valid() != novel_b.valid()) {
        throw std::invalid_argument("feature_replay_loss: novel weight and bias must come together");
    }
    const std::size_t c = store.size(), d = store.feature_dim;
    Tensor<T> draws({c * samples_per_class, d});
    std::vector<std::size_t> labels(c * samples_per_class);
    std::size_t row = 0;
    for (std::size_t cls = 0; cls < c; ++cls) {
        const auto& p = store.classes[cls];
        for (std::size_t s = 0; s < samples_per_class; ++s, ++row) {
            for (std::size_t j = 0; j < d; ++j) {
                draws.at2(row, j) =
                    static_cast<T>(p.mean[j] + std::sqrt(static_cast<double>(p.var[j])) * rng.normal());
            }
            labels[row] = cls;
        }
    }
    const Var<T> features = Var<T>::constant(std::move(draws));
    Var<T> logits = linear(features, base_w, base_b);
    if (novel_w.valid()) logits = concat_cols(logits, linear(features, novel_w, novel_b));
    return nll_scaled(log_softmax_rows(logits), labels, T(1));
}

/// The step objective. Representation terms (drift penalty + contrastive)
/// enter at full weight; classifier terms add replay, triplet and the
/// entropy regularizer, with self-training ramped in by omega.
template <typename T>
struct LossParts {
    Var<T> kd;
    Var<T> contrastive;
    Var<T> replay;
    Var<T> triplet;
    Var<T> prob_reg;
    Var<T> self_train;
};

template <typename T>
Var<T> total_loss(const LossParts<T>& parts, double omega) {
    if (omega < 0.0 || omega > 1.0) throw std::invalid_argument("total_loss: omega outside [0,1]");
    Var<T> acc;
    auto add = [&acc](const Var<T>& term) {
        if (!term.valid()) return;
        acc = acc.valid() ? acc + term : term;
    };
    add(parts.kd);
    add(parts.contrastive);
    add(parts.replay);
    add(parts.triplet);
    add(parts.prob_reg);
    if (parts.self_train.valid()) add(scale(parts.self_train, static_cast<T>(omega)));
    if (!acc.valid()) return Var<T>::constant(Tensor<T>({1}, T(0)));
    return acc;
}

}  // namespace adm
