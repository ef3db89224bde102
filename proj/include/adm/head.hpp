#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include "adm/autograd.hpp"
#include "adm/ops.hpp"
#include "adm/tensor.hpp"

namespace adm {

/// Single classification head over base and novel classes. The two column
/// groups are stored separately so the base block can be trained by feature
/// replay alone while the novel block follows the discovery losses.
template <typename T>
struct JointHead {
    Tensor<T> base_w;   // (|C_base|, d)
    Tensor<T> base_b;   // (|C_base|)
    Tensor<T> novel_w;  // (|C_novel|, d)
    Tensor<T> novel_b;  // (|C_novel|)

    std::size_t base_classes() const { return base_w.rank() == 2 ? base_w.shape[0] : 0; }
    std::size_t novel_classes() const { return novel_w.rank() == 2 ? novel_w.shape[0] : 0; }
    std::size_t total_classes() const { return base_classes() + novel_classes(); }
    std::size_t feature_dim() const { return base_w.rank() == 2 ? base_w.shape[1] : 0; }

    void validate() const {
        if (base_w.rank() != 2 || base_b.rank() != 1 || base_b.shape[0] != base_w.shape[0]) {
            throw std::invalid_argument("JointHead: malformed base block");
        }
        if (novel_classes() > 0) {
            if (novel_w.rank() != 2 || novel_w.shape[1] != base_w.shape[1]) {
                throw std::invalid_argument("JointHead: novel feature dim " +
                                            std::to_string(novel_w.rank() == 2 ? novel_w.shape[1] : 0) +
                                            " != base feature dim " + std::to_string(base_w.shape[1]));
            }
            if (novel_b.rank() != 1 || novel_b.shape[0] != novel_w.shape[0]) {
                throw std::invalid_argument("JointHead: malformed novel bias");
            }
        }
    }

    Tensor<T> base_logits(const Tensor<T>& f) const {
        return linear(f, base_w, std::vector<T>(base_b.data.begin(), base_b.data.end()));
    }

    Tensor<T> novel_logits(const Tensor<T>& f) const {
        return linear(f, novel_w, std::vector<T>(novel_b.data.begin(), novel_b.data.end()));
    }

    /// Concatenated (base | novel) logits; width |C_base| + |C_novel|.
    Tensor<T> joint_logits(const Tensor<T>& f) const {
        validate();
        Tensor<T> b = base_logits(f);
        if (novel_classes() == 0) return b;
        Tensor<T> n = novel_logits(f);
        Tensor<T> out({f.shape[0], total_classes()});
        for (std::size_t i = 0; i < f.shape[0]; ++i) {
            for (std::size_t j = 0; j < b.shape[1]; ++j) out.at2(i, j) = b.at2(i, j);
            for (std::size_t j = 0; j < n.shape[1]; ++j) out.at2(i, b.shape[1] + j) = n.at2(i, j);
        }
        return out;
    }
};

}  // namespace adm
