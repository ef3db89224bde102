#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "adm/tensor.hpp"

namespace adm {

/// Per-class Gaussian summary of feature vectors: mean, per-dimension
/// unbiased variance, and the sample count behind them.
template <typename T>
struct Prototype {
    std::vector<T> mean;
    std::vector<T> var;
    std::size_t count = 0;
};

/// One prototype per class, indexed by class id.
template <typename T>
struct PrototypeStore {
    std::size_t feature_dim = 0;
    std::vector<Prototype<T>> classes;

    std::size_t size() const { return classes.size(); }
    bool empty() const { return classes.empty(); }

    void validate() const {
        if (classes.empty()) throw std::invalid_argument("PrototypeStore: no classes");
        for (std::size_t c = 0; c < classes.size(); ++c) {
            const auto& p = classes[c];
            if (p.mean.size() != feature_dim || p.var.size() != feature_dim) {
                throw std::invalid_argument("PrototypeStore: class " + std::to_string(c) +
                                            " dimension mismatch");
            }
            if (p.count < 2) {
                throw std::invalid_argument("PrototypeStore: class " + std::to_string(c) +
                                            " has fewer than 2 samples");
            }
            for (T v : p.var) {
                if (v < T(0)) {
                    throw std::invalid_argument("PrototypeStore: negative variance in class " +
                                                std::to_string(c));
                }
            }
        }
    }
};

/// Two-pass per-class mean and unbiased per-dimension variance. Every class
/// id in [0, num_classes) must appear at least twice, otherwise the variance
/// is undefined.
template <typename T>
PrototypeStore<T> compute_prototypes(const Tensor<T>& features, const std::vector<std::size_t>& labels,
                                     std::size_t num_classes) {
    if (features.rank() != 2) throw std::invalid_argument("compute_prototypes: features must be rank 2");
    if (labels.size() != features.shape[0]) {
        throw std::invalid_argument("compute_prototypes: label count " + std::to_string(labels.size()) +
                                    " != rows " + std::to_string(features.shape[0]));
    }
    if (num_classes == 0) throw std::invalid_argument("compute_prototypes: num_classes must be positive");
    const std::size_t d = features.shape[1];

    PrototypeStore<T> store;
    store.feature_dim = d;
    store.classes.assign(num_classes, Prototype<T>{std::vector<T>(d, T(0)), std::vector<T>(d, T(0)), 0});

    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw std::invalid_argument("compute_prototypes: label " + std::to_string(labels[i]) +
                                        " out of range at row " + std::to_string(i));
        }
        auto& p = store.classes[labels[i]];
        ++p.count;
        for (std::size_t j = 0; j < d; ++j) p.mean[j] += features.at2(i, j);
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
        auto& p = store.classes[c];
        if (p.count < 2) {
            throw std::invalid_argument("compute_prototypes: class " + std::to_string(c) + " has " +
                                        std::to_string(p.count) + " samples, needs at least 2");
        }
        for (std::size_t j = 0; j < d; ++j) p.mean[j] /= static_cast<T>(p.count);
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& p = store.classes[labels[i]];
        for (std::size_t j = 0; j < d; ++j) {
            const T diff = features.at2(i, j) - p.mean[j];
            p.var[j] += diff * diff;
        }
    }
    for (auto& p : store.classes) {
        for (std::size_t j = 0; j < d; ++j) p.var[j] /= static_cast<T>(p.count - 1);
    }
    return store;
}

}  // namespace adm
