#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "adm/config.hpp"
#include "adm/rng.hpp"
#include "adm/tensor.hpp"

namespace adm {

/// Supervised split: inputs with visible labels. Used for the base task.
struct LabeledSet {
    Tensorf inputs;  // (n, dims, s, s)
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
};

/// Unlabeled task payload. Holds two stochastic views per sample for the
/// discovery losses and the clean samples for evaluation-time forwards —
/// and nothing else, so the training path cannot read ground truth even by
/// accident. Hidden labels live in TaskStream, outside this type.
struct UnlabeledSet {
    Tensorf view1;  // (n, dims, s, s)
    Tensorf view2;  // (n, dims, s, s)
    Tensorf clean;  // (n, dims, s, s)

    std::size_t size() const { return clean.shape.empty() ? 0 : clean.shape[0]; }
};

/// One labeled base task followed by unlabeled novel tasks with disjoint
/// class ids. Hidden labels are kept parallel to the novel sets and are
/// consumed only by evaluation.
struct TaskStream {
    LabeledSet base;
    std::vector<UnlabeledSet> novel;
    std::vector<std::vector<std::size_t>> hidden_labels;  // global class ids, eval only
    std::vector<std::size_t> task_classes;                // classes per task, base first
    std::vector<std::vector<double>> class_centers;       // generator metadata, eval only
};

namespace detail {

/// Replicates each dims-vector across an s-by-s spatial grid.
inline Tensorf broadcast_rows(const std::vector<std::vector<double>>& rows, std::size_t s) {
    const std::size_t n = rows.size();
    const std::size_t dims = rows.empty() ? 0 : rows[0].size();
    Tensorf out({n, dims, s, s}, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d = 0; d < dims; ++d) {
            const auto v = static_cast<float>(rows[i][d]);
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x) out.at4(i, d, y, x) = v;
        }
    }
    return out;
}

/// Per-dimension standard deviation across a set of vectors (population
/// form; only used to scale view noise).
inline std::vector<double> per_dim_scale(const std::vector<std::vector<double>>& rows) {
    const std::size_t dims = rows.empty() ? 0 : rows[0].size();
    std::vector<double> mean(dims, 0.0), scale(dims, 0.0);
    for (const auto& r : rows)
        for (std::size_t d = 0; d < dims; ++d) mean[d] += r[d];
    for (std::size_t d = 0; d < dims; ++d) mean[d] /= static_cast<double>(rows.size());
    for (const auto& r : rows)
        for (std::size_t d = 0; d < dims; ++d) scale[d] += (r[d] - mean[d]) * (r[d] - mean[d]);
    for (std::size_t d = 0; d < dims; ++d)
        scale[d] = std::sqrt(scale[d] / static_cast<double>(rows.size()));
    return scale;
}

/// One stochastic view: additive per-dimension Gaussian noise plus random
/// coordinate masking.
inline std::vector<double> make_view(const std::vector<double>& row,
                                     const std::vector<double>& scale, double noise_sigma,
                                     double mask_fraction, Rng& rng) {
    std::vector<double> view(row.size());
    for (std::size_t d = 0; d < row.size(); ++d) {
        view[d] = row[d] + noise_sigma * scale[d] * rng.normal();
    }
    for (std::size_t d = 0; d < row.size(); ++d) {
        if (rng.bernoulli(mask_fraction)) view[d] = 0.0;
    }
    return view;
}

}  // namespace detail

/// Builds a deterministic task stream of isotropic unit-variance Gaussian
/// clusters whose centers sit at pairwise distance >= separation. Class ids
/// are global and disjoint across tasks. Each unlabeled sample carries two
/// seeded views (additive noise scaled by the per-dimension data std, then
/// `mask_fraction` coordinate dropout).
inline TaskStream make_synthetic_stream(std::uint64_t seed, std::size_t dims,
                                        const std::vector<std::size_t>& classes_per_task,
                                        std::size_t samples_per_class, double separation,
                                        std::size_t spatial_size = 4, double noise_sigma = 0.1,
                                        double mask_fraction = 0.2) {
    if (dims == 0) throw std::invalid_argument("make_synthetic_stream: dims must be positive");
    if (classes_per_task.empty()) {
        throw std::invalid_argument("make_synthetic_stream: need at least the base task");
    }
    for (std::size_t c : classes_per_task) {
        if (c == 0) throw std::invalid_argument("make_synthetic_stream: class counts must be positive");
    }
    if (samples_per_class == 0) {
        throw std::invalid_argument("make_synthetic_stream: samples_per_class must be positive");
    }
    if (separation <= 0.0) {
        throw std::invalid_argument("make_synthetic_stream: separation must be positive");
    }
    if (spatial_size == 0) {
        throw std::invalid_argument("make_synthetic_stream: spatial_size must be positive");
    }
    if (mask_fraction < 0.0 || mask_fraction >= 1.0) {
        throw std::invalid_argument("make_synthetic_stream: mask_fraction must lie in [0, 1)");
    }

    const std::size_t total_classes =
        std::accumulate(classes_per_task.begin(), classes_per_task.end(), std::size_t{0});

    // Rejection-sample centers from N(0, separation^2 I) until they respect
    // the separation radius. A bounded attempt budget turns a hopeless
    // request into an error instead of a hang.
    Rng rng(seed);
    Rng center_rng = rng.fork(0x5eed0001);
    constexpr int kMaxAttempts = 1000;
    std::vector<std::vector<double>> centers;
    centers.reserve(total_classes);
    for (std::size_t c = 0; c < total_classes; ++c) {
        bool placed = false;
        for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
            std::vector<double> candidate(dims);
            for (auto& v : candidate) v = separation * center_rng.normal();
            bool clear = true;
            for (const auto& other : centers) {
                double d2 = 0.0;
                for (std::size_t k = 0; k < dims; ++k) {
                    const double diff = candidate[k] - other[k];
                    d2 += diff * diff;
                }
                if (d2 < separation * separation) {
                    clear = false;
                    break;
                }
            }
            if (clear) {
                centers.push_back(std::move(candidate));
                placed = true;
            }
        }
        if (!placed) {
            throw std::runtime_error("make_synthetic_stream: infeasible packing: cannot place " +
                                     std::to_string(total_classes) + " centers at separation " +
                                     std::to_string(separation) + " in " + std::to_string(dims) +
                                     " dims");
        }
    }

    TaskStream stream;
    stream.task_classes = classes_per_task;
    stream.class_centers = centers;
    std::size_t first_class = 0;
    for (std::size_t task = 0; task < classes_per_task.size(); ++task) {
        const std::size_t classes = classes_per_task[task];
        const std::size_t n = classes * samples_per_class;
        Rng task_rng = rng.fork(0xda7a0000 + task);

        std::vector<std::vector<double>> rows(n, std::vector<double>(dims));
        std::vector<std::size_t> labels(n);
        for (std::size_t c = 0; c < classes; ++c) {
            for (std::size_t s = 0; s < samples_per_class; ++s) {
                auto& row = rows[c * samples_per_class + s];
                const auto& center = centers[first_class + c];
                for (std::size_t d = 0; d < dims; ++d) row[d] = center[d] + task_rng.normal();
                labels[c * samples_per_class + s] = first_class + c;
            }
        }
        // Shuffle so mini-batches mix classes.
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        task_rng.shuffle(order);
        std::vector<std::vector<double>> shuffled(n);
        std::vector<std::size_t> shuffled_labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            shuffled[i] = std::move(rows[order[i]]);
            shuffled_labels[i] = labels[order[i]];
        }

        if (task == 0) {
            stream.base.inputs = detail::broadcast_rows(shuffled, spatial_size);
            stream.base.labels = std::move(shuffled_labels);
        } else {
            const auto scale = detail::per_dim_scale(shuffled);
            std::vector<std::vector<double>> v1(n), v2(n);
            for (std::size_t i = 0; i < n; ++i) {
                v1[i] = detail::make_view(shuffled[i], scale, noise_sigma, mask_fraction, task_rng);
                v2[i] = detail::make_view(shuffled[i], scale, noise_sigma, mask_fraction, task_rng);
            }
            UnlabeledSet set;
            set.view1 = detail::broadcast_rows(v1, spatial_size);
            set.view2 = detail::broadcast_rows(v2, spatial_size);
            set.clean = detail::broadcast_rows(shuffled, spatial_size);
            stream.novel.push_back(std::move(set));
            stream.hidden_labels.push_back(std::move(shuffled_labels));
        }
        first_class += classes;
    }
    return stream;
}

/// Convenience overload wired to the experiment configuration.
inline TaskStream make_synthetic_stream(const ExperimentConfig& cfg) {
    return make_synthetic_stream(cfg.seed, cfg.input_dims, cfg.task_classes, cfg.samples_per_class,
                                 cfg.separation, cfg.input_size, cfg.noise_sigma,
                                 cfg.mask_fraction);
}

/// Reads CIFAR-style binary records (1 label byte + 3 x 32 x 32 pixel bytes)
/// into a labeled set scaled to [0, 1]. `max_records = 0` reads everything.
inline LabeledSet read_cifar_binary(const std::string& path, std::size_t max_records = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_cifar_binary: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
    if (bytes.empty() || bytes.size() % kRecord != 0) {
        throw std::runtime_error("read_cifar_binary: " + path + " is not a whole number of " +
                                 std::to_string(kRecord) + "-byte records");
    }
    std::size_t n = bytes.size() / kRecord;
    if (max_records > 0 && max_records < n) n = max_records;

    LabeledSet set;
    set.inputs = Tensorf({n, 3, 32, 32}, 0.0f);
    set.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = bytes.data() + i * kRecord;
        set.labels[i] = rec[0];
        for (std::size_t k = 0; k < 3 * 32 * 32; ++k) {
            set.inputs.data[i * 3 * 32 * 32 + k] = static_cast<float>(rec[1 + k]) / 255.0f;
        }
    }
    return set;
}

}  // namespace adm
