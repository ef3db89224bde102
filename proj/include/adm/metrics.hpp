#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adm/hungarian.hpp"
#include "adm/tensor.hpp"

namespace adm {

/// Accuracy figures for one task boundary. `old_acc` is plain accuracy on
/// base-class samples; `new_acc` is cluster accuracy on novel-class samples
/// after the optimal re-assignment of predicted novel ids to ground truth;
/// `all_acc` applies that same re-assignment over the union of both splits.
struct MetricsRow {
    std::size_t task = 0;
    double old_acc = 0.0;
    double new_acc = 0.0;
    double all_acc = 0.0;
    std::size_t old_total = 0;
    std::size_t old_correct = 0;
    std::size_t new_total = 0;
    std::size_t new_correct = 0;
    std::vector<std::size_t> class_counts;  // ground-truth samples per class id
};

using MetricsReport = std::vector<MetricsRow>;

/// Scores joint-head predictions against hidden labels. Labels live in
/// [0, base_classes + novel_classes); ids below base_classes are old classes.
/// Novel predictions are re-assigned to ground-truth ids by minimum-cost
/// matching on negative co-occurrence counts (shifted to stay non-negative),
/// restricted to the novel label set. Both splits must be present.
inline MetricsRow evaluate_predictions(const std::vector<std::size_t>& predicted,
                                       const std::vector<std::size_t>& truth,
                                       std::size_t base_classes,
                                       std::size_t novel_classes,
                                       std::size_t task = 0) {
    if (base_classes == 0 || novel_classes == 0) {
        throw std::invalid_argument("evaluate_predictions: need at least one base and one novel class");
    }
    if (predicted.size() != truth.size()) {
        throw std::invalid_argument("evaluate_predictions: " + std::to_string(predicted.size()) +
                                    " predictions vs " + std::to_string(truth.size()) + " labels");
    }
    const std::size_t total_classes = base_classes + novel_classes;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i] >= total_classes || truth[i] >= total_classes) {
            throw std::invalid_argument("evaluate_predictions: label out of range at sample " +
                                        std::to_string(i));
        }
    }

    MetricsRow row;
    row.task = task;
    row.class_counts.assign(total_classes, 0);
    for (std::size_t t : truth) ++row.class_counts[t];

    // Co-occurrence between predicted novel ids and hidden novel ids.
    std::vector<std::vector<double>> count(novel_classes, std::vector<double>(novel_classes, 0.0));
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (truth[i] < base_classes) {
            ++row.old_total;
            if (predicted[i] == truth[i]) ++row.old_correct;
        } else {
            ++row.new_total;
            if (predicted[i] >= base_classes) {
                count[predicted[i] - base_classes][truth[i] - base_classes] += 1.0;
            }
        }
    }
    if (row.old_total == 0) throw std::invalid_argument("evaluate_predictions: empty old split");
    if (row.new_total == 0) throw std::invalid_argument("evaluate_predictions: empty new split");

    double max_count = 0.0;
    for (const auto& r : count)
        for (double v : r) max_count = std::max(max_count, v);
    std::vector<std::vector<double>> cost(novel_classes, std::vector<double>(novel_classes));
    for (std::size_t i = 0; i < novel_classes; ++i)
        for (std::size_t j = 0; j < novel_classes; ++j) cost[i][j] = max_count - count[i][j];
    const auto assignment = hungarian_assign(cost);

    // Re-map novel predictions through the assignment, then score the union
    // task-agnostically; base predictions pass through unchanged.
    std::size_t all_correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        std::size_t remapped = predicted[i];
        if (remapped >= base_classes) {
            remapped = base_classes + assignment.mapping[remapped - base_classes];
        }
        if (remapped == truth[i]) {
            ++all_correct;
            if (truth[i] >= base_classes) ++row.new_correct;
        }
    }
    row.old_acc = static_cast<double>(row.old_correct) / static_cast<double>(row.old_total);
    row.new_acc = static_cast<double>(row.new_correct) / static_cast<double>(row.new_total);
    row.all_acc = static_cast<double>(all_correct) / static_cast<double>(predicted.size());
    return row;
}

/// Largest absolute activation per sample over an (n, ...) feature tensor.
template <typename T>
std::vector<double> max_abs_per_sample(const Tensor<T>& features) {
    if (features.shape.empty() || features.shape[0] == 0) {
        throw std::invalid_argument("max_abs_per_sample: empty feature tensor");
    }
    const std::size_t n = features.shape[0];
    const std::size_t stride = features.data.size() / n;
    if (stride == 0) throw std::invalid_argument("max_abs_per_sample: zero-width samples");
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < stride; ++k) {
            out[i] = std::max(out[i], std::abs(static_cast<double>(features.data[i * stride + k])));
        }
    }
    return out;
}

/// Per-branch distribution of per-sample max activation magnitudes on a
/// shared set of inputs: raw values, means, and histograms over shared
/// equal-width bins starting at zero.
struct MagnitudeSummary {
    std::vector<double> base_max;
    std::vector<double> novel_max;
    double base_mean = 0.0;
    double novel_mean = 0.0;
    double bin_width = 0.0;
    std::vector<std::size_t> base_hist;
    std::vector<std::size_t> novel_hist;
};

inline MagnitudeSummary summarize_magnitudes(std::vector<double> base_max,
                                             std::vector<double> novel_max,
                                             std::size_t bins = 20) {
    if (base_max.empty() || base_max.size() != novel_max.size()) {
        throw std::invalid_argument("summarize_magnitudes: branch magnitude lists must be non-empty and equal-sized");
    }
    if (bins == 0) throw std::invalid_argument("summarize_magnitudes: need at least one bin");
    MagnitudeSummary s;
    s.base_max = std::move(base_max);
    s.novel_max = std::move(novel_max);
    double hi = 0.0;
    for (double v : s.base_max) {
        if (!(v >= 0.0)) throw std::invalid_argument("summarize_magnitudes: negative or non-finite magnitude");
        s.base_mean += v;
        hi = std::max(hi, v);
    }
    for (double v : s.novel_max) {
        if (!(v >= 0.0)) throw std::invalid_argument("summarize_magnitudes: negative or non-finite magnitude");
        s.novel_mean += v;
        hi = std::max(hi, v);
    }
    const double n = static_cast<double>(s.base_max.size());
    s.base_mean /= n;
    s.novel_mean /= n;
    s.bin_width = hi > 0.0 ? hi / static_cast<double>(bins) : 1.0;
    s.base_hist.assign(bins, 0);
    s.novel_hist.assign(bins, 0);
    const auto bin_of = [&](double v) {
        const auto b = static_cast<std::size_t>(v / s.bin_width);
        return std::min(b, bins - 1);  // top edge folds into the last bin
    };
    for (double v : s.base_max) ++s.base_hist[bin_of(v)];
    for (double v : s.novel_max) ++s.novel_hist[bin_of(v)];
    return s;
}

enum class ReportFormat { CSV, MD };

namespace detail {

inline std::string format_acc(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

}  // namespace detail

inline std::string render_report_csv(const MetricsReport& report) {
    std::string out = "task,old,new,all\n";
    for (const auto& row : report) {
        out += std::to_string(row.task) + ',' + detail::format_acc(row.old_acc) + ',' +
               detail::format_acc(row.new_acc) + ',' + detail::format_acc(row.all_acc) + '\n';
    }
    return out;
}

inline std::string render_report_md(const MetricsReport& report) {
    std::string out = "| task | old | new | all |\n|---:|---:|---:|---:|\n";
    for (const auto& row : report) {
        out += "| " + std::to_string(row.task) + " | " + detail::format_acc(row.old_acc) + " | " +
               detail::format_acc(row.new_acc) + " | " + detail::format_acc(row.all_acc) + " |\n";
    }
    return out;
}

inline void emit_report(const MetricsReport& report, const std::string& path, ReportFormat format) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("emit_report: cannot open " + path);
    out << (format == ReportFormat::CSV ? render_report_csv(report) : render_report_md(report));
    if (!out) throw std::runtime_error("emit_report: write failed for " + path);
}

/// Reads back a CSV produced by emit_report. Only the task index and the
/// three accuracy columns survive the round trip; counts are not serialized.
inline MetricsReport parse_report_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("parse_report_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "task,old,new,all") {
        throw std::runtime_error("parse_report_csv: bad header in " + path);
    }
    MetricsReport report;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        MetricsRow row;
        char sep = 0;
        if (!(fields >> row.task >> sep) || sep != ',' || !(fields >> row.old_acc >> sep) ||
            sep != ',' || !(fields >> row.new_acc >> sep) || sep != ',' || !(fields >> row.all_acc)) {
            throw std::runtime_error("parse_report_csv: bad row '" + line + "' in " + path);
        }
        report.push_back(row);
    }
    return report;
}

/// Histogram CSV for magnitude summaries: one row per bin with both branch
/// counts. Means are part of MagnitudeSummary and stay in-process.
inline void emit_magnitude_csv(const MagnitudeSummary& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("emit_magnitude_csv: cannot open " + path);
    out << "bin_lo,bin_hi,base_count,novel_count\n";
    for (std::size_t b = 0; b < s.base_hist.size(); ++b) {
        out << detail::format_acc(s.bin_width * static_cast<double>(b)) << ','
            << detail::format_acc(s.bin_width * static_cast<double>(b + 1)) << ','
            << s.base_hist[b] << ',' << s.novel_hist[b] << '\n';
    }
    if (!out) throw std::runtime_error("emit_magnitude_csv: write failed for " + path);
}

}  // namespace adm
