#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adm/reparam.hpp"

namespace adm {

/// Experiment knobs, one flat namespace mapped 1:1 onto `key = value` lines.
/// Defaults reproduce the desk-scale reference setup; anything not listed
/// here is rejected by the parser.
struct ExperimentConfig {
    // Architecture.
    std::size_t input_dims = 8;                        // input channels
    std::size_t input_size = 4;                        // spatial height = width
    std::vector<std::size_t> conv_channels = {8, 16, 32};

    // Task structure: entry 0 is the labeled base task, the rest are
    // unlabeled novel tasks with disjoint class ids.
    std::vector<std::size_t> task_classes = {5, 5};
    std::size_t samples_per_class = 200;
    double separation = 10.0;
    double noise_sigma = 0.1;    // view noise, in units of per-dimension std
    double mask_fraction = 0.2;  // view coordinate dropout probability

    // Optimizer.
    double pretrain_lr = 0.1;
    double novel_lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::size_t pretrain_steps = 300;
    std::size_t novel_steps = 200;
    std::size_t batch_size = 64;

    // Losses.
    double tau_u = 0.5;
    std::size_t ramp_length = 50;
    double margin = 1.0;
    bool hinge = false;
    double w_kd = 1.0;
    double w_contrastive = 1.0;
    double w_replay = 1.0;
    double w_triplet = 1.0;
    double w_prob_reg = 1.0;
    double w_self = 1.0;
    std::size_t replay_per_class = 8;

    // Run.
    std::uint64_t seed = 0;
    MergeMode merge_mode = MergeMode::AMM;

    std::size_t base_classes() const { return task_classes.empty() ? 0 : task_classes[0]; }
    std::size_t novel_tasks() const { return task_classes.empty() ? 0 : task_classes.size() - 1; }
    std::size_t total_classes() const {
        std::size_t total = 0;
        for (std::size_t c : task_classes) total += c;
        return total;
    }
    std::size_t feature_dim() const { return conv_channels.empty() ? 0 : conv_channels.back(); }

    void validate() const {
        if (input_dims == 0 || input_size == 0) {
            throw std::invalid_argument("config: input_dims and input_size must be positive");
        }
        if (conv_channels.empty()) throw std::invalid_argument("config: conv_channels must be non-empty");
        for (std::size_t c : conv_channels) {
            if (c == 0) throw std::invalid_argument("config: conv channel widths must be positive");
        }
        if (task_classes.empty()) throw std::invalid_argument("config: task_classes must list the base task");
        for (std::size_t c : task_classes) {
            if (c == 0) throw std::invalid_argument("config: per-task class counts must be positive");
        }
        if (samples_per_class < 2) {
            throw std::invalid_argument("config: samples_per_class must be at least 2");
        }
        if (separation <= 0.0) throw std::invalid_argument("config: separation must be positive");
        if (noise_sigma < 0.0) throw std::invalid_argument("config: noise_sigma must be non-negative");
        if (mask_fraction < 0.0 || mask_fraction >= 1.0) {
            throw std::invalid_argument("config: mask_fraction must lie in [0, 1)");
        }
        if (pretrain_lr <= 0.0 || novel_lr <= 0.0) {
            throw std::invalid_argument("config: learning rates must be positive");
        }
        if (momentum < 0.0 || momentum >= 1.0) {
            throw std::invalid_argument("config: momentum must lie in [0, 1)");
        }
        if (weight_decay < 0.0) {
            throw std::invalid_argument("config: weight_decay must be non-negative");
        }
        if (batch_size < 3) {
            throw std::invalid_argument("config: batch_size must be at least 3 (triplet mining)");
        }
        if (tau_u <= 0.0) throw std::invalid_argument("config: tau_u must be positive");
        if (ramp_length == 0) throw std::invalid_argument("config: ramp_length must be positive");
        if (w_kd < 0 || w_contrastive < 0 || w_replay < 0 || w_triplet < 0 || w_prob_reg < 0 ||
            w_self < 0) {
            throw std::invalid_argument("config: loss weights must be non-negative");
        }
        if (replay_per_class == 0) {
            throw std::invalid_argument("config: replay_per_class must be positive");
        }
        if (merge_mode == MergeMode::AFF && novel_tasks() > 1) {
            throw std::invalid_argument(
                "config: AFF fuses features without a mergeable form, so it cannot chain "
                "multiple novel tasks");
        }
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad numeric value '" + value + "' for " + key);
    }
    if (used != value.size()) {
        throw std::invalid_argument("config: bad numeric value '" + value + "' for " + key);
    }
    return v;
}

inline std::uint64_t parse_unsigned(const std::string& key, const std::string& value) {
    const double v = parse_double(key, value);
    if (v < 0.0 || v != static_cast<double>(static_cast<std::uint64_t>(v))) {
        throw std::invalid_argument("config: " + key + " must be a non-negative integer, got '" +
                                    value + "'");
    }
    return static_cast<std::uint64_t>(v);
}

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& value) {
    std::vector<std::size_t> out;
    std::istringstream stream(value);
    std::string item;
    while (std::getline(stream, item, ',')) {
        out.push_back(static_cast<std::size_t>(parse_unsigned(key, trim(item))));
    }
    if (out.empty()) throw std::invalid_argument("config: empty list for " + key);
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "0" || value == "false") return false;
    if (value == "1" || value == "true") return true;
    throw std::invalid_argument("config: " + key + " must be 0/1/true/false, got '" + value + "'");
}

}  // namespace detail

/// Parses `key = value` lines into a config. `#` starts a comment; blank
/// lines are skipped; unknown keys are an error so typos cannot silently
/// fall back to defaults.
inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream lines(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(lines, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                        " is not 'key = value'");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                        " is missing a key or value");
        }

        if (key == "input_dims") cfg.input_dims = detail::parse_unsigned(key, value);
        else if (key == "input_size") cfg.input_size = detail::parse_unsigned(key, value);
        else if (key == "conv_channels") cfg.conv_channels = detail::parse_size_list(key, value);
        else if (key == "task_classes") cfg.task_classes = detail::parse_size_list(key, value);
        else if (key == "samples_per_class") cfg.samples_per_class = detail::parse_unsigned(key, value);
        else if (key == "separation") cfg.separation = detail::parse_double(key, value);
        else if (key == "noise_sigma") cfg.noise_sigma = detail::parse_double(key, value);
        else if (key == "mask_fraction") cfg.mask_fraction = detail::parse_double(key, value);
        else if (key == "pretrain_lr") cfg.pretrain_lr = detail::parse_double(key, value);
        else if (key == "novel_lr") cfg.novel_lr = detail::parse_double(key, value);
        else if (key == "momentum") cfg.momentum = detail::parse_double(key, value);
        else if (key == "weight_decay") cfg.weight_decay = detail::parse_double(key, value);
        else if (key == "pretrain_steps") cfg.pretrain_steps = detail::parse_unsigned(key, value);
        else if (key == "novel_steps") cfg.novel_steps = detail::parse_unsigned(key, value);
        else if (key == "batch_size") cfg.batch_size = detail::parse_unsigned(key, value);
        else if (key == "tau_u") cfg.tau_u = detail::parse_double(key, value);
        else if (key == "ramp_length") cfg.ramp_length = detail::parse_unsigned(key, value);
        else if (key == "margin") cfg.margin = detail::parse_double(key, value);
        else if (key == "hinge") cfg.hinge = detail::parse_bool(key, value);
        else if (key == "w_kd") cfg.w_kd = detail::parse_double(key, value);
        else if (key == "w_contrastive") cfg.w_contrastive = detail::parse_double(key, value);
        else if (key == "w_replay") cfg.w_replay = detail::parse_double(key, value);
        else if (key == "w_triplet") cfg.w_triplet = detail::parse_double(key, value);
        else if (key == "w_prob_reg") cfg.w_prob_reg = detail::parse_double(key, value);
        else if (key == "w_self") cfg.w_self = detail::parse_double(key, value);
        else if (key == "replay_per_class") cfg.replay_per_class = detail::parse_unsigned(key, value);
        else if (key == "seed") cfg.seed = detail::parse_unsigned(key, value);
        else if (key == "merge_mode") cfg.merge_mode = parse_merge_mode(value);
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config_text(buffer.str());
}

/// Stable 64-bit digest of the keys that define model geometry and task
/// structure — the parts a checkpoint must agree on to be loadable. Training
/// hyperparameters deliberately do not participate, so a checkpoint survives
/// e.g. a learning-rate change.
inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
    std::string canon = "input_dims=" + std::to_string(cfg.input_dims) +
                        ";input_size=" + std::to_string(cfg.input_size) + ";conv_channels=";
    for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
        if (i) canon += ',';
        canon += std::to_string(cfg.conv_channels[i]);
    }
    canon += ";task_classes=";
    for (std::size_t i = 0; i < cfg.task_classes.size(); ++i) {
        if (i) canon += ',';
        canon += std::to_string(cfg.task_classes[i]);
    }
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : canon) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace adm
