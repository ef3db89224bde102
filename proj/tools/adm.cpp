// Command-line harness around the library. The subcommands mirror the
// pipeline stages:
//
//   pretrain     supervised base task only; writes base.ckpt
//   run          full protocol (pretrain, then expand/train/merge/evaluate
//                per novel task); writes final.ckpt plus CSV/MD reports
//   eval         scores a saved checkpoint against the stream its config
//                describes; writes eval.csv / eval.md
//   merge-check  randomized losslessness probe for the selected merge mode
//                (for aff the expected outcome is the documented refusal)
//
// Every stream is synthesized deterministically from (config, seed), so a
// rerun with the same flags reproduces every file byte for byte.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "adm/checkpoint.hpp"
#include "adm/config.hpp"
#include "adm/data.hpp"
#include "adm/metrics.hpp"
#include "adm/model.hpp"
#include "adm/pipeline.hpp"
#include "adm/reparam.hpp"
#include "adm/rng.hpp"
#include "adm/tensor.hpp"

namespace {

using adm::MergeMode;
using adm::Rng;
using adm::Tensorf;

/// Flags shared by every subcommand. `--seed` and `--mode` override the
/// config only when actually given, so a config file stays authoritative.
struct Options {
    std::string config_path;
    std::string out_dir = ".";
    std::uint64_t seed = 0;
    std::string mode;
    CLI::Option* seed_flag = nullptr;
};

void attach_common_flags(CLI::App& cmd, Options& opt) {
    cmd.add_option("--config", opt.config_path,
                   "experiment configuration file (key = value lines)")
        ->check(CLI::ExistingFile);
    opt.seed_flag = cmd.add_option("--seed", opt.seed, "override the config seed");
    cmd.add_option("--out", opt.out_dir,
                   "directory for checkpoints and reports (created if missing)");
    cmd.add_option("--mode", opt.mode, "override the merge mode")
        ->check(CLI::IsMember({"imm", "aff", "amm"}));
}

adm::ExperimentConfig resolve_config(const Options& opt) {
    adm::ExperimentConfig cfg =
        opt.config_path.empty() ? adm::ExperimentConfig{} : adm::load_config(opt.config_path);
    if (opt.seed_flag != nullptr && opt.seed_flag->count() > 0) cfg.seed = opt.seed;
    if (!opt.mode.empty()) cfg.merge_mode = adm::parse_merge_mode(opt.mode);
    cfg.validate();
    return cfg;
}

std::string out_path(const Options& opt, const std::string& name) {
    std::filesystem::create_directories(opt.out_dir);
    return (std::filesystem::path(opt.out_dir) / name).string();
}

double plain_accuracy(const std::vector<std::size_t>& preds,
                      const std::vector<std::size_t>& labels) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i];
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------
// pretrain: supervised base task, nothing else
// ---------------------------------------------------------------------------

int cmd_pretrain(const Options& opt) {
    const adm::ExperimentConfig cfg = resolve_config(opt);
    const adm::TaskStream stream = adm::make_synthetic_stream(cfg);
    const adm::BaseModel model = adm::pretrain_base(cfg, stream.base);

    const double acc =
        plain_accuracy(adm::predict(adm::base_logits(model, stream.base.inputs)),
                       stream.base.labels);
    const std::string path = out_path(opt, "base.ckpt");
    adm::save_checkpoint({model, 0, adm::config_hash(cfg)}, path);
    std::printf("pretrained %zu base classes in %zu steps: accuracy %.4f on %zu labeled samples\n",
                cfg.base_classes(), cfg.pretrain_steps, acc, stream.base.size());
    std::printf("checkpoint -> %s\n", path.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// run: the full discover-and-merge protocol
// ---------------------------------------------------------------------------

int cmd_run(const Options& opt) {
    const adm::ExperimentConfig cfg = resolve_config(opt);
    const adm::TaskStream stream = adm::make_synthetic_stream(cfg);
    const adm::ExperimentResult result = adm::run_experiment(cfg, stream);

    for (const auto& task : result.tasks) {
        const adm::MetricsRow& row = task.post_merge;
        std::printf(
            "task %zu: old %.4f  new %.4f  all %.4f  (%zu old + %zu new samples; "
            "old drift at merge %.4f pp)\n",
            row.task, row.old_acc, row.new_acc, row.all_acc, row.old_total, row.new_total,
            std::abs(row.old_acc - task.pre_merge.old_acc) * 100.0);
    }

    const std::string csv = out_path(opt, "report.csv");
    const std::string md = out_path(opt, "report.md");
    adm::emit_report(result.report, csv, adm::ReportFormat::CSV);
    adm::emit_report(result.report, md, adm::ReportFormat::MD);
    const std::string ckpt = out_path(opt, "final.ckpt");
    adm::save_checkpoint({result.model, cfg.novel_tasks(), adm::config_hash(cfg)}, ckpt);
    std::printf("report -> %s, %s\n", csv.c_str(), md.c_str());
    std::printf("checkpoint -> %s\n", ckpt.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// eval: score a checkpoint against the stream its config describes
// ---------------------------------------------------------------------------

std::string resolve_checkpoint(const Options& opt, const std::string& given) {
    if (!given.empty()) return given;
    for (const char* name : {"final.ckpt", "base.ckpt"}) {
        const std::string candidate = (std::filesystem::path(opt.out_dir) / name).string();
        if (std::filesystem::exists(candidate)) return candidate;
    }
    throw std::runtime_error("eval: no checkpoint argument and neither final.ckpt nor base.ckpt "
                             "exists in " + opt.out_dir);
}

int cmd_eval(const Options& opt, const std::string& ckpt_arg) {
    const adm::ExperimentConfig cfg = resolve_config(opt);
    const std::string path = resolve_checkpoint(opt, ckpt_arg);
    const adm::Checkpoint ckpt = adm::load_checkpoint(path, adm::config_hash(cfg));
    const adm::TaskStream stream = adm::make_synthetic_stream(cfg);

    if (ckpt.task_cursor == 0) {
        // Nothing discovered yet; the only meaningful number is base accuracy.
        const double acc =
            plain_accuracy(adm::predict(adm::base_logits(ckpt.model, stream.base.inputs)),
                           stream.base.labels);
        std::printf("%s: base-only checkpoint, accuracy %.4f on %zu labeled base samples\n",
                    path.c_str(), acc, stream.base.size());
        return 0;
    }
    if (ckpt.task_cursor >= stream.task_classes.size()) {
        throw std::runtime_error("eval: checkpoint sits after novel task " +
                                 std::to_string(ckpt.task_cursor) + " but the stream has only " +
                                 std::to_string(stream.task_classes.size() - 1) + " novel tasks");
    }

    const adm::MetricsRow row = adm::evaluate_merged(ckpt.model, stream, ckpt.task_cursor);
    std::printf("task %zu: old %.4f  new %.4f  all %.4f  (%zu old + %zu new samples)\n", row.task,
                row.old_acc, row.new_acc, row.all_acc, row.old_total, row.new_total);
    const adm::MetricsReport report{row};
    const std::string csv = out_path(opt, "eval.csv");
    const std::string md = out_path(opt, "eval.md");
    adm::emit_report(report, csv, adm::ReportFormat::CSV);
    adm::emit_report(report, md, adm::ReportFormat::MD);
    std::printf("report -> %s, %s\n", csv.c_str(), md.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// merge-check: randomized losslessness probe
// ---------------------------------------------------------------------------

Tensorf randn4(Rng& rng, std::size_t n, std::size_t c, std::size_t s) {
    Tensorf x({n, c, s, s});
    rng.fill_normal(x, 0.0, 1.0);
    return x;
}

double max_abs_diff(const Tensorf& a, const Tensorf& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
    }
    return worst;
}

/// Random CONV+BN unit kept at unit activation scale: kernels shrink with
/// the fan-in and the statistics stay moderate. The tolerance below is
/// absolute, so the probe must exercise O(1) outputs — wild activations
/// would measure float roundoff growth, not a real disagreement.
adm::ConvBNUnit<float> random_unit(Rng& rng, const adm::ConvSpec& spec) {
    const double fan_in = static_cast<double>(spec.in_channels * spec.kernel_h * spec.kernel_w);
    adm::ConvBNUnit<float> u;
    u.spec = spec;
    u.kernel = Tensorf(spec.kernel_shape());
    rng.fill_normal(u.kernel, 0.0, 1.0 / std::sqrt(fan_in));
    u.bn.gamma.resize(spec.out_channels);
    u.bn.beta.resize(spec.out_channels);
    u.bn.mean.resize(spec.out_channels);
    u.bn.var.resize(spec.out_channels);
    for (std::size_t c = 0; c < spec.out_channels; ++c) {
        u.bn.gamma[c] = static_cast<float>(rng.normal(0.0, 0.5));
        u.bn.beta[c] = static_cast<float>(rng.normal(0.0, 0.5));
        u.bn.mean[c] = static_cast<float>(rng.normal(0.0, 0.5));
        u.bn.var[c] = static_cast<float>(0.3 + std::abs(rng.normal(0.0, 0.7)));
    }
    return u;
}

adm::FoldedConv<float> random_folded(Rng& rng, const adm::ConvSpec& spec) {
    const double fan_in = static_cast<double>(spec.in_channels * spec.kernel_h * spec.kernel_w);
    adm::FoldedConv<float> f;
    f.spec = spec;
    f.kernel = Tensorf(spec.kernel_shape());
    rng.fill_normal(f.kernel, 0.0, 1.0 / std::sqrt(fan_in));
    f.bias.resize(spec.out_channels);
    for (auto& b : f.bias) b = static_cast<float>(rng.normal(0.0, 0.5));
    return f;
}

adm::DualBranchLayer<float> random_layer(Rng& rng, const adm::ConvSpec& spec, MergeMode mode) {
    adm::DualBranchLayer<float> layer;
    layer.base = random_folded(rng, spec);
    layer.novel = random_unit(rng, spec);
    layer.gate_gamma.resize(spec.out_channels);
    for (auto& g : layer.gate_gamma) g = static_cast<float>(rng.normal(0.0, 1.0));
    layer.mode = mode;
    return layer;
}

/// Random deployable model with the configured geometry; prototypes stay
/// empty, which is all the merge path needs.
adm::BaseModel random_base_model(Rng& rng, const adm::ExperimentConfig& cfg) {
    adm::BaseModel m;
    std::size_t in = cfg.input_dims;
    for (std::size_t width : cfg.conv_channels) {
        const adm::ConvSpec spec{in, width, 3, 3, 1, 1};
        m.layers.push_back(random_folded(rng, spec));
        std::vector<float> gate(width);
        for (auto& g : gate) g = static_cast<float>(rng.normal(0.0, 1.0));
        m.gate_gamma.push_back(std::move(gate));
        in = width;
    }
    const std::size_t d = cfg.feature_dim();
    m.head_w = Tensorf({cfg.base_classes(), d});
    rng.fill_normal(m.head_w, 0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    m.head_b = Tensorf({cfg.base_classes()}, 0.0f);
    m.validate();
    return m;
}

/// Replaces the near-zero novel initialization with branches and head
/// columns of visible magnitude, so the whole-model probe merges something
/// non-trivial. Running statistics stay at their identity values.
void randomize_novel(adm::ExpandedModel& em, Rng& rng) {
    for (auto& branch : em.novel) {
        Tensorf kernel(branch.kernel.value().shape);
        const double fan_in =
            static_cast<double>(kernel.shape[1] * kernel.shape[2] * kernel.shape[3]);
        rng.fill_normal(kernel, 0.0, 1.0 / std::sqrt(fan_in));
        Tensorf gamma(branch.gamma.value().shape);
        rng.fill_normal(gamma, 0.0, 0.5);
        Tensorf beta(branch.beta.value().shape);
        rng.fill_normal(beta, 0.0, 0.5);
        branch.kernel = adm::Var<float>::leaf(std::move(kernel), true);
        branch.gamma = adm::Var<float>::leaf(std::move(gamma), true);
        branch.beta = adm::Var<float>::leaf(std::move(beta), true);
    }
    Tensorf novel_w(em.head_novel_w.value().shape);
    rng.fill_normal(novel_w, 0.0, 0.5);
    Tensorf novel_b(em.head_novel_b.value().shape);
    rng.fill_normal(novel_b, 0.0, 0.5);
    em.head_novel_w = adm::Var<float>::leaf(std::move(novel_w), true);
    em.head_novel_b = adm::Var<float>::leaf(std::move(novel_b), true);
}

int cmd_merge_check(const Options& opt) {
    const adm::ExperimentConfig cfg = resolve_config(opt);
    const char* mode = adm::merge_mode_name(cfg.merge_mode);
    constexpr double kTol = 1e-5;
    Rng rng(cfg.seed);

    if (cfg.merge_mode == MergeMode::AFF) {
        // The contract for feature-gated branches is the refusal itself.
        const adm::ConvSpec spec{cfg.input_dims, cfg.conv_channels[0], 3, 3, 1, 1};
        const adm::DualBranchLayer<float> layer = random_layer(rng, spec, MergeMode::AFF);
        try {
            adm::merge_layer(layer);
        } catch (const std::invalid_argument& e) {
            std::printf("merge-check (aff): refused as designed: %s\n", e.what());
            std::printf("merge-check (aff): OK\n");
            return 0;
        }
        std::printf("merge-check (aff): FAIL - a feature-gated layer was merged, but its gate "
                    "depends on the input\n");
        return 1;
    }

    // Layer-level probe over the configured channel chain.
    double worst_layer = 0.0;
    std::size_t layers_checked = 0;
    std::size_t in = cfg.input_dims;
    for (std::size_t width : cfg.conv_channels) {
        const adm::ConvSpec spec{in, width, 3, 3, 1, 1};
        for (int rep = 0; rep < 25; ++rep) {
            const adm::DualBranchLayer<float> layer = random_layer(rng, spec, cfg.merge_mode);
            const adm::MergedLayer<float> merged = adm::merge_layer(layer);
            const Tensorf x = randn4(rng, 20, in, cfg.input_size);
            const Tensorf dual = cfg.merge_mode == MergeMode::IMM ? adm::imm_forward(x, layer)
                                                                  : adm::amm_forward(x, layer);
            worst_layer = std::max(worst_layer, max_abs_diff(merged.folded.forward(x), dual));
            ++layers_checked;
        }
        in = width;
    }

    // An all-zero novel branch must merge into the base without changing a bit.
    bool identity_ok = false;
    {
        const adm::ConvSpec spec{cfg.input_dims, cfg.conv_channels[0], 3, 3, 1, 1};
        adm::DualBranchLayer<float> layer = random_layer(rng, spec, cfg.merge_mode);
        layer.novel.kernel = Tensorf(spec.kernel_shape(), 0.0f);
        std::fill(layer.novel.bn.gamma.begin(), layer.novel.bn.gamma.end(), 0.0f);
        std::fill(layer.novel.bn.beta.begin(), layer.novel.bn.beta.end(), 0.0f);
        const adm::MergedLayer<float> merged = adm::merge_layer(layer);
        identity_ok = merged.folded.kernel.data == layer.base.kernel.data &&
                      merged.folded.bias == layer.base.bias &&
                      merged.gate_gamma == layer.gate_gamma;
    }

    // Whole-model probe: expand the configured geometry, randomize the novel
    // side, and compare joint-head logits against the merged model.
    const adm::BaseModel base = random_base_model(rng, cfg);
    const std::size_t novel_classes = cfg.novel_tasks() > 0 ? cfg.task_classes[1] : 2;
    adm::ExpandedModel em = adm::expand_model(base, novel_classes, cfg.merge_mode, rng);
    randomize_novel(em, rng);
    const Tensorf probe = randn4(rng, 50, cfg.input_dims, cfg.input_size);
    const Tensorf before = adm::expanded_joint_logits(em, probe);
    const adm::BaseModel merged_model = adm::merge_task(em);
    const double worst_model = max_abs_diff(adm::base_logits(merged_model, probe), before);

    const bool pass = worst_layer <= kTol && worst_model <= kTol && identity_ok;
    std::printf("merge-check (%s): %zu random layers, max |merged - dual| = %.2e (tol %.0e)\n",
                mode, layers_checked, worst_layer, kTol);
    std::printf("merge-check (%s): zero novel branch leaves the layer %s\n", mode,
                identity_ok ? "bit-identical" : "CHANGED");
    std::printf("merge-check (%s): expand->merge joint-logit drift = %.2e on %zu inputs (tol %.0e)\n",
                mode, worst_model, probe.shape[0], kTol);
    std::printf("merge-check (%s): %s\n", mode, pass ? "OK" : "FAIL");
    return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptive discovery and merging of novel classes on synthetic task streams"};
    app.require_subcommand(1);

    int rc = 0;
    Options pre_opt, run_opt, eval_opt, check_opt;
    std::string eval_ckpt;

    CLI::App* pre = app.add_subcommand("pretrain", "train and fold the base model");
    attach_common_flags(*pre, pre_opt);
    pre->callback([&] { rc = cmd_pretrain(pre_opt); });

    CLI::App* run = app.add_subcommand("run", "full pretrain/expand/train/merge/evaluate protocol");
    attach_common_flags(*run, run_opt);
    run->callback([&] { rc = cmd_run(run_opt); });

    CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on its config's task stream");
    attach_common_flags(*eval, eval_opt);
    eval->add_option("checkpoint", eval_ckpt,
                     "checkpoint file (default: final.ckpt, then base.ckpt, in --out)")
        ->check(CLI::ExistingFile);
    eval->callback([&] { rc = cmd_eval(eval_opt, eval_ckpt); });

    CLI::App* check = app.add_subcommand("merge-check", "randomized merge losslessness probe");
    attach_common_flags(*check, check_opt);
    check->callback([&] { rc = cmd_merge_check(check_opt); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "adm: %s\n", e.what());
        return 1;
    }
    return rc;
}
