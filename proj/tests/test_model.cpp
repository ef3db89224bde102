#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <vector>

#include "adm/model.hpp"
#include "adm/ops.hpp"
#include "adm/rng.hpp"

using adm::MergeMode;
using adm::Tensorf;

namespace {

Tensorf random_input(adm::Rng& rng, std::size_t n, std::size_t c, std::size_t s, double scale = 3.0) {
    Tensorf x({n, c, s, s});
    rng.fill_normal(x, 0.0, scale);
    return x;
}

adm::BaseModel small_base_model(std::uint64_t seed, std::size_t dims = 3,
                                std::vector<std::size_t> widths = {4, 6},
                                std::size_t classes = 4) {
    adm::Rng rng(seed);
    auto net = adm::make_trainable_net(dims, widths, rng);
    // Push the running statistics away from the identity so folding is
    // non-trivial, exactly as a real pretraining loop would.
    for (int i = 0; i < 3; ++i) {
        auto x = adm::Var<float>::constant(random_input(rng, 6, dims, 4));
        net.features(x, true);
    }
    Tensorf head_w({classes, widths.back()}), head_b({classes});
    rng.fill_normal(head_w, 0.0, 0.5);
    rng.fill_normal(head_b, 0.0, 0.1);

    Tensorf feats({8, widths.back()});
    rng.fill_normal(feats, 0.0, 1.0);
    std::vector<std::size_t> labels(8);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % classes;
    auto store = adm::compute_prototypes(feats, labels, classes);
    return adm::fold_backbone(net, head_w, head_b, store);
}

}  // namespace

TEST_CASE("model: sgd momentum follows the classical update", "[model]") {
    auto p = adm::Var<float>::leaf(Tensorf({1}, 1.0f), true);
    adm::SgdMomentum opt;
    opt.lr = 0.1;
    opt.momentum = 0.9;

    p.node()->grad = Tensorf({1}, 0.5f);
    opt.step({p});
    REQUIRE(p.value().data[0] == Catch::Approx(0.95).margin(1e-7));  // v = 0.5

    p.node()->grad = Tensorf({1}, 0.5f);
    opt.step({p});
    REQUIRE(p.value().data[0] == Catch::Approx(0.855).margin(1e-7));  // v = 0.95

    // No fresh gradient: velocity decays but still moves the weight.
    opt.step({p});
    REQUIRE(p.value().data[0] == Catch::Approx(0.855 - 0.1 * 0.9 * 0.95).margin(1e-6));

    auto q = adm::Var<float>::leaf(Tensorf({1}, 0.0f), true);
    REQUIRE_THROWS_AS(opt.step({p, q}), std::invalid_argument);
}

TEST_CASE("model: weight decay adds the L2 pull before momentum", "[model]") {
    auto p = adm::Var<float>::leaf(Tensorf({1}, 2.0f), true);
    adm::SgdMomentum opt;
    opt.lr = 0.1;
    opt.momentum = 0.9;
    opt.weight_decay = 0.5;

    p.node()->grad = Tensorf({1}, 0.3f);
    opt.step({p});
    // v = 0.3 + 0.5 * 2.0 = 1.3, w = 2.0 - 0.13
    REQUIRE(p.value().data[0] == Catch::Approx(1.87).margin(1e-7));

    // No fresh gradient: decay alone keeps shrinking the weight.
    opt.step({p});
    // v = 0.9 * 1.3 + 0.5 * 1.87 = 2.105, w = 1.87 - 0.2105
    REQUIRE(p.value().data[0] == Catch::Approx(1.6595).margin(1e-6));
}

TEST_CASE("model: gradients are dropped after each optimizer step", "[model]") {
    auto p = adm::Var<float>::leaf(Tensorf({2}, 2.0f), true);
    adm::SgdMomentum opt;
    p.node()->grad = Tensorf({2}, 1.0f);
    opt.step({p});
    REQUIRE(p.node()->grad.data.empty());

    p.node()->grad = Tensorf({2}, 1.0f);
    adm::zero_grads({p});
    REQUIRE(p.node()->grad.data.empty());
}

TEST_CASE("model: fresh backbone geometry and initialization", "[model]") {
    adm::Rng rng(61);
    auto net = adm::make_trainable_net(3, {4, 6}, rng);
    REQUIRE(net.blocks.size() == 2);
    REQUIRE(net.blocks[0].spec == adm::ConvSpec{3, 4, 3, 3, 1, 1});
    REQUIRE(net.blocks[1].spec == adm::ConvSpec{4, 6, 3, 3, 1, 1});
    REQUIRE(net.parameters().size() == 6);
    for (const auto& b : net.blocks) {
        for (float g : b.gamma.value().data) REQUIRE(g == 1.0f);
        for (float v : b.beta.value().data) REQUIRE(v == 0.0f);
        for (float v : b.running_mean) REQUIRE(v == 0.0f);
        for (float v : b.running_var) REQUIRE(v == 1.0f);
    }

    adm::Rng rng_again(61);
    auto net_again = adm::make_trainable_net(3, {4, 6}, rng_again);
    REQUIRE(net.blocks[0].kernel.value().data == net_again.blocks[0].kernel.value().data);

    REQUIRE_THROWS_AS(adm::make_trainable_net(0, {4}, rng), std::invalid_argument);
    REQUIRE_THROWS_AS(adm::make_trainable_net(3, {}, rng), std::invalid_argument);
    REQUIRE_THROWS_AS(adm::make_trainable_net(3, {4, 0}, rng), std::invalid_argument);
}

TEST_CASE("model: folded stack reproduces the inference-mode backbone", "[model]") {
    adm::Rng rng(62);
    auto net = adm::make_trainable_net(3, {4, 6}, rng);
    for (int i = 0; i < 3; ++i) {
        auto x = adm::Var<float>::constant(random_input(rng, 6, 3, 4));
        net.features(x, true);
    }
    Tensorf head_w({2, 6}), head_b({2});
    rng.fill_normal(head_w, 0.0, 0.5);
    auto model = adm::fold_backbone(net, head_w, head_b, {});

    // Reference: per block CONV -> BN with running stats -> ReLU, then pool.
    const auto x = random_input(rng, 5, 3, 4);
    Tensorf h = x;
    for (const auto& unit : net.units()) {
        const std::vector<float> bias(unit.spec.out_channels, 0.0f);
        h = adm::relu(adm::batchnorm_infer(adm::conv2d(h, unit.kernel, bias, unit.spec), unit.bn));
    }
    const Tensorf expected = adm::global_avg_pool(h);
    const Tensorf got = adm::base_features(model, x);
    REQUIRE(got.shape == expected.shape);
    for (std::size_t k = 0; k < got.data.size(); ++k) {
        REQUIRE(std::abs(got.data[k] - expected.data[k]) < 1e-5);
    }

    // The scale vectors recorded pre-fold are the blocks' BN gammas.
    REQUIRE(model.gate_gamma[0] == net.blocks[0].gamma.value().data);
    REQUIRE(model.gate_gamma[1] == net.blocks[1].gamma.value().data);
}

TEST_CASE("model: backbone parameter bookkeeping", "[model]") {
    const auto model = small_base_model(63);
    // layer0: 4*3*3*3 kernel + 4 bias; layer1: 6*4*3*3 + 6.
    REQUIRE(adm::backbone_parameter_count(model) == (108 + 4) + (216 + 6));
    REQUIRE(model.classes() == 4);
    REQUIRE(model.feature_dim() == 6);
}

TEST_CASE("model: expansion mirrors base geometry and starts near the base", "[model]") {
    const auto base = small_base_model(64);
    adm::Rng rng(65);
    auto expanded = adm::expand_model(base, 3, MergeMode::AMM, rng);

    REQUIRE(expanded.layers.size() == base.layers.size());
    REQUIRE(expanded.novel.size() == base.layers.size());
    for (std::size_t i = 0; i < base.layers.size(); ++i) {
        REQUIRE(expanded.layers[i].novel.spec == base.layers[i].spec);
        REQUIRE(expanded.layers[i].gate_gamma == base.gate_gamma[i]);
    }
    REQUIRE(expanded.head_base_w.value().data == base.head_w.data);
    REQUIRE(expanded.head_base_b.value().data == base.head_b.data);
    REQUIRE(expanded.head_novel_w.value().shape == std::vector<std::size_t>{3, 6});
    for (float v : expanded.head_novel_w.value().data) REQUIRE(std::abs(v) < 0.05f);
    REQUIRE(expanded.trainable_parameters().size() == base.layers.size() * 3 + 8);

    REQUIRE_THROWS_AS(adm::expand_model(base, 0, MergeMode::AMM, rng), std::invalid_argument);

    adm::Rng rng_a(66), rng_b(66);
    auto ea = adm::expand_model(base, 3, MergeMode::AMM, rng_a);
    auto eb = adm::expand_model(base, 3, MergeMode::AMM, rng_b);
    REQUIRE(ea.novel[0].kernel.value().data == eb.novel[0].kernel.value().data);
}

TEST_CASE("model: channel gate halves the novel contribution at zero gamma", "[model]") {
    // Single-layer nets so the per-channel gate acts exactly on the pooled
    // features: contribution(AMM, gamma=0) = 0.5 * contribution(IMM).
    adm::Rng rng(67);
    auto base = small_base_model(67, 3, {4}, 2);
    for (auto& g : base.gate_gamma[0]) g = 0.0f;

    adm::Rng rng_a(68), rng_b(68);
    auto amm = adm::expand_model(base, 2, MergeMode::AMM, rng_a);
    auto imm = adm::expand_model(base, 2, MergeMode::IMM, rng_b);
    const auto x = random_input(rng, 5, 3, 4);
    const Tensorf fb = adm::base_features(base, x);
    const Tensorf fa = adm::expanded_features_infer(amm, x);
    const Tensorf fi = adm::expanded_features_infer(imm, x);
    // ReLU after the single layer breaks exact halving at the feature level,
    // so compare pre-activation branch outputs via the magnitude helper path:
    // combined - base before the nonlinearity.
    const Tensorf base_out = base.layers[0].forward(x);
    adm::sync_novel(amm);
    adm::sync_novel(imm);
    const Tensorf amm_out = adm::amm_forward(x, amm.layers[0]);
    const Tensorf imm_out = adm::imm_forward(x, imm.layers[0]);
    for (std::size_t k = 0; k < base_out.data.size(); ++k) {
        const float ca = amm_out.data[k] - base_out.data[k];
        const float ci = imm_out.data[k] - base_out.data[k];
        REQUIRE(std::abs(ca - 0.5f * ci) < 1e-6f);
    }
    // With non-negative gate parameters the expanded model stays within half
    // a novel-branch output of the base model.
    REQUIRE(fa.shape == fb.shape);
    REQUIRE(fi.shape == fb.shape);
}

TEST_CASE("model: syncing live parameters changes the inference forward", "[model]") {
    const auto base = small_base_model(69);
    adm::Rng rng(70);
    auto expanded = adm::expand_model(base, 2, MergeMode::IMM, rng);
    const auto x = random_input(rng, 4, 3, 4);
    const Tensorf before = adm::expanded_features_infer(expanded, x);
    for (auto& v : expanded.novel[0].kernel.node()->value.data) v += 0.5f;
    const Tensorf after = adm::expanded_features_infer(expanded, x);
    REQUIRE(before.data != after.data);
}

TEST_CASE("model: joint logits concatenate base and novel columns", "[model]") {
    const auto base = small_base_model(71);
    adm::Rng rng(72);
    auto expanded = adm::expand_model(base, 3, MergeMode::AMM, rng);
    const auto x = random_input(rng, 4, 3, 4);
    const Tensorf logits = adm::expanded_joint_logits(expanded, x);
    REQUIRE(logits.shape == std::vector<std::size_t>{4, 7});

    const Tensorf feats = adm::expanded_features_infer(expanded, x);
    const Tensorf base_part = adm::linear(
        feats, base.head_w, std::vector<float>(base.head_b.data.begin(), base.head_b.data.end()));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) REQUIRE(logits.at2(i, j) == base_part.at2(i, j));
}

TEST_CASE("model: projection keeps the feature width", "[model]") {
    const auto base = small_base_model(73);
    adm::Rng rng(74);
    auto expanded = adm::expand_model(base, 2, MergeMode::AMM, rng);
    const auto x = random_input(rng, 4, 3, 4);
    auto feats = adm::expanded_features_train(expanded, x, false);
    auto proj = adm::project_features(expanded, feats);
    REQUIRE(proj.value().shape == std::vector<std::size_t>{4, 6});
}

TEST_CASE("model: magnitude report separates the branches", "[model]") {
    // Single-layer base so both modes feed the final layer the same input
    // and the per-branch comparison is exact.
    const auto base = small_base_model(75, 3, {4}, 2);
    adm::Rng rng(76);
    auto expanded = adm::expand_model(base, 2, MergeMode::IMM, rng);
    const auto x = random_input(rng, 6, 3, 4);

    SECTION("silent novel branch reports zero magnitudes") {
        for (auto& b : expanded.novel) {
            for (auto& v : b.kernel.node()->value.data) v = 0.0f;
            for (auto& v : b.beta.node()->value.data) v = 0.0f;
        }
        const auto report = adm::magnitude_report(expanded, x);
        REQUIRE(report.novel_mean == 0.0);
        for (double v : report.novel_max) REQUIRE(v == 0.0);
        REQUIRE(report.base_mean > 0.0);
    }

    SECTION("a strong channel gate suppresses the novel contribution") {
        adm::Rng rng_b(76);
        auto gated = adm::expand_model(base, 2, MergeMode::AMM, rng_b);
        for (auto& layer : gated.layers) {
            for (auto& g : layer.gate_gamma) g = 5.0f;  // gate ~ 6.7e-3
        }
        // Make both novel branches loud enough to measure.
        for (std::size_t i = 0; i < expanded.novel.size(); ++i) {
            for (auto& v : expanded.novel[i].kernel.node()->value.data) v *= 50.0f;
            gated.novel[i].kernel.node()->value = expanded.novel[i].kernel.value();
        }
        const auto loud = adm::magnitude_report(expanded, x);
        const auto quiet = adm::magnitude_report(gated, x);
        REQUIRE(quiet.novel_mean < loud.novel_mean);
        REQUIRE(quiet.base_mean == loud.base_mean);
    }

    SECTION("merged models are rejected") {
        expanded.merged = true;
        REQUIRE_THROWS_AS(adm::magnitude_report(expanded, x), std::invalid_argument);
    }
}
