#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "adm/head.hpp"
#include "adm/losses.hpp"
#include "adm/prototypes.hpp"
#include "adm/rng.hpp"
#include "fd_check.hpp"

using adm::PrototypeStore;
using adm::Rng;
using adm::Tensor;
using adm::Tensord;
using adm::TripletIndices;
using Vd = adm::Var<double>;
using Vars = std::vector<Vd>;

namespace {

Tensord randn(Rng& rng, std::vector<std::size_t> shape, double stddev = 1.0) {
    Tensord t(std::move(shape));
    rng.fill_normal(t, 0.0, stddev);
    return t;
}

double value(const Vd& v) { return v.value().scalar(); }

}  // namespace

// ---------------------------------------------------------------------------
// Contrastive loss
// ---------------------------------------------------------------------------

TEST_CASE("contrastive loss on the two-row antipodal batch", "[losses]") {
    // Views: row 1 of each view is +e1, row 2 is -e1. Similarity matrix
    // [[1,-1],[-1,1]]; each row contributes -log(e / (e + 1/e)) = log(1+e^-2).
    auto z = Tensord::from_values({2, 2}, {1, 0, -1, 0});
    auto zh = Tensord::from_values({2, 2}, {1, 0, -1, 0});
    auto loss = adm::contrastive_loss(Vd::constant(z), Vd::constant(zh), 1.0);
    REQUIRE(value(loss) == Catch::Approx(0.12692801104297249).margin(1e-12));
}

TEST_CASE("contrastive loss with identical features is log batch size", "[losses]") {
    Tensord z({4, 3});
    for (std::size_t i = 0; i < 4; ++i) {
        z.at2(i, 0) = 0.6;
        z.at2(i, 1) = 0.8;
        z.at2(i, 2) = 0.0;
    }
    auto loss = adm::contrastive_loss(Vd::constant(z), Vd::constant(z), 0.5);
    REQUIRE(value(loss) == Catch::Approx(std::log(4.0)).margin(1e-12));
}

TEST_CASE("contrastive loss flattens to log batch size at huge temperature", "[losses]") {
    Rng rng(400);
    auto z = randn(rng, {5, 8});
    auto zh = randn(rng, {5, 8});
    auto loss = adm::contrastive_loss(Vd::constant(z), Vd::constant(zh), 1e8);
    REQUIRE(value(loss) == Catch::Approx(std::log(5.0)).margin(1e-6));
}

TEST_CASE("contrastive loss is non-negative and matches a direct oracle", "[losses]") {
    Rng rng(401);
    for (int rep = 0; rep < 5; ++rep) {
        auto z = randn(rng, {6, 4});
        auto zh = randn(rng, {6, 4});
        const double tau = 0.5;
        auto loss = adm::contrastive_loss(Vd::constant(z), Vd::constant(zh), tau);
        REQUIRE(value(loss) >= 0.0);

        // Long-double re-derivation straight from the definition.
        auto normalize = [](const Tensord& t) {
            Tensord out = t;
            for (std::size_t i = 0; i < t.shape[0]; ++i) {
                long double ss = 0.0L;
                for (std::size_t j = 0; j < t.shape[1]; ++j) ss += (long double)t.at2(i, j) * t.at2(i, j);
                const long double n = std::sqrt(ss);
                for (std::size_t j = 0; j < t.shape[1]; ++j) out.at2(i, j) = static_cast<double>(t.at2(i, j) / n);
            }
            return out;
        };
        auto zn = normalize(z), zo = normalize(zh);
        long double total = 0.0L;
        for (std::size_t i = 0; i < 6; ++i) {
            long double denom = 0.0L, pos = 0.0L;
            for (std::size_t j = 0; j < 6; ++j) {
                long double dot = 0.0L;
                for (std::size_t k = 0; k < 4; ++k) dot += (long double)zn.at2(i, k) * zo.at2(j, k);
                const long double e = std::exp(dot / tau);
                denom += e;
                if (j == i) pos = e;
            }
            total += -std::log(pos / denom);
        }
        REQUIRE(value(loss) == Catch::Approx(static_cast<double>(total / 6.0L)).margin(1e-10));
    }
}

TEST_CASE("contrastive loss gradient passes finite differences", "[losses]") {
    Rng rng(402);
    auto z = randn(rng, {4, 5});
    auto zh = randn(rng, {4, 5});
    auto r = adm_test::fd_check<double>(
        {z, zh}, [](Vars& v) { return adm::contrastive_loss(v[0], v[1], 0.5); }, 1e-6);
    REQUIRE(r.max_rel < 1e-6);
}

TEST_CASE("contrastive loss rejects tiny batches and bad temperatures", "[losses]") {
    auto one = Vd::constant(Tensord({1, 3}, 0.5));
    REQUIRE_THROWS_AS(adm::contrastive_loss(one, one, 0.5), std::invalid_argument);
    auto two = Vd::constant(Tensord({2, 3}, 0.5));
    REQUIRE_THROWS_AS(adm::contrastive_loss(two, two, 0.0), std::invalid_argument);
    auto other = Vd::constant(Tensord({2, 4}, 0.5));
    REQUIRE_THROWS_AS(adm::contrastive_loss(two, other, 0.5), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Drift (distillation) loss
// ---------------------------------------------------------------------------

TEST_CASE("drift loss is zero exactly on coincident features", "[losses]") {
    Rng rng(403);
    auto f = randn(rng, {5, 7});
    REQUIRE(value(adm::kd_loss(Vd::constant(f), Vd::constant(f))) == 0.0);
}

TEST_CASE("drift loss of a unit displacement is one", "[losses]") {
    Rng rng(404);
    auto f = randn(rng, {3, 4});
    Tensord g = f;
    for (std::size_t i = 0; i < 3; ++i) g.at2(i, 2) += 1.0;
    REQUIRE(value(adm::kd_loss(Vd::constant(f), Vd::constant(g))) == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("drift loss matches the per-row norm oracle and is symmetric", "[losses]") {
    Rng rng(405);
    auto a = randn(rng, {6, 5});
    auto b = randn(rng, {6, 5});
    long double want = 0.0L;
    for (std::size_t i = 0; i < 6; ++i) {
        long double ss = 0.0L;
        for (std::size_t j = 0; j < 5; ++j) {
            const long double d = (long double)a.at2(i, j) - b.at2(i, j);
            ss += d * d;
        }
        want += std::sqrt(ss);
    }
    want /= 6.0L;
    const double ab = value(adm::kd_loss(Vd::constant(a), Vd::constant(b)));
    const double ba = value(adm::kd_loss(Vd::constant(b), Vd::constant(a)));
    REQUIRE(ab == Catch::Approx(static_cast<double>(want)).margin(1e-12));
    REQUIRE(ab == ba);
    REQUIRE(ab > 0.0);
}

TEST_CASE("drift loss gradient passes finite differences", "[losses]") {
    Rng rng(406);
    auto a = randn(rng, {4, 3});
    auto b = randn(rng, {4, 3});
    auto r = adm_test::fd_check<double>({a, b}, [](Vars& v) { return adm::kd_loss(v[0], v[1]); }, 1e-6);
    REQUIRE(r.max_rel < 1e-6);
    Tensord c({4, 4});
    REQUIRE_THROWS_AS(adm::kd_loss(Vd::constant(a), Vd::constant(c)), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Pseudo-labels and self-training
// ---------------------------------------------------------------------------

TEST_CASE("pseudo-labels offset the novel argmax by the base class count", "[losses]") {
    REQUIRE(adm::pseudo_label(Tensord::from_values({3}, {0.1, 2.0, -1.0}), 5) == 6);
    REQUIRE(adm::pseudo_label(Tensord::from_values({4}, {0.3, 0.3, 0.3, 0.3}), 5) == 5);
    Tensord twenty({20});
    twenty.data[19] = 3.0;
    REQUIRE(adm::pseudo_label(twenty, 80) == 99);
    REQUIRE_THROWS_AS(adm::pseudo_label(Tensord({0}), 5), std::invalid_argument);
}

TEST_CASE("pseudo-labels ignore logit shift and positive rescale", "[losses]") {
    Rng rng(407);
    auto logits = randn(rng, {6, 4});
    auto base = adm::pseudo_labels(logits, 10);
    Tensord shifted = logits, scaled = logits;
    for (auto& v : shifted.data) v += 7.5;
    for (auto& v : scaled.data) v *= 3.0;
    REQUIRE(adm::pseudo_labels(shifted, 10) == base);
    REQUIRE(adm::pseudo_labels(scaled, 10) == base);
    for (std::size_t y : base) {
        REQUIRE(y >= 10);
        REQUIRE(y < 14);
    }
}

TEST_CASE("self-training loss vanishes on confident correct logits", "[losses]") {
    Tensord logits({2, 6}, 0.0);
    logits.at2(0, 3) = 20.0;
    logits.at2(1, 5) = 20.0;
    auto loss = adm::self_train_loss(Vd::constant(logits), {3, 5});
    REQUIRE(value(loss) < 1e-8);
    REQUIRE(value(loss) >= 0.0);
}

TEST_CASE("self-training loss on uniform logits is log(C)/C", "[losses]") {
    Tensord logits({3, 10}, 0.25);
    auto loss = adm::self_train_loss(Vd::constant(logits), {0, 4, 9});
    REQUIRE(value(loss) == Catch::Approx(std::log(10.0) / 10.0).margin(1e-12));
}

TEST_CASE("self-training loss matches direct summation", "[losses]") {
    Rng rng(408);
    auto logits = randn(rng, {5, 7});
    const std::vector<std::size_t> y = {6, 0, 3, 3, 1};
    long double want = 0.0L;
    for (std::size_t i = 0; i < 5; ++i) {
        long double denom = 0.0L;
        for (std::size_t j = 0; j < 7; ++j) denom += std::exp((long double)logits.at2(i, j));
        want += -(1.0L / 7.0L) * std::log(std::exp((long double)logits.at2(i, y[i])) / denom);
    }
    want /= 5.0L;
    auto loss = adm::self_train_loss(Vd::constant(logits), y);
    REQUIRE(value(loss) == Catch::Approx(static_cast<double>(want)).margin(1e-12));
}

TEST_CASE("self-training loss gradient passes finite differences", "[losses]") {
    Rng rng(409);
    auto logits = randn(rng, {4, 6});
    const std::vector<std::size_t> y = {1, 5, 0, 2};
    auto r = adm_test::fd_check<double>(
        {logits}, [&](Vars& v) { return adm::self_train_loss(v[0], y); }, 1e-6);
    REQUIRE(r.max_rel < 1e-6);
    REQUIRE_THROWS_AS(adm::self_train_loss(Vd::constant(logits), {1, 2, 3, 6}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Triplet mining and loss
// ---------------------------------------------------------------------------

TEST_CASE("mining picks nearest and farthest neighbors on an arc", "[losses]") {
    // Directions at 0, 10 and 45 degrees; cosine distance grows with angle.
    auto dir = [](double deg) {
        const double r = deg * 3.14159265358979323846 / 180.0;
        return std::pair<double, double>{std::cos(r), std::sin(r)};
    };
    Tensord f({3, 2});
    std::size_t row = 0;
    for (double deg : {0.0, 10.0, 45.0}) {
        auto [c, s] = dir(deg);
        f.at2(row, 0) = c;
        f.at2(row, 1) = s;
        ++row;
    }
    auto t = adm::mine_triplets(f);
    REQUIRE(t.positive == std::vector<std::size_t>{1, 0, 1});
    REQUIRE(t.negative == std::vector<std::size_t>{2, 2, 0});
}

TEST_CASE("mining prefers an exact duplicate as the positive", "[losses]") {
    Tensord f = Tensord::from_values({4, 2}, {1, 0, 0, 1, 1, 0, -1, 0.2});
    auto t = adm::mine_triplets(f);
    REQUIRE(t.positive[0] == 2);  // duplicate of row 0
    REQUIRE(t.positive[2] == 0);
}

TEST_CASE("mining matches the all-pairs oracle", "[losses]") {
    Rng rng(410);
    auto f = randn(rng, {8, 5});
    auto got = adm::mine_triplets(f);
    for (std::size_t i = 0; i < 8; ++i) {
        std::size_t pos = i == 0 ? 1 : 0, neg = pos;
        double dpos = 1e300, dneg = -1e300;
        for (std::size_t j = 0; j < 8; ++j) {
            if (j == i) continue;
            double dot = 0, ni = 0, nj = 0;
            for (std::size_t k = 0; k < 5; ++k) {
                dot += f.at2(i, k) * f.at2(j, k);
                ni += f.at2(i, k) * f.at2(i, k);
                nj += f.at2(j, k) * f.at2(j, k);
            }
            const double d = 1.0 - dot / (std::sqrt(ni) * std::sqrt(nj));
            if (d < dpos) {
                dpos = d;
                pos = j;
            }
            if (d > dneg) {
                dneg = d;
                neg = j;
            }
        }
        REQUIRE(got.positive[i] == pos);
        REQUIRE(got.negative[i] == neg);
    }
}

TEST_CASE("mining is permutation-equivariant", "[losses]") {
    Rng rng(411);
    auto f = randn(rng, {6, 4});
    auto base = adm::mine_triplets(f);
    const std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};  // new[k] = old[perm[k]]
    Tensord g({6, 4});
    for (std::size_t k = 0; k < 6; ++k)
        for (std::size_t j = 0; j < 4; ++j) g.at2(k, j) = f.at2(perm[k], j);
    auto permuted = adm::mine_triplets(g);
    std::vector<std::size_t> inv(6);
    for (std::size_t k = 0; k < 6; ++k) inv[perm[k]] = k;
    for (std::size_t k = 0; k < 6; ++k) {
        REQUIRE(permuted.positive[k] == inv[base.positive[perm[k]]]);
        REQUIRE(permuted.negative[k] == inv[base.negative[perm[k]]]);
    }
}

TEST_CASE("mining needs at least three rows and tolerates zero rows", "[losses]") {
    Tensord two({2, 3}, 1.0);
    REQUIRE_THROWS_AS(adm::mine_triplets(two), std::invalid_argument);
    Tensord with_zero = Tensord::from_values({3, 2}, {0, 0, 1, 0, 0, 1});
    REQUIRE_NOTHROW(adm::mine_triplets(with_zero));
}

TEST_CASE("triplet loss is zero when all three parts coincide", "[losses]") {
    Rng rng(412);
    auto logits = randn(rng, {4, 5});
    auto v = Vd::constant(logits);
    REQUIRE(value(adm::triplet_loss(adm::TripletBatch<double>{v, v, v})) == 0.0);
}

TEST_CASE("triplet loss of saturated two-class rows is minus one", "[losses]") {
    auto a = Vd::constant(Tensord::from_values({1, 2}, {40.0, -40.0}));
    auto n = Vd::constant(Tensord::from_values({1, 2}, {-40.0, 40.0}));
    auto loss = adm::triplet_loss(adm::TripletBatch<double>{a, a, n});
    REQUIRE(value(loss) == Catch::Approx(-1.0).margin(1e-14));
}

TEST_CASE("triplet loss matches direct summation", "[losses]") {
    Rng rng(413);
    auto la = randn(rng, {3, 4});
    auto lp = randn(rng, {3, 4});
    auto ln = randn(rng, {3, 4});
    auto soft = [](const Tensord& t, std::size_t i, std::size_t j) {
        long double denom = 0.0L;
        for (std::size_t k = 0; k < t.shape[1]; ++k) denom += std::exp((long double)t.at2(i, k));
        return std::exp((long double)t.at2(i, j)) / denom;
    };
    long double want = 0.0L;
    for (std::size_t i = 0; i < 3; ++i) {
        long double pos = 0.0L, neg = 0.0L;
        for (std::size_t j = 0; j < 4; ++j) {
            const long double dp = soft(la, i, j) - soft(lp, i, j);
            const long double dn = soft(la, i, j) - soft(ln, i, j);
            pos += dp * dp;
            neg += dn * dn;
        }
        want += (pos - neg) / 4.0L;
    }
    want /= 3.0L;
    auto loss = adm::triplet_loss(
        adm::TripletBatch<double>{Vd::constant(la), Vd::constant(lp), Vd::constant(ln)});
    REQUIRE(value(loss) == Catch::Approx(static_cast<double>(want)).margin(1e-12));
}

TEST_CASE("triplet loss responds monotonically to controlled perturbations", "[losses]") {
    Rng rng(414);
    auto a = randn(rng, {2, 3});
    auto n = randn(rng, {2, 3});
    auto v = randn(rng, {2, 3});
    double prev = 1e300;
    for (double t : {2.0, 1.0, 0.5, 0.0}) {
        Tensord p = a;
        for (std::size_t i = 0; i < p.numel(); ++i) p.data[i] += t * v.data[i];
        const double loss = value(adm::triplet_loss(
            adm::TripletBatch<double>{Vd::constant(a), Vd::constant(p), Vd::constant(n)}));
        REQUIRE(loss < prev);
        prev = loss;
    }
}

TEST_CASE("optional hinge clamps the triplet loss at zero", "[losses]") {
    auto a = Vd::constant(Tensord::from_values({1, 2}, {40.0, -40.0}));
    auto n = Vd::constant(Tensord::from_values({1, 2}, {-40.0, 40.0}));
    adm::TripletBatch<double> t{a, a, n};
    // Plain value is -1; with margin 1.0 the hinge lands exactly at zero,
    // with margin 1.5 at one half.
    REQUIRE(value(adm::triplet_loss(t, true, 1.0)) == Catch::Approx(0.0).margin(1e-14));
    REQUIRE(value(adm::triplet_loss(t, true, 1.5)) == Catch::Approx(0.5).margin(1e-14));
    REQUIRE_THROWS_AS(adm::triplet_loss(t, true, -0.5), std::invalid_argument);
}

TEST_CASE("triplet loss over gathered logits passes finite differences", "[losses]") {
    Rng rng(415);
    auto feats = randn(rng, {5, 6});
    auto logits = randn(rng, {5, 4});
    const TripletIndices idx = adm::mine_triplets(feats);
    auto r = adm_test::fd_check<double>(
        {logits},
        [&](Vars& v) { return adm::triplet_loss(adm::gather_triplets(v[0], idx)); }, 1e-6);
    REQUIRE(r.max_rel < 1e-6);
}

// ---------------------------------------------------------------------------
// Probability regularization
// ---------------------------------------------------------------------------

TEST_CASE("entropy regularizer attains -log K on uniform rows", "[losses]") {
    Tensord p({3, 4}, 0.25);
    auto loss = adm::prob_regularization(Vd::constant(p));
    REQUIRE(value(loss) == Catch::Approx(-std::log(4.0)).margin(1e-14));
}

TEST_CASE("entropy regularizer attains zero on a collapsed batch", "[losses]") {
    Tensord p({4, 3}, 0.0);
    for (std::size_t i = 0; i < 4; ++i) p.at2(i, 1) = 1.0;
    REQUIRE(value(adm::prob_regularization(Vd::constant(p))) == 0.0);
}

TEST_CASE("entropy regularizer hits the hand-computed two-class value", "[losses]") {
    // Mean distribution (0.75, 0.25): 0.75 ln 0.75 + 0.25 ln 0.25 = -0.5623...
    auto p = Tensord::from_values({2, 2}, {1.0, 0.0, 0.5, 0.5});
    auto loss = adm::prob_regularization(Vd::constant(p));
    REQUIRE(value(loss) == Catch::Approx(-0.56233514461880829).margin(1e-12));
}

TEST_CASE("uniform mean is the entropy regularizer's global minimum", "[losses]") {
    Rng rng(416);
    const double at_uniform = value(adm::prob_regularization(Vd::constant(Tensord({5, 3}, 1.0 / 3.0))));
    for (int rep = 0; rep < 10; ++rep) {
        auto logits = randn(rng, {5, 3});
        auto probs = adm::softmax(logits, 1);
        REQUIRE(value(adm::prob_regularization(Vd::constant(probs))) >= at_uniform - 1e-12);
    }
}

TEST_CASE("entropy regularizer is stationary at the uniform point", "[losses]") {
    // Through the softmax parametrization the gradient must vanish when the
    // mean distribution is exactly uniform.
    Tensord logits({4, 3}, 0.7);
    auto leaf = Vd::leaf(logits, true);
    auto loss = adm::prob_regularization(adm::softmax_rows(leaf));
    adm::backward(loss);
    for (double g : leaf.grad().data) REQUIRE(std::abs(g) < 1e-12);

    auto r = adm_test::fd_check<double>(
        {logits}, [](Vars& v) { return adm::prob_regularization(adm::softmax_rows(v[0])); }, 1e-6);
    REQUIRE(r.max_rel < 1e-6);
}

TEST_CASE("entropy regularizer gradient passes finite differences off-uniform", "[losses]") {
    Rng rng(417);
    auto logits = randn(rng, {4, 5});
    auto r = adm_test::fd_check<double>(
        {logits}, [](Vars& v) { return adm::prob_regularization(adm::softmax_rows(v[0])); }, 1e-6);
    REQUIRE(r.max_rel < 1e-6);
}

TEST_CASE("entropy regularizer rejects unnormalized rows", "[losses]") {
    auto bad = Tensord::from_values({1, 2}, {0.7, 0.7});
    REQUIRE_THROWS_AS(adm::prob_regularization(Vd::constant(bad)), std::invalid_argument);
    auto neg = Tensord::from_values({1, 2}, {1.5, -0.5});
    REQUIRE_THROWS_AS(adm::prob_regularization(Vd::constant(neg)), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Feature replay
// ---------------------------------------------------------------------------

namespace {

PrototypeStore<double> tight_store(std::size_t classes, std::size_t dim, double spread) {
    PrototypeStore<double> store;
    store.feature_dim = dim;
    store.classes.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        store.classes[c].mean.assign(dim, 0.0);
        store.classes[c].mean[c % dim] = spread;
        store.classes[c].var.assign(dim, 0.0);
        store.classes[c].count = 2;
    }
    return store;
}

}  // namespace

TEST_CASE("replay loss vanishes for a head that nails every prototype", "[losses]") {
    auto store = tight_store(3, 3, 10.0);
    Tensord w({3, 3}, 0.0);
    for (std::size_t c = 0; c < 3; ++c) w.at2(c, c) = 4.0;  // logit margin 40 for the right class
    Rng rng(500);
    auto loss = adm::feature_replay_loss(Vd::constant(w), Vd::constant(Tensord({3}, 0.0)), store, 2, rng);
    REQUIRE(value(loss) < 1e-10);
}

TEST_CASE("replay loss on a silent head is log of the base class count", "[losses]") {
    auto store = tight_store(5, 4, 1.0);
    for (auto& c : store.classes) c.var.assign(4, 0.3);
    Tensord w({5, 4}, 0.0);
    Rng rng(501);
    auto loss = adm::feature_replay_loss(Vd::constant(w), Vd::constant(Tensord({5}, 0.0)), store, 3, rng);
    REQUIRE(value(loss) == Catch::Approx(std::log(5.0)).margin(1e-12));
}

TEST_CASE("replay loss is bitwise deterministic under a fixed seed", "[losses]") {
    Rng proto_rng(502);
    Tensord feats({8, 4});
    proto_rng.fill_normal(feats, 0.0, 1.0);
    auto store = adm::compute_prototypes(feats, {0, 0, 1, 1, 2, 2, 3, 3}, 4);
    Tensord w({4, 4});
    proto_rng.fill_normal(w, 0.0, 0.5);
    auto run = [&](std::uint64_t seed) {
        Rng rng(seed);
        return value(adm::feature_replay_loss(Vd::constant(w), Vd::constant(Tensord({4}, 0.1)), store, 5, rng));
    };
    REQUIRE(run(7) == run(7));
    REQUIRE(run(7) != run(8));
}

TEST_CASE("replay loss gradient passes finite differences", "[losses]") {
    Rng proto_rng(503);
    Tensord feats({6, 3});
    proto_rng.fill_normal(feats, 0.0, 1.0);
    auto store = adm::compute_prototypes(feats, {0, 0, 0, 1, 1, 1}, 2);
    Tensord w({2, 3});
    proto_rng.fill_normal(w, 0.0, 0.5);
    Tensord b({2}, 0.0);
    auto r = adm_test::fd_check<double>(
        {w, b},
        [&](Vars& v) {
            Rng rng(99);  // same draws on every rebuild
            return adm::feature_replay_loss(v[0], v[1], store, 4, rng);
        },
        1e-6);
    REQUIRE(r.max_rel < 1e-6);
}

TEST_CASE("replay loss rejects an empty store and zero draws", "[losses]") {
    PrototypeStore<double> empty;
    Tensord w({2, 3}, 0.1);
    Rng rng(504);
    REQUIRE_THROWS_AS(adm::feature_replay_loss(Vd::constant(w), Vd::constant(Tensord({2}, 0.0)), empty, 1, rng),
                      std::invalid_argument);
    auto store = tight_store(2, 3, 1.0);
    REQUIRE_THROWS_AS(adm::feature_replay_loss(Vd::constant(w), Vd::constant(Tensord({2}, 0.0)), store, 0, rng),
                      std::invalid_argument);
}

TEST_CASE("replay loss softmax spans supplied novel columns", "[losses]") {
    // Zero-variance store, so every draw is exactly a class mean and the
    // loss is computable by hand: class c's mean sits on axis c, the base
    // head puts logit 2 on the right class, and the shared novel column
    // adds a competing logit of 1 on every row.
    auto store = tight_store(2, 2, 1.0);
    Tensord base_w({2, 2}, 0.0);
    base_w.at2(0, 0) = 2.0;
    base_w.at2(1, 1) = 2.0;
    Tensord novel_w({1, 2}, 1.0);
    Rng rng(505);
    auto loss = adm::feature_replay_loss(Vd::constant(base_w), Vd::constant(Tensord({2}, 0.0)), store, 3, rng,
                                         Vd::constant(novel_w), Vd::constant(Tensord({1}, 0.0)));
    const double expect = std::log(1.0 + std::exp(-2.0) + std::exp(-1.0));
    REQUIRE(value(loss) == Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("silent joint head replays at log of the total class count", "[losses]") {
    auto store = tight_store(3, 4, 1.0);
    for (auto& c : store.classes) c.var.assign(4, 0.2);
    Rng rng(506);
    auto loss = adm::feature_replay_loss(Vd::constant(Tensord({3, 4}, 0.0)), Vd::constant(Tensord({3}, 0.0)),
                                         store, 4, rng, Vd::constant(Tensord({2, 4}, 0.0)),
                                         Vd::constant(Tensord({2}, 0.0)));
    REQUIRE(value(loss) == Catch::Approx(std::log(5.0)).margin(1e-12));
}

TEST_CASE("replay loss gradient spans the joint head", "[losses]") {
    Rng proto_rng(507);
    Tensord feats({6, 3});
    proto_rng.fill_normal(feats, 0.0, 1.0);
    auto store = adm::compute_prototypes(feats, {0, 0, 0, 1, 1, 1}, 2);
    Tensord bw({2, 3}), nw({2, 3});
    proto_rng.fill_normal(bw, 0.0, 0.5);
    proto_rng.fill_normal(nw, 0.0, 0.5);
    auto r = adm_test::fd_check<double>(
        {bw, Tensord({2}, 0.0), nw, Tensord({2}, 0.1)},
        [&](Vars& v) {
            Rng rng(131);  // same draws on every rebuild
            return adm::feature_replay_loss(v[0], v[1], store, 4, rng, v[2], v[3]);
        },
        1e-6);
    REQUIRE(r.max_rel < 1e-6);
}

TEST_CASE("replay loss insists the novel weight and bias come together", "[losses]") {
    auto store = tight_store(2, 3, 1.0);
    Rng rng(508);
    REQUIRE_THROWS_WITH(adm::feature_replay_loss(Vd::constant(Tensord({2, 3}, 0.1)),
                                                 Vd::constant(Tensord({2}, 0.0)), store, 2, rng,
                                                 Vd::constant(Tensord({1, 3}, 0.1)), Vd()),
                        Catch::Matchers::ContainsSubstring("come together"));
}

// ---------------------------------------------------------------------------
// Prototypes
// ---------------------------------------------------------------------------

TEST_CASE("prototypes of {0,2} are mean 1 and unbiased variance 2", "[losses]") {
    auto f = Tensord::from_values({2, 1}, {0.0, 2.0});
    auto store = adm::compute_prototypes(f, {0, 0}, 1);
    REQUIRE(store.classes[0].mean == std::vector<double>{1.0});
    REQUIRE(store.classes[0].var == std::vector<double>{2.0});
    REQUIRE(store.classes[0].count == 2);
}

TEST_CASE("prototypes of identical samples have zero variance", "[losses]") {
    auto f = Tensord::from_values({4, 2}, {3, -1, 3, -1, 0.5, 2, 0.5, 2});
    auto store = adm::compute_prototypes(f, {0, 0, 1, 1}, 2);
    REQUIRE(store.classes[0].mean == std::vector<double>{3.0, -1.0});
    REQUIRE(store.classes[0].var == std::vector<double>{0.0, 0.0});
    REQUIRE(store.classes[1].mean == std::vector<double>{0.5, 2.0});
    REQUIRE_NOTHROW(store.validate());
}

TEST_CASE("prototypes match an independent per-class oracle", "[losses]") {
    Rng rng(505);
    Tensord f({12, 3});
    rng.fill_normal(f, 0.5, 1.5);
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < 12; ++i) labels.push_back(i % 3);
    auto store = adm::compute_prototypes(f, labels, 3);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t j = 0; j < 3; ++j) {
            long double mean = 0.0L;
            std::size_t n = 0;
            for (std::size_t i = 0; i < 12; ++i)
                if (labels[i] == c) {
                    mean += f.at2(i, j);
                    ++n;
                }
            mean /= n;
            long double var = 0.0L;
            for (std::size_t i = 0; i < 12; ++i)
                if (labels[i] == c) {
                    const long double d = f.at2(i, j) - mean;
                    var += d * d;
                }
            var /= (n - 1);
            REQUIRE(store.classes[c].mean[j] == Catch::Approx((double)mean).margin(1e-12));
            REQUIRE(store.classes[c].var[j] == Catch::Approx((double)var).margin(1e-12));
        }
    }
}

TEST_CASE("prototypes reject underpopulated classes and bad labels", "[losses]") {
    auto f = Tensord::from_values({3, 1}, {1.0, 2.0, 3.0});
    REQUIRE_THROWS_AS(adm::compute_prototypes(f, {0, 0, 1}, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(adm::compute_prototypes(f, {0, 0, 5}, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(adm::compute_prototypes(f, {0, 0}, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Ramp and composition
// ---------------------------------------------------------------------------

TEST_CASE("ramp weight endpoints and midpoint", "[losses]") {
    REQUIRE(adm::rampup(50.0, 50.0) == 1.0);
    REQUIRE(adm::rampup(80.0, 50.0) == 1.0);  // clamped past the ramp
    REQUIRE(adm::rampup(0.0, 50.0) == Catch::Approx(std::exp(-5.0)).margin(1e-15));
    REQUIRE(adm::rampup(25.0, 50.0) == Catch::Approx(std::exp(-1.25)).margin(1e-15));
    REQUIRE_THROWS_AS(adm::rampup(1.0, 0.0), std::invalid_argument);
}

TEST_CASE("ramp weight never decreases", "[losses]") {
    double prev = -1.0;
    for (int t = 0; t <= 60; ++t) {
        const double w = adm::rampup(static_cast<double>(t), 50.0);
        REQUIRE(w >= prev);
        REQUIRE(w <= 1.0);
        prev = w;
    }
}

TEST_CASE("loss schedule forwards its ramp", "[losses]") {
    adm::LossSchedule sched;
    REQUIRE(sched.tau_u == 0.5);
    REQUIRE(sched.ramp_length == 50.0);
    REQUIRE(sched.omega(0.0) == Catch::Approx(std::exp(-5.0)).margin(1e-15));
    REQUIRE(sched.omega(50.0) == 1.0);
}

TEST_CASE("total loss composes the stated linear combination", "[losses]") {
    auto c = [](double v) { return Vd::constant(Tensord({1}, v)); };
    adm::LossParts<double> zero;
    REQUIRE(value(adm::total_loss(zero, 0.5)) == 0.0);

    adm::LossParts<double> only_self;
    only_self.self_train = c(1.0);
    REQUIRE(value(adm::total_loss(only_self, 1.0)) == 1.0);  // omega at the ramp end

    adm::LossParts<double> parts;
    parts.kd = c(0.3);
    parts.contrastive = c(0.7);
    parts.replay = c(1.1);
    parts.triplet = c(-0.2);
    parts.prob_reg = c(-1.3);
    parts.self_train = c(0.9);
    const double omega = adm::rampup(10.0, 50.0);
    REQUIRE(value(adm::total_loss(parts, omega)) ==
            Catch::Approx(0.3 + 0.7 + 1.1 - 0.2 - 1.3 + omega * 0.9).margin(1e-15));
    REQUIRE_THROWS_AS(adm::total_loss(parts, 1.5), std::invalid_argument);

    // Disabled terms drop out of the sum entirely.
    adm::LossParts<double> partial;
    partial.kd = c(0.25);
    partial.triplet = c(0.5);
    REQUIRE(value(adm::total_loss(partial, 0.9)) == 0.75);
}

TEST_CASE("joint head concatenates base and novel logits", "[losses]") {
    adm::JointHead<double> head;
    head.base_w = Tensord::from_values({2, 2}, {1, 0, 0, 1});
    head.base_b = Tensord::from_values({2}, {0.5, -0.5});
    head.novel_w = Tensord::from_values({1, 2}, {1, 1});
    head.novel_b = Tensord::from_values({1}, {0.0});
    auto f = Tensord::from_values({1, 2}, {2.0, 3.0});
    auto logits = head.joint_logits(f);
    REQUIRE(logits.shape == std::vector<std::size_t>{1, 3});
    REQUIRE(logits.at2(0, 0) == 2.5);
    REQUIRE(logits.at2(0, 1) == 2.5);
    REQUIRE(logits.at2(0, 2) == 5.0);
    REQUIRE(head.total_classes() == 3);

    adm::JointHead<double> base_only;
    base_only.base_w = head.base_w;
    base_only.base_b = head.base_b;
    auto b = base_only.joint_logits(f);
    REQUIRE(b.shape == std::vector<std::size_t>{1, 2});

    adm::JointHead<double> bad = head;
    bad.novel_w = Tensord({1, 3}, 0.0);
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}
