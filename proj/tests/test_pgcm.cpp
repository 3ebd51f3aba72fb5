#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <nrseg/common.hpp>
#include <nrseg/gradcheck.hpp>
#include <nrseg/pgcm.hpp>

using namespace nrseg;
using namespace nrseg::pgcm;

namespace {

MaskImage mask_from(std::vector<uint8_t> bits, int h, int w) {
    MaskImage m(h, w);
    m.data = std::move(bits);
    return m;
}

Tensor random_probs(Rng& rng, int k, int h, int w, double lo = 0.05, double hi = 0.95) {
    Tensor t({k, h, w});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

Tensor random_labels(Rng& rng, int k, int h, int w, double density = 0.4) {
    Tensor t({k, h, w});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.bernoulli(density) ? 1.0 : 0.0;
    return t;
}

// Synthetic (P,L) whose class sums hit exact (P_+, P_-, N_+) masses.
Tensor mass_tensor(int n_plus_cells, int p_plus_on, int p_minus_on, int total) {
    Tensor p({1, 1, total});
    for (int i = 0; i < p_plus_on; ++i) p[i] = 1.0;
    for (int i = 0; i < p_minus_on; ++i) p[n_plus_cells + i] = 1.0;
    return p;
}

Tensor mass_labels(int n_plus_cells, int total) {
    Tensor l({1, 1, total});
    for (int i = 0; i < n_plus_cells; ++i) l[i] = 1.0;
    return l;
}

}  // namespace

TEST_CASE("mask_iou examples") {
    MaskImage a = mask_from({1, 1, 0, 0}, 2, 2);
    MaskImage b = mask_from({0, 1, 1, 0}, 2, 2);
    CHECK(mask_iou(a, a) == 1.0);
    CHECK(mask_iou(a, b) == doctest::Approx(1.0 / 3.0));
    CHECK(mask_iou(b, a) == mask_iou(a, b));
    MaskImage disjoint = mask_from({0, 0, 1, 1}, 2, 2);
    CHECK(mask_iou(a, disjoint) == 0.0);
    MaskImage empty(2, 2);
    CHECK(mask_iou(empty, empty) == 1.0);
    MaskImage wrong(3, 2);
    CHECK_THROWS_AS(mask_iou(a, wrong), DimensionError);
}

TEST_CASE("frame_consistency_score") {
    MaskImage ref = mask_from({1, 1, 0, 0}, 2, 2);
    std::vector<MaskImage> refs(6, ref), syns(6, ref);
    // engineer IoU 0.5 per view: syn covers one of two cells plus one extra
    MaskImage syn = mask_from({1, 0, 1, 0}, 2, 2);
    std::fill(syns.begin(), syns.end(), syn);
    ConsistencyScore s = frame_consistency_score(refs, syns, 0.05);
    CHECK(s.value == doctest::Approx(1.0 / 3.0));

    ConsistencyScore perfect = frame_consistency_score(refs, refs, 0.05);
    CHECK(perfect.value == 1.0);

    MaskImage r5 = mask_from({1, 1, 1, 1, 1, 0, 0, 0, 0, 0}, 1, 10);
    MaskImage s02 = mask_from({1, 0, 0, 0, 0, 1, 1, 1, 1, 0}, 1, 10);  // inter 1, union 9
    ConsistencyScore mixed = frame_consistency_score({r5}, {s02}, 0.05);
    CHECK(mixed.per_view[0] == doctest::Approx(1.0 / 9.0));

    // arithmetic mean over views
    MaskImage full = mask_from({1, 1, 1, 1, 1, 1, 1, 1, 1, 1}, 1, 10);
    MaskImage half = mask_from({1, 1, 1, 1, 1, 0, 0, 0, 0, 0}, 1, 10);
    ConsistencyScore avg = frame_consistency_score({full, full}, {half, full}, 0.05);
    CHECK(avg.value == doctest::Approx(0.75));

    CHECK_THROWS_AS(frame_consistency_score({}, {}, 0.05), ValidationError);

    // floor clamps the mean, not the per-view entries
    MaskImage zero(1, 10);
    ConsistencyScore floored = frame_consistency_score({r5}, {zero}, 0.05);
    CHECK(floored.value == 0.05);
    CHECK(floored.per_view[0] == 0.0);
}

TEST_CASE("frame_consistency_score is permutation invariant") {
    Rng rng(3);
    std::vector<MaskImage> refs, syns;
    for (int v = 0; v < 4; ++v) {
        MaskImage r(4, 4), s(4, 4);
        for (int i = 0; i < 16; ++i) {
            r.data[i] = rng.bernoulli(0.5);
            s.data[i] = rng.bernoulli(0.5);
        }
        refs.push_back(r);
        syns.push_back(s);
    }
    double base = frame_consistency_score(refs, syns, 0.05).value;
    std::vector<size_t> perm{2, 0, 3, 1};
    std::vector<MaskImage> refs_p, syns_p;
    for (size_t i : perm) {
        refs_p.push_back(refs[i]);
        syns_p.push_back(syns[i]);
    }
    CHECK(frame_consistency_score(refs_p, syns_p, 0.05).value == doctest::Approx(base));
}

TEST_CASE("dice_loss closed forms") {
    // P == L with 100 positive cells, sigma = 1 -> 1 - 200/201
    Tensor l = mass_labels(100, 400);
    Tensor p = mass_tensor(100, 100, 0, 400);
    CHECK(dice_loss(p, l, 1.0) == doctest::Approx(1.0 - 200.0 / 201.0).epsilon(1e-12));
    CHECK(dice_loss(p, l, 1e-9) == doctest::Approx(0.0).epsilon(1e-9));

    // no overlap: numerator is exactly zero, so the loss is exactly 1
    Tensor zeros({1, 1, 400});
    CHECK(dice_loss(zeros, l, 1.0) == 1.0);

    // all-empty class guard
    CHECK(dice_loss(zeros, Tensor({1, 1, 400}), 1.0) == 0.0);
}

TEST_CASE("weighted_dice_loss: R=1 identity and closed forms") {
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor p = random_probs(rng, 3, 5, 7);
        Tensor l = random_labels(rng, 3, 5, 7);
        CHECK(std::fabs(weighted_dice_loss(p, l, 1.0, 1.0) - dice_loss(p, l, 1.0)) < 1e-9);
        CHECK(std::fabs(weighted_dice_loss(p, l, 1.0, 1.0, DiceAggregation::PerClassMean) -
                        dice_loss(p, l, 1.0, DiceAggregation::PerClassMean)) < 1e-9);
    }

    // P_+ = N_+ = 100, P_- = 0, sigma = 0, R = 0.8 -> -0.25
    Tensor l = mass_labels(100, 400);
    Tensor p = mass_tensor(100, 100, 0, 400);
    CHECK(weighted_dice_loss(p, l, 0.8, 0.0) == doctest::Approx(-0.25).epsilon(1e-12));

    // zero-loss manifold: R = 0.5, N_+ = 100, (P_+=100, P_-=200) -> 0
    Tensor p2 = mass_tensor(100, 100, 200, 400);
    CHECK(weighted_dice_loss(p2, l, 0.5, 0.0) == doctest::Approx(0.0).epsilon(1e-12));

    CHECK_THROWS_AS(weighted_dice_loss(p, l, 0.0, 1.0), ValidationError);
    CHECK_THROWS_AS(weighted_dice_loss(p, l, -0.3, 1.0), ValidationError);
}

TEST_CASE("optimum_negative_mass") {
    CHECK(optimum_negative_mass(100.0, 100.0, 1.0, 0.0) == doctest::Approx(0.0));
    CHECK(optimum_negative_mass(100.0, 100.0, 0.5, 0.0) == doctest::Approx(200.0));
    double r = 0.7, n_plus = 123.0;
    double boundary = n_plus * r / (2.0 - r);
    CHECK(optimum_negative_mass(boundary, n_plus, r, 0.0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK_THROWS_AS(optimum_negative_mass(10.0, 5.0, 0.5, 0.0), ValidationError);
}

TEST_CASE("zero-loss manifold holds along Eq-15 pairs") {
    Rng rng(21);
    for (int trial = 0; trial < 500; ++trial) {
        double r = rng.uniform(0.1, 1.0);
        double n_plus = rng.uniform(10.0, 500.0);
        double sigma = rng.uniform(0.0, 2.0);
        double p_plus = rng.uniform(n_plus * r / (2.0 - r), n_plus);
        double p_minus = optimum_negative_mass(p_plus, n_plus, r, sigma);
        if (p_minus < 0.0) continue;
        CHECK(std::fabs(scalarized_weighted_loss(p_plus, p_minus, n_plus, r, sigma)) < 1e-9);
    }
}

TEST_CASE("argmin slack: zero-loss attainable with positive negative-mass for R<1") {
    // Grid-search the scalarized loss; the zero-level set (the optimum in the
    // numerator==denominator sense) must contain points with P_- > 0.
    double n_plus = 1.0, sigma = 0.0;
    for (double r : {0.5, 0.8, 0.95}) {
        double best = 1e300;
        double best_pminus = -1.0;
        for (double p_plus = 0.0; p_plus <= n_plus + 1e-12; p_plus += 1e-3) {
            for (double p_minus = 0.0; p_minus <= 2.0 * n_plus + 1e-12; p_minus += 1e-3) {
                double v = std::fabs(scalarized_weighted_loss(p_plus, p_minus, n_plus, r, sigma));
                if (v < best) {
                    best = v;
                    best_pminus = p_minus;
                }
            }
        }
        CHECK(best < 1e-2);
        CHECK(best_pminus > 0.0);
    }
    // R = 1 control: the zero set pins P_- at 0
    double best = 1e300, best_pminus = -1.0;
    for (double p_plus = 0.0; p_plus <= 1.0 + 1e-12; p_plus += 1e-3) {
        for (double p_minus = 0.0; p_minus <= 2.0; p_minus += 1e-3) {
            double v = std::fabs(scalarized_weighted_loss(p_plus, p_minus, 1.0, 1.0, 0.0));
            if (v < best) {
                best = v;
                best_pminus = p_minus;
            }
        }
    }
    CHECK(best_pminus == 0.0);
}

TEST_CASE("variant losses") {
    Rng rng(33);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor p = random_probs(rng, 2, 4, 6);
        Tensor l = random_labels(rng, 2, 4, 6);
        CHECK(std::fabs(variant_loss(p, l, 1.0, 1.0, VariantMode::M1) - dice_loss(p, l, 1.0)) <
              1e-9);
        CHECK(std::fabs(variant_loss(p, l, 1.0, 1.0, VariantMode::M2) - dice_loss(p, l, 1.0)) <
              1e-9);
    }
    Tensor l = mass_labels(100, 400);
    Tensor p = mass_tensor(100, 100, 0, 400);
    CHECK(variant_loss(p, l, 0.5, 0.0, VariantMode::M1) == doctest::Approx(1.0 / 3.0));
    CHECK(variant_loss(p, l, 0.5, 0.0, VariantMode::M2) == doctest::Approx(-0.2));
}

TEST_CASE("gradients match finite differences") {
    Rng rng(55);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor pv = random_probs(rng, 2, 3, 4, 0.1, 0.9);
        Tensor l = random_labels(rng, 2, 3, 4);
        double r = rng.uniform(0.2, 1.0);
        ad::Var p = ad::parameter(pv);

        auto wd = [&]() { return weighted_dice_loss(p, l, r, 1.0); };
        CHECK(gradcheck::check(wd, {p}).max_rel_err < 1e-3);

        auto m1 = [&]() { return variant_loss(p, l, r, 1.0, VariantMode::M1); };
        CHECK(gradcheck::check(m1, {p}).max_rel_err < 1e-3);

        auto m2 = [&]() { return variant_loss(p, l, r, 1.0, VariantMode::M2); };
        CHECK(gradcheck::check(m2, {p}).max_rel_err < 1e-3);
    }
}

TEST_CASE("Var and numeric paths agree") {
    Rng rng(60);
    Tensor pv = random_probs(rng, 3, 6, 5);
    Tensor l = random_labels(rng, 3, 6, 5);
    ad::Var p = ad::constant(pv);
    for (double r : {0.3, 0.77, 1.0}) {
        CHECK(ad::scalar_value(weighted_dice_loss(p, l, r, 1.0)) ==
              doctest::Approx(weighted_dice_loss(pv, l, r, 1.0)).epsilon(1e-12));
        CHECK(ad::scalar_value(variant_loss(p, l, r, 1.0, VariantMode::M2)) ==
              doctest::Approx(variant_loss(pv, l, r, 1.0, VariantMode::M2)).epsilon(1e-12));
    }
}
