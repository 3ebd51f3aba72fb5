#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <nrseg/common.hpp>
#include <nrseg/datasynth.hpp>
#include <nrseg/pgcm.hpp>
#include <nrseg/segnet.hpp>

using namespace nrseg;
using namespace nrseg::net;

namespace {

ModelConfig tiny_config(uint64_t seed = 3) {
    ModelConfig mc;
    mc.image_h = 32;
    mc.image_w = 64;
    mc.num_cams = 2;
    mc.grid = geom::BevGrid::make(-8, 8, -8, 8, 0.5);  // 32x32
    mc.k = 6;
    mc.c1 = 6;
    mc.c2 = 8;
    mc.partition = hlse::ClusterPartition::one_vs_rest(6);
    mc.seed = seed;
    return mc;
}

std::vector<Tensor> random_images(Rng& rng, const ModelConfig& mc) {
    std::vector<Tensor> images;
    for (int v = 0; v < mc.num_cams; ++v) {
        Tensor t({3, mc.image_h, mc.image_w});
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(0.0, 1.0);
        images.push_back(std::move(t));
    }
    return images;
}

std::vector<geom::CameraCalib> tiny_rig(const ModelConfig& mc) {
    return synth::make_rig(mc.num_cams, mc.image_w, mc.image_h, 70.0, 1.6, 8.0);
}

}  // namespace

TEST_CASE("first-frame independence: invalid state ignores prev_feature") {
    ModelConfig mc = tiny_config();
    SegNet model(mc);
    auto rig = tiny_rig(mc);
    Rng rng(5);
    auto images = random_images(rng, mc);
    geom::EgoPose pose = geom::EgoPose::make(0, 0, 0);

    ModelState clean;
    ModelState garbage;
    garbage.valid = false;
    garbage.prev_feature = Tensor({mc.c2, 16, 16}, 1234.5);
    garbage.prev_pose = geom::EgoPose::make(9, 9, 1);

    ForwardOutput a = model.forward(images, rig, pose, clean);
    ForwardOutput b = model.forward(images, rig, pose, garbage);
    double max_diff = 0;
    for (int64_t i = 0; i < a.d_m->value.numel(); ++i)
        max_diff = std::max(max_diff, std::fabs(a.d_m->value[i] - b.d_m->value[i]));
    CHECK(max_diff == 0.0);
}

TEST_CASE("second pass with state differs only through fusion; shapes stable") {
    ModelConfig mc = tiny_config();
    SegNet model(mc);
    auto rig = tiny_rig(mc);
    Rng rng(6);
    auto images = random_images(rng, mc);
    geom::EgoPose pose = geom::EgoPose::make(0, 0, 0);

    ModelState state;
    ForwardOutput first = model.forward(images, rig, pose, state);
    CHECK(first.state.valid);
    ForwardOutput second = model.forward(images, rig, pose, first.state);
    CHECK(second.d_m->value.shape() == first.d_m->value.shape());
    CHECK(second.d_d->value.shape() == first.d_d->value.shape());
    CHECK(second.bev_fused->value.shape() == first.bev_fused->value.shape());
    // the gate is active on the second pass
    bool differs = false;
    for (int64_t i = 0; i < first.bev_fused->value.numel(); ++i)
        if (first.bev_fused->value[i] != second.bev_fused->value[i]) differs = true;
    CHECK(differs);
}

TEST_CASE("forward smoke: finite outputs, probabilities in range") {
    ModelConfig mc = tiny_config();
    auto rig = tiny_rig(mc);
    for (uint64_t seed = 0; seed < 12; ++seed) {
        SegNet model(tiny_config(seed));
        Rng rng(seed + 100);
        auto images = random_images(rng, mc);
        ModelState state;
        ForwardOutput out = model.forward(images, rig, geom::EgoPose::make(0, 0, 0), state);
        for (int64_t i = 0; i < out.d_m->value.numel(); ++i)
            CHECK(std::isfinite(out.d_m->value[i]));
        for (int64_t i = 0; i < out.d_d->value.numel(); ++i)
            CHECK(std::isfinite(out.d_d->value[i]));
        for (const auto& pv : out.p_v)
            for (int64_t i = 0; i < pv->value.numel(); ++i) {
                CHECK(pv->value[i] >= 0.0);
                CHECK(pv->value[i] <= 1.0);
            }
    }
}

TEST_CASE("determinism: same seed and inputs produce bitwise-equal outputs") {
    ModelConfig mc = tiny_config(77);
    auto rig = tiny_rig(mc);
    Rng rng(8);
    auto images = random_images(rng, mc);
    SegNet m1(mc), m2(mc);
    ModelState s;
    ForwardOutput a = m1.forward(images, rig, geom::EgoPose::make(0, 0, 0), s);
    ForwardOutput b = m2.forward(images, rig, geom::EgoPose::make(0, 0, 0), s);
    CHECK(a.d_m->value.vec() == b.d_m->value.vec());
    CHECK(a.d_d->value.vec() == b.d_d->value.vec());
}

TEST_CASE("temporal_fuse: saturated gates select one side; output stays bounded") {
    ModelConfig mc = tiny_config();
    SegNet model(mc);
    Rng rng(9);
    Tensor cur_t({mc.c2, 16, 16}), prev_t({mc.c2, 16, 16});
    for (int64_t i = 0; i < cur_t.numel(); ++i) {
        cur_t[i] = rng.uniform(-1, 1);
        prev_t[i] = rng.uniform(-1, 1);
    }
    ad::Var cur = ad::constant(cur_t), prev = ad::constant(prev_t);

    // locate the gate parameters by name
    auto& names = model.parameter_names();
    ad::Var gate_w, gate_b;
    for (size_t i = 0; i < names.size(); ++i) {
        if (names[i] == "gate.w") gate_w = model.parameters()[i];
        if (names[i] == "gate.b") gate_b = model.parameters()[i];
    }
    gate_w->value.fill(0.0);

    gate_b->value.fill(50.0);  // g ~ 1: fused == cur
    ad::Var fused = model.temporal_fuse(prev, cur);
    for (int64_t i = 0; i < fused->value.numel(); ++i)
        CHECK(fused->value[i] == doctest::Approx(cur_t[i]).epsilon(1e-9));

    gate_b->value.fill(-50.0);  // g ~ 0: fused == prev_aligned
    fused = model.temporal_fuse(prev, cur);
    for (int64_t i = 0; i < fused->value.numel(); ++i)
        CHECK(fused->value[i] == doctest::Approx(prev_t[i]).epsilon(1e-9));

    gate_b->value.fill(0.3);  // generic gate: convex combination
    fused = model.temporal_fuse(prev, cur);
    for (int64_t i = 0; i < fused->value.numel(); ++i) {
        CHECK(fused->value[i] >= std::min(cur_t[i], prev_t[i]) - 1e-12);
        CHECK(fused->value[i] <= std::max(cur_t[i], prev_t[i]) + 1e-12);
    }

    Tensor bad({mc.c2, 8, 8});
    CHECK_THROWS_AS(model.temporal_fuse(ad::constant(bad), cur), DimensionError);
}

TEST_CASE("perspective_loss delegates to the dice loss") {
    Rng rng(10);
    std::vector<ad::Var> p_v;
    std::vector<Tensor> targets;
    Tensor all_p({0, 4, 5});
    std::vector<double> pdata, ldata;
    for (int v = 0; v < 3; ++v) {
        Tensor p({2, 4, 5}), l({2, 4, 5});
        for (int64_t i = 0; i < p.numel(); ++i) {
            p[i] = rng.uniform(0.05, 0.95);
            l[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;
            pdata.push_back(p[i]);
            ldata.push_back(l[i]);
        }
        p_v.push_back(ad::constant(p));
        targets.push_back(l);
    }
    double via_op = ad::scalar_value(net::perspective_loss(p_v, targets, 1.0));
    Tensor pc({6, 4, 5}, pdata), lc({6, 4, 5}, ldata);
    CHECK(via_op == doctest::Approx(pgcm::dice_loss(pc, lc, 1.0)).epsilon(1e-12));
}

TEST_CASE("temporal_alignment_loss closed forms") {
    geom::BevGrid grid = geom::BevGrid::make(-8, 8, -8, 8, 1.0);
    geom::EgoPose origin = geom::EgoPose::make(0, 0, 0);
    Rng rng(11);
    Tensor feat({3, 16, 16});
    for (int64_t i = 0; i < feat.numel(); ++i) feat[i] = rng.uniform(-1, 1);

    // identical features, zero motion
    double zero = ad::scalar_value(
        net::temporal_alignment_loss(feat, origin, ad::constant(feat), origin, grid));
    CHECK(zero == 0.0);

    // disjoint windows
    geom::EgoPose far = geom::EgoPose::make(100, 0, 0);
    double disjoint = ad::scalar_value(
        net::temporal_alignment_loss(feat, far, ad::constant(feat), origin, grid));
    CHECK(disjoint == 0.0);

    // constant offset, full overlap
    Tensor shifted = feat;
    for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 0.37;
    double delta = ad::scalar_value(
        net::temporal_alignment_loss(feat, origin, ad::constant(shifted), origin, grid));
    CHECK(delta == doctest::Approx(0.37).epsilon(1e-9));
}

TEST_CASE("gradients reach the perspective encoder") {
    ModelConfig mc = tiny_config();
    SegNet model(mc);
    auto rig = tiny_rig(mc);
    Rng rng(12);
    auto images = random_images(rng, mc);
    ModelState state;
    model.zero_grad();
    ForwardOutput out = model.forward(images, rig, geom::EgoPose::make(0, 0, 0), state);
    Tensor labels({6, 32, 32});
    for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;
    ad::Var loss = pgcm::weighted_dice_loss(ad::sigmoid(out.d_m), labels, 0.9, 1.0);
    ad::backward(loss);
    double norm = 0;
    for (int64_t i = 0; i < model.parameters()[0]->grad.numel(); ++i)
        norm += model.parameters()[0]->grad[i] * model.parameters()[0]->grad[i];
    CHECK(norm > 0.0);
}

TEST_CASE("checkpoint round trip preserves parameters bitwise") {
    namespace fs = std::filesystem;
    ModelConfig mc = tiny_config(55);
    SegNet model(mc);
    std::string path = (fs::temp_directory_path() / "nrseg_ckpt_test.bin").string();
    model.save_checkpoint(path, "student", 42, "cafe");

    ModelConfig rc = SegNet::read_checkpoint_config(path);
    CHECK(rc.k == mc.k);
    CHECK(rc.c2 == mc.c2);
    CHECK(rc.partition.clusters == mc.partition.clusters);

    SegNet restored(rc);
    std::string hash = restored.load_checkpoint(path);
    CHECK(hash == "cafe");
    CHECK(restored.parameter_hash() == model.parameter_hash());

    // view-count mismatch raises
    Rng rng(1);
    auto images = random_images(rng, mc);
    images.pop_back();
    ModelState state;
    CHECK_THROWS_AS(model.forward(images, tiny_rig(mc), geom::EgoPose::make(0, 0, 0), state),
                    DimensionError);
}
