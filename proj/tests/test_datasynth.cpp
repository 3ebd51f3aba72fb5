#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <nrseg/camera_geometry.hpp>
#include <nrseg/common.hpp>
#include <nrseg/datasynth.hpp>
#include <nrseg/pgcm.hpp>

using namespace nrseg;
using namespace nrseg::synth;

namespace {

SceneParams toy_params(bool straight = false) {
    SceneParams p;
    p.frames = 3;
    p.num_cams = 3;
    p.image_w = 160;
    p.image_h = 96;
    p.grid = geom::BevGrid::make(-24, 24, -24, 24, 0.5);
    p.carpark_prob = 0.6;
    p.crossing_rate = 0.04;
    p.force_straight = straight;
    return p;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<size_t> idx(v.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        for (size_t i = 0; i < idx.size(); ++i) r[idx[i]] = static_cast<double>(i);
        return r;
    };
    std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= ra.size();
    mb /= rb.size();
    double num = 0, da = 0, db = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return num / std::sqrt(da * db);
}

pgcm::ConsistencyScore score_frame(const Scene& scene, int t) {
    RenderedFrame rf = render_frame(scene, t);
    std::vector<MaskImage> refs, syns;
    for (size_t cam = 0; cam < scene.rig.size(); ++cam) {
        MaskImage m_o, m_c;
        geom::render_projected_masks(scene.bev_labels[static_cast<size_t>(t)],
                                     scene.boxes[static_cast<size_t>(t)], scene.rig[cam],
                                     {kDrivable}, m_o, m_c);
        refs.push_back(geom::compose_reference_mask(m_o, m_c));
        syns.push_back(rf.masks[cam][kDrivable]);
    }
    return pgcm::frame_consistency_score(refs, syns, 0.05);
}

}  // namespace

TEST_CASE("generation is deterministic") {
    Scene a = generate_scene(42, toy_params());
    Scene b = generate_scene(42, toy_params());
    REQUIRE(a.frames == b.frames);
    for (int t = 0; t < a.frames; ++t) {
        CHECK(a.bev_labels[t].data == b.bev_labels[t].data);
        CHECK(a.trajectory[t].x == b.trajectory[t].x);
        CHECK(a.boxes[t].size() == b.boxes[t].size());
    }
    RenderedFrame ra = render_frame(a, 0), rb = render_frame(b, 0);
    for (size_t cam = 0; cam < ra.views.size(); ++cam)
        CHECK(ra.views[cam].data == rb.views[cam].data);
}

TEST_CASE("straight road has constant row-wise drivable width") {
    Scene scene = generate_scene(7, toy_params(true));
    const geom::BevLabel& label = scene.bev_labels[0];
    std::vector<int> widths;
    for (int i = 0; i < label.grid.rows(); ++i) {
        int w = 0;
        for (int j = 0; j < label.grid.cols(); ++j) w += label.at(kDrivable, i, j);
        widths.push_back(w);
    }
    for (int w : widths) CHECK(w == widths[0]);
    CHECK(widths[0] > 0);
}

TEST_CASE("class semantics hold across seeds") {
    for (uint64_t seed = 100; seed < 130; ++seed) {
        SceneParams p = toy_params();
        p.frames = 1;
        p.intersection_prob = 0.4;
        Scene scene = generate_scene(seed, p);
        const geom::BevLabel& label = scene.bev_labels[0];
        for (int i = 0; i < label.grid.rows(); ++i) {
            for (int j = 0; j < label.grid.cols(); ++j) {
                if (label.at(kCrossing, i, j)) CHECK(label.at(kDrivable, i, j));
                if (label.at(kDivider, i, j)) CHECK(label.at(kDrivable, i, j));
                if (label.at(kWalkway, i, j)) CHECK(!label.at(kDrivable, i, j));
            }
        }
    }
}

TEST_CASE("empty scene renders background and empty masks") {
    Scene scene = generate_scene(5, toy_params());
    for (auto& label : scene.render_labels) std::fill(label.data.begin(), label.data.end(), 0);
    scene.boxes.assign(static_cast<size_t>(scene.frames), {});
    RenderedFrame rf = render_frame(scene, 0);
    for (size_t cam = 0; cam < rf.views.size(); ++cam) {
        for (int c = 0; c < 6; ++c) CHECK(rf.masks[cam][static_cast<size_t>(c)].count() == 0);
        // only sky and off-road ground colors remain
        const ImageU8& img = rf.views[cam];
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                const uint8_t* px = img.px(y, x);
                bool sky = px[0] == 130 && px[1] == 170 && px[2] == 215;
                bool ground = px[0] == 70 && px[1] == 80 && px[2] == 70;
                CHECK((sky || ground));
            }
    }
}

TEST_CASE("dual path: rendered masks equal projected reference masks exactly") {
    Scene scene = generate_scene(21, toy_params());
    for (int t = 0; t < scene.frames; ++t) {
        RenderedFrame rf = render_frame(scene, t);
        for (size_t cam = 0; cam < scene.rig.size(); ++cam) {
            for (int c = 0; c < 6; ++c) {
                MaskImage m_o, m_c;
                geom::render_projected_masks(scene.bev_labels[static_cast<size_t>(t)],
                                             scene.boxes[static_cast<size_t>(t)], scene.rig[cam],
                                             {c}, m_o, m_c);
                MaskImage m_r = geom::compose_reference_mask(m_o, m_c);
                CHECK(pgcm::mask_iou(m_r, rf.masks[cam][static_cast<size_t>(c)]) == 1.0);
            }
        }
    }
}

TEST_CASE("boxes occlude road masks") {
    SceneParams p = toy_params();
    p.num_boxes = 6;
    Scene scene = generate_scene(33, p);
    int t = 0;
    RenderedFrame with_boxes = render_frame(scene, t);
    Scene no_boxes = scene;
    no_boxes.boxes.assign(static_cast<size_t>(scene.frames), {});
    RenderedFrame without = render_frame(no_boxes, t);
    bool occluded_somewhere = false;
    for (size_t cam = 0; cam < scene.rig.size(); ++cam) {
        MaskImage box_mask(scene.rig[cam].height, scene.rig[cam].width);
        for (const auto& box : scene.boxes[static_cast<size_t>(t)])
            geom::rasterize_box_silhouette(box, scene.rig[cam], box_mask);
        for (size_t i = 0; i < box_mask.data.size(); ++i) {
            if (!box_mask.data[i]) continue;
            CHECK(with_boxes.masks[cam][kDrivable].data[i] == 0);
            if (without.masks[cam][kDrivable].data[i]) occluded_somewhere = true;
        }
    }
    CHECK(occluded_somewhere);
}

TEST_CASE("zero noise spec leaves the scene untouched, R stays 1") {
    Scene scene = generate_scene(11, toy_params());
    NoiseSpec zero;
    zero.seed = 99;
    Scene out = inject_drift(scene, zero);
    for (int t = 0; t < scene.frames; ++t)
        CHECK(out.render_labels[static_cast<size_t>(t)].data ==
              scene.render_labels[static_cast<size_t>(t)].data);
    CHECK(score_frame(out, 0).value == 1.0);
}

TEST_CASE("full dropout erases dividers from rendered masks") {
    Scene scene = generate_scene(13, toy_params(true));
    NoiseSpec spec;
    spec.dropout_rate = 1.0;
    spec.seed = 5;
    Scene out = inject_drift(scene, spec);
    RenderedFrame rf = render_frame(out, 0);
    for (size_t cam = 0; cam < out.rig.size(); ++cam)
        CHECK(rf.masks[cam][kDivider].count() == 0);

    // reference projection of the untouched annotation still has dividers
    MaskImage m_o, m_c;
    bool any = false;
    for (size_t cam = 0; cam < out.rig.size(); ++cam) {
        geom::render_projected_masks(out.bev_labels[0], out.boxes[0], out.rig[cam], {kDivider},
                                     m_o, m_c);
        if (geom::compose_reference_mask(m_o, m_c).count() > 0) any = true;
    }
    CHECK(any);
}

TEST_CASE("consistency score decreases with warp amplitude") {
    // fixed scene, one noise seed per sweep point; the range stays below ~2
    // cells, past which long roads are self-similar along their axis and the
    // trend saturates
    SceneParams p = toy_params();
    p.frames = 4;
    Scene scene = generate_scene(500, p);
    std::vector<double> sigmas, scores;
    for (int i = 0; i < 10; ++i) {
        double sigma = 0.2 + 0.2 * i;
        NoiseSpec spec;
        spec.warp_sigma = sigma;
        spec.seed = 900 + static_cast<uint64_t>(i);
        Scene corrupted = inject_drift(scene, spec);
        double mean = 0.0;
        for (int t = 0; t < p.frames; ++t) mean += score_frame(corrupted, t).value;
        sigmas.push_back(sigma);
        scores.push_back(mean / p.frames);
    }
    CHECK(spearman(sigmas, scores) < -0.8);
}

TEST_CASE("inject_drift is deterministic in the spec seed") {
    Scene scene = generate_scene(17, toy_params());
    NoiseSpec spec;
    spec.warp_sigma = 1.5;
    spec.dropout_rate = 0.1;
    spec.drift_px_sigma = 2.0;
    spec.seed = 7;
    Scene a = inject_drift(scene, spec);
    Scene b = inject_drift(scene, spec);
    for (int t = 0; t < scene.frames; ++t) {
        CHECK(a.render_labels[static_cast<size_t>(t)].data ==
              b.render_labels[static_cast<size_t>(t)].data);
        for (size_t cam = 0; cam < scene.rig.size(); ++cam)
            CHECK(a.render_rig[static_cast<size_t>(t)][cam].extrinsics ==
                  b.render_rig[static_cast<size_t>(t)][cam].extrinsics);
    }
}

TEST_CASE("noise presets") {
    CHECK(noise_preset("none", 1).is_zero());
    CHECK(noise_preset("mid", 1).warp_sigma > noise_preset("low", 1).warp_sigma);
    CHECK(noise_preset("high", 1).warp_sigma > noise_preset("mid", 1).warp_sigma);
    CHECK_THROWS_AS(noise_preset("extreme", 1), ValidationError);
}
