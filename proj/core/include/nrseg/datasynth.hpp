#ifndef NRSEG_DATASYNTH_HPP
#define NRSEG_DATASYNTH_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "nrseg/camera_geometry.hpp"
#include "nrseg/mask.hpp"

namespace nrseg::synth {

struct ImageU8 {
    int h = 0, w = 0;
    std::vector<uint8_t> data;  // interleaved RGB

    ImageU8() = default;
    ImageU8(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_ * 3, 0) {}
    uint8_t* px(int y, int x) { return data.data() + (static_cast<size_t>(y) * w + x) * 3; }
    const uint8_t* px(int y, int x) const {
        return data.data() + (static_cast<size_t>(y) * w + x) * 3;
    }
};

enum ClassId {
    kDrivable = 0,
    kCrossing = 1,
    kWalkway = 2,
    kStopLine = 3,
    kCarpark = 4,
    kDivider = 5,
};
const std::vector<std::string>& class_names();

struct SceneParams {
    int frames = 8;
    double step_m = 2.0;  // ego advance per frame

    int lanes_min = 2, lanes_max = 3;
    double lane_width = 3.0;
    double curvature_max = 0.012;    // 1/m
    double intersection_prob = 0.0;  // perpendicular secondary road
    double carpark_prob = 0.0;
    double crossing_rate = 0.02;     // expected crossings per metre of path
    int num_boxes = 3;
    bool force_straight = false;     // zero curvature, no side content randomness removed

    int num_cams = 6;
    int image_w = 352, image_h = 128;
    double fov_deg = 70.0;
    double cam_height = 1.6;
    double cam_pitch_deg = 6.0;

    geom::BevGrid grid = geom::BevGrid::make(-50, 50, -50, 50, 0.5);
};

// Drift-noise model standing in for world-model generation error: the
// rendered world is perturbed while the stored annotation stays original.
struct NoiseSpec {
    double drift_px_sigma = 0.0;  // per-camera projective jitter, px
    double dropout_rate = 0.0;    // fraction of content tiles removed
    double warp_sigma = 0.0;      // low-frequency elastic warp amplitude, cells
    uint64_t seed = 0;

    bool is_zero() const {
        return drift_px_sigma == 0.0 && dropout_rate == 0.0 && warp_sigma == 0.0;
    }
};

struct Scene {
    uint64_t seed = 0;
    geom::BevGrid grid;
    int k = 6;
    std::vector<geom::CameraCalib> rig;
    std::vector<geom::EgoPose> trajectory;        // world frame, one per frame
    std::vector<geom::BevLabel> bev_labels;       // annotation, ego window
    std::vector<std::vector<geom::Box3D>> boxes;  // ego frame, per frame

    // Rendered world; identical to the annotation until inject_drift.
    std::vector<geom::BevLabel> render_labels;
    std::vector<std::vector<geom::CameraCalib>> render_rig;

    int frames = 0;
};

std::vector<geom::CameraCalib> make_rig(int num_cams, int image_w, int image_h, double fov_deg,
                                        double cam_height, double cam_pitch_deg);

Scene generate_scene(uint64_t seed, const SceneParams& params);

struct RenderedFrame {
    std::vector<ImageU8> views;
    std::vector<std::vector<MaskImage>> masks;  // [camera][class]
};

// Flat-shaded raster through each camera of the (possibly corrupted) render
// world; masks are the exact class rasterizations minus box occlusion.
// quality_noise adds photometric noise to RGB only.
RenderedFrame render_frame(const Scene& scene, int t, double quality_noise = 0.0);

Scene inject_drift(const Scene& scene, const NoiseSpec& spec);

// Documented presets: none / low / mid / high.
NoiseSpec noise_preset(const std::string& level, uint64_t seed);

}  // namespace nrseg::synth

#endif  // NRSEG_DATASYNTH_HPP
