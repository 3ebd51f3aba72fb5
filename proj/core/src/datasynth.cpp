#include "nrseg/datasynth.hpp"

#include <algorithm>
#include <cmath>

namespace nrseg::synth {

namespace {

struct Path {
    std::vector<double> xs, ys, hs, ss;  // samples, headings, cumulative arclength

    double length() const { return ss.empty() ? 0.0 : ss.back(); }

    void point_at(double s, double& x, double& y, double& heading) const {
        if (s <= ss.front()) {
            x = xs.front();
            y = ys.front();
            heading = hs.front();
            return;
        }
        if (s >= ss.back()) {
            x = xs.back();
            y = ys.back();
            heading = hs.back();
            return;
        }
        size_t hi = static_cast<size_t>(
            std::lower_bound(ss.begin(), ss.end(), s) - ss.begin());
        size_t lo = hi - 1;
        double f = (s - ss[lo]) / (ss[hi] - ss[lo]);
        x = xs[lo] + f * (xs[hi] - xs[lo]);
        y = ys[lo] + f * (ys[hi] - ys[lo]);
        heading = hs[lo];
    }
};

Path make_arc_path(double x0, double y0, double heading0, double curvature, double total_len,
                   double step = 0.5) {
    Path p;
    double x = x0, y = y0, h = heading0, s = 0.0;
    while (s <= total_len + 1e-9) {
        p.xs.push_back(x);
        p.ys.push_back(y);
        p.hs.push_back(h);
        p.ss.push_back(s);
        x += step * std::cos(h);
        y += step * std::sin(h);
        h += curvature * step;
        s += step;
    }
    return p;
}

struct RoadSpec {
    Path path;
    int lanes = 2;
    double lane_width = 3.0;
    std::vector<double> crossings;                 // arclength sites
    std::vector<std::pair<double, int>> carparks;  // (arclength, side)

    double half_width() const { return lanes * lane_width * 0.5; }
};

struct WorldMap {
    geom::BevGrid grid;
    int k = 6;
    std::vector<uint8_t> data;

    explicit WorldMap(const geom::BevGrid& g)
        : grid(g), data(static_cast<size_t>(6) * g.rows() * g.cols(), 0) {}

    void set(int c, int i, int j) {
        data[(static_cast<size_t>(c) * grid.rows() + i) * grid.cols() + j] = 1;
    }
    void clear(int c, int i, int j) {
        data[(static_cast<size_t>(c) * grid.rows() + i) * grid.cols() + j] = 0;
    }
    uint8_t at(int c, int i, int j) const {
        return data[(static_cast<size_t>(c) * grid.rows() + i) * grid.cols() + j];
    }
    void paint(int c, double x, double y) {
        int i, j;
        if (grid.cell_of(x, y, i, j)) set(c, i, j);
    }
};

// Walk the road in (s, d) path coordinates and stamp class content. Sample
// spacing stays under half a cell even on the outer edge of the tightest arc.
void paint_road(WorldMap& world, const RoadSpec& road) {
    const double ds = 0.2, dd = 0.2;
    const double half = road.half_width();
    const double walk_in = half + 1.0, walk_out = half + 2.5;
    const double park_in = half + 1.0, park_out = half + 6.0;
    const double park_len = 10.0;

    for (double s = 0.0; s <= road.path.length(); s += ds) {
        double x, y, h;
        road.path.point_at(s, x, y, h);
        double nx = -std::sin(h), ny = std::cos(h);

        bool in_crossing = false, in_stop = false;
        for (double c : road.crossings) {
            if (s >= c && s <= c + 2.5) in_crossing = true;
            if (s >= c - 1.5 && s <= c - 1.0) in_stop = true;
        }

        for (double d = -park_out; d <= park_out; d += dd) {
            double px = x + d * nx, py = y + d * ny;
            double ad = std::fabs(d);
            if (ad <= half) {
                world.paint(kDrivable, px, py);
                if (in_crossing) world.paint(kCrossing, px, py);
                if (in_stop) world.paint(kStopLine, px, py);
                for (int b = 1; b < road.lanes; ++b) {
                    double bd = -half + b * road.lane_width;
                    if (std::fabs(d - bd) <= 0.22) world.paint(kDivider, px, py);
                }
            } else if (ad >= walk_in && ad <= walk_out) {
                world.paint(kWalkway, px, py);
            }
            for (const auto& park : road.carparks) {
                if (s >= park.first && s <= park.first + park_len && d * park.second >= park_in &&
                    d * park.second <= park_out)
                    world.paint(kCarpark, px, py);
            }
        }
    }
}

void enforce_class_semantics(WorldMap& world) {
    int rows = world.grid.rows(), cols = world.grid.cols();
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            bool drivable = world.at(kDrivable, i, j);
            if (drivable) {
                world.clear(kWalkway, i, j);
            } else {
                world.clear(kCrossing, i, j);
                world.clear(kStopLine, i, j);
                world.clear(kDivider, i, j);
            }
        }
    }
}

struct Rgb {
    uint8_t r, g, b;
};

constexpr Rgb kSky{130, 170, 215};
constexpr Rgb kOffRoad{70, 80, 70};
constexpr Rgb kVehicle{200, 40, 40};
// indexed by ClassId
constexpr Rgb kClassColor[6] = {
    {95, 95, 100},    // drivable
    {235, 235, 235},  // crossing
    {205, 140, 60},   // walkway
    {220, 60, 120},   // stop line
    {60, 120, 200},   // carpark
    {240, 220, 70},   // divider
};
// draw order: later wins
constexpr int kPriority[6] = {kDrivable, kCarpark, kWalkway, kCrossing, kStopLine, kDivider};

geom::CameraCalib jitter_calib(const geom::CameraCalib& calib, double dyaw, double dpitch) {
    // Small rotation in the camera frame: pan about y (down), tilt about x.
    double cy = std::cos(dyaw), sy = std::sin(dyaw);
    double cp = std::cos(dpitch), sp = std::sin(dpitch);
    double ry[9] = {cy, 0, sy, 0, 1, 0, -sy, 0, cy};
    double rx[9] = {1, 0, 0, 0, cp, -sp, 0, sp, cp};
    double dr[9];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            dr[i * 3 + j] = 0.0;
            for (int a = 0; a < 3; ++a) dr[i * 3 + j] += rx[i * 3 + a] * ry[a * 3 + j];
        }
    geom::CameraCalib out = calib;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 4; ++j) {
            double acc = 0.0;
            for (int a = 0; a < 3; ++a) acc += dr[i * 3 + a] * calib.extrinsics[a * 4 + j];
            out.extrinsics[static_cast<size_t>(i) * 4 + j] = acc;
        }
    }
    out.validate();
    return out;
}

}  // namespace

const std::vector<std::string>& class_names() {
    static const std::vector<std::string> names = {"drivable", "crossing", "walkway",
                                                   "stop_line", "carpark", "divider"};
    return names;
}

std::vector<geom::CameraCalib> make_rig(int num_cams, int image_w, int image_h, double fov_deg,
                                        double cam_height, double cam_pitch_deg) {
    if (num_cams < 1) throw ValidationError("rig: needs at least one camera");
    std::vector<geom::CameraCalib> rig;
    double fov = fov_deg * kPi / 180.0;
    double fx = image_w * 0.5 / std::tan(fov * 0.5);
    double fy = fx;
    // six cameras give the full 360 at 60 degree spacing; other counts fan
    // out symmetrically around the forward axis
    for (int c = 0; c < num_cams; ++c) {
        double yaw;
        if (num_cams == 6) {
            yaw = c * kPi / 3.0;
            if (yaw > kPi) yaw -= 2.0 * kPi;
        } else {
            yaw = (c - (num_cams - 1) * 0.5) * fov * 0.92;
        }
        rig.push_back(geom::make_pinhole_camera(0.0, 0.0, cam_height, yaw,
                                                cam_pitch_deg * kPi / 180.0, fx, fy,
                                                image_w * 0.5, image_h * 0.5, image_w, image_h));
    }
    return rig;
}

Scene generate_scene(uint64_t seed, const SceneParams& params) {
    if (params.frames < 1) throw ValidationError("scene: frames must be >= 1");
    Rng rng(seed);

    double window_reach =
        std::hypot(std::max(std::fabs(params.grid.x_min), std::fabs(params.grid.x_max)),
                   std::max(std::fabs(params.grid.y_min), std::fabs(params.grid.y_max))) +
        8.0;
    double traj_len = params.frames * params.step_m;
    double total_len = traj_len + 2.0 * window_reach;

    RoadSpec road;
    road.lanes = static_cast<int>(rng.uniform_int(params.lanes_min, params.lanes_max));
    road.lane_width = params.lane_width;
    double curvature =
        params.force_straight ? 0.0 : rng.uniform(-params.curvature_max, params.curvature_max);
    road.path = make_arc_path(0.0, 0.0, 0.0, curvature, total_len);

    for (double s = 10.0; s < total_len - 5.0; s += 5.0)
        if (!params.force_straight && rng.bernoulli(params.crossing_rate * 5.0))
            road.crossings.push_back(s);
    if (!params.force_straight && rng.bernoulli(params.carpark_prob)) {
        double s = rng.uniform(window_reach - 15.0, window_reach + traj_len + 5.0);
        road.carparks.push_back({s, rng.bernoulli(0.5) ? 1 : -1});
    }

    bool has_secondary = !params.force_straight && rng.bernoulli(params.intersection_prob);
    RoadSpec secondary;
    if (has_secondary) {
        double s_junction = window_reach + rng.uniform(0.2, 0.8) * traj_len;
        double jx, jy, jh;
        road.path.point_at(s_junction, jx, jy, jh);
        double side_len = window_reach;
        secondary.lanes = 2;
        secondary.lane_width = params.lane_width;
        double ph = jh + kPi / 2.0;
        secondary.path = make_arc_path(jx - side_len * std::cos(ph), jy - side_len * std::sin(ph),
                                       ph, 0.0, 2.0 * side_len);
    }

    // world bounds: every pose window corner plus the road extents
    double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
    auto absorb = [&](double x, double y, double pad) {
        min_x = std::min(min_x, x - pad);
        max_x = std::max(max_x, x + pad);
        min_y = std::min(min_y, y - pad);
        max_y = std::max(max_y, y + pad);
    };
    for (size_t i = 0; i < road.path.xs.size(); ++i)
        absorb(road.path.xs[i], road.path.ys[i], 14.0);
    if (has_secondary)
        for (size_t i = 0; i < secondary.path.xs.size(); ++i)
            absorb(secondary.path.xs[i], secondary.path.ys[i], 14.0);
    for (int t = 0; t < params.frames; ++t) {
        double x, y, h;
        road.path.point_at(window_reach + t * params.step_m, x, y, h);
        absorb(x, y, window_reach);
    }
    double res = params.grid.resolution;
    min_x = std::floor(min_x / res) * res;
    min_y = std::floor(min_y / res) * res;
    max_x = std::ceil(max_x / res) * res;
    max_y = std::ceil(max_y / res) * res;
    WorldMap world(geom::BevGrid::make(min_x, max_x, min_y, max_y, res));

    paint_road(world, road);
    if (has_secondary) paint_road(world, secondary);
    enforce_class_semantics(world);

    Scene scene;
    scene.seed = seed;
    scene.grid = params.grid;
    scene.k = 6;
    scene.frames = params.frames;
    scene.rig = make_rig(params.num_cams, params.image_w, params.image_h, params.fov_deg,
                         params.cam_height, params.cam_pitch_deg);

    // ego drives the right lane centre
    double ego_d = -road.lane_width * 0.5;
    std::vector<geom::EgoPose> traj;
    for (int t = 0; t < params.frames; ++t) {
        double x, y, h;
        road.path.point_at(window_reach + t * params.step_m, x, y, h);
        traj.push_back(geom::EgoPose::make(x - std::sin(h) * ego_d, y + std::cos(h) * ego_d, h));
    }
    scene.trajectory = traj;

    // world-frame boxes parked in lanes away from the ego lane
    struct WorldBox {
        double x, y, yaw;
    };
    std::vector<WorldBox> world_boxes;
    for (int b = 0; b < params.num_boxes; ++b) {
        double s = rng.uniform(window_reach - 10.0, window_reach + traj_len + 12.0);
        int lane = static_cast<int>(rng.uniform_int(0, road.lanes - 1));
        double d = -road.half_width() + (lane + 0.5) * road.lane_width;
        if (std::fabs(d - ego_d) < 0.6 * road.lane_width) continue;
        double x, y, h;
        road.path.point_at(s, x, y, h);
        world_boxes.push_back({x - std::sin(h) * d, y + std::cos(h) * d, h});
    }

    for (int t = 0; t < params.frames; ++t) {
        const geom::EgoPose& pose = traj[static_cast<size_t>(t)];
        geom::BevLabel label(scene.grid, 6);
        double cp = std::cos(pose.yaw), sp = std::sin(pose.yaw);
        for (int i = 0; i < scene.grid.rows(); ++i) {
            double ex = scene.grid.center_x(i);
            for (int j = 0; j < scene.grid.cols(); ++j) {
                double ey = scene.grid.center_y(j);
                double wx = cp * ex - sp * ey + pose.x;
                double wy = sp * ex + cp * ey + pose.y;
                int wi, wj;
                if (!world.grid.cell_of(wx, wy, wi, wj)) continue;
                for (int c = 0; c < 6; ++c)
                    if (world.at(c, wi, wj)) label.set(c, i, j, 1);
            }
        }
        scene.bev_labels.push_back(label);

        std::vector<geom::Box3D> frame_boxes;
        for (const auto& wb : world_boxes) {
            double dx = wb.x - pose.x, dy = wb.y - pose.y;
            geom::Box3D box;
            box.cx = cp * dx + sp * dy;
            box.cy = -sp * dx + cp * dy;
            box.l = 4.2;
            box.w = 1.9;
            box.h = 1.6;
            box.cz = box.h * 0.5;
            box.yaw = wrap_angle(wb.yaw - pose.yaw);
            frame_boxes.push_back(box);
        }
        scene.boxes.push_back(frame_boxes);
        scene.render_rig.push_back(scene.rig);
    }
    scene.render_labels = scene.bev_labels;
    return scene;
}

RenderedFrame render_frame(const Scene& scene, int t, double quality_noise) {
    if (t < 0 || t >= scene.frames) throw ValidationError("render_frame: frame index out of range");
    const geom::BevLabel& label = scene.render_labels[static_cast<size_t>(t)];
    RenderedFrame out;
    Rng noise(fnv1a64(&t, sizeof(t), scene.seed ^ 0x9e3779b97f4a7c15ull));

    for (size_t cam = 0; cam < scene.render_rig[static_cast<size_t>(t)].size(); ++cam) {
        const geom::CameraCalib& calib = scene.render_rig[static_cast<size_t>(t)][cam];
        MaskImage box_mask(calib.height, calib.width);
        for (const auto& box : scene.boxes[static_cast<size_t>(t)])
            geom::rasterize_box_silhouette(box, calib, box_mask);

        geom::GroundRayCaster caster(calib);
        ImageU8 img(calib.height, calib.width);
        std::vector<MaskImage> masks(6, MaskImage(calib.height, calib.width));

        for (int py = 0; py < calib.height; ++py) {
            for (int px = 0; px < calib.width; ++px) {
                Rgb color = kSky;
                if (box_mask.at(py, px)) {
                    color = kVehicle;
                } else {
                    int ci, cj;
                    double gx, gy;
                    if (caster.ground_point(px + 0.5, py + 0.5, gx, gy)) {
                        color = kOffRoad;
                        if (label.grid.cell_of(gx, gy, ci, cj)) {
                            for (int p = 0; p < 6; ++p) {
                                int c = kPriority[p];
                                if (label.at(c, ci, cj)) {
                                    color = kClassColor[c];
                                    masks[static_cast<size_t>(c)].set(py, px, 1);
                                }
                            }
                        }
                    }
                }
                uint8_t* dst = img.px(py, px);
                dst[0] = color.r;
                dst[1] = color.g;
                dst[2] = color.b;
            }
        }

        if (quality_noise > 0.0) {
            for (auto& v : img.data) {
                double jittered = v + noise.uniform(-1.0, 1.0) * quality_noise * 255.0;
                v = static_cast<uint8_t>(std::clamp(jittered, 0.0, 255.0));
            }
        }
        out.views.push_back(std::move(img));
        out.masks.push_back(std::move(masks));
    }
    return out;
}

Scene inject_drift(const Scene& scene, const NoiseSpec& spec) {
    Scene out = scene;
    if (spec.is_zero()) return out;
    int rows = scene.grid.rows(), cols = scene.grid.cols();

    for (int t = 0; t < scene.frames; ++t) {
        uint64_t frame_seed = fnv1a64(&t, sizeof(t), spec.seed ^ (scene.seed * 0x100000001b3ull));
        Rng rng(frame_seed);
        geom::BevLabel corrupted = scene.bev_labels[static_cast<size_t>(t)];

        if (spec.dropout_rate > 0.0) {
            const int tile = 8;
            for (int c = 0; c < 6; ++c) {
                for (int ti = 0; ti < rows; ti += tile) {
                    for (int tj = 0; tj < cols; tj += tile) {
                        if (!rng.bernoulli(spec.dropout_rate)) continue;
                        for (int i = ti; i < std::min(ti + tile, rows); ++i)
                            for (int j = tj; j < std::min(tj + tile, cols); ++j)
                                corrupted.set(c, i, j, 0);
                    }
                }
            }
        }

        if (spec.warp_sigma > 0.0) {
            const int nodes = 6;
            std::vector<double> dx(nodes * nodes), dy(nodes * nodes);
            for (int n = 0; n < nodes * nodes; ++n) {
                dx[static_cast<size_t>(n)] = rng.normal(0.0, spec.warp_sigma);
                dy[static_cast<size_t>(n)] = rng.normal(0.0, spec.warp_sigma);
            }
            auto field = [&](const std::vector<double>& f, double i, double j) {
                double fi = i / (rows - 1) * (nodes - 1);
                double fj = j / (cols - 1) * (nodes - 1);
                int i0 = std::min(static_cast<int>(fi), nodes - 2);
                int j0 = std::min(static_cast<int>(fj), nodes - 2);
                double ai = fi - i0, aj = fj - j0;
                return f[static_cast<size_t>(i0 * nodes + j0)] * (1 - ai) * (1 - aj) +
                       f[static_cast<size_t>((i0 + 1) * nodes + j0)] * ai * (1 - aj) +
                       f[static_cast<size_t>(i0 * nodes + j0 + 1)] * (1 - ai) * aj +
                       f[static_cast<size_t>((i0 + 1) * nodes + j0 + 1)] * ai * aj;
            };
            geom::BevLabel warped(scene.grid, 6);
            for (int i = 0; i < rows; ++i) {
                for (int j = 0; j < cols; ++j) {
                    int si = static_cast<int>(std::lround(i + field(dx, i, j)));
                    int sj = static_cast<int>(std::lround(j + field(dy, i, j)));
                    if (si < 0 || sj < 0 || si >= rows || sj >= cols) continue;
                    for (int c = 0; c < 6; ++c)
                        if (corrupted.at(c, si, sj)) warped.set(c, i, j, 1);
                }
            }
            corrupted = warped;
        }

        out.render_labels[static_cast<size_t>(t)] = corrupted;

        if (spec.drift_px_sigma > 0.0) {
            for (size_t cam = 0; cam < scene.rig.size(); ++cam) {
                const geom::CameraCalib& base = scene.rig[cam];
                double dyaw = rng.normal(0.0, spec.drift_px_sigma) / base.intrinsics[0];
                double dpitch = rng.normal(0.0, spec.drift_px_sigma) / base.intrinsics[4];
                out.render_rig[static_cast<size_t>(t)][cam] = jitter_calib(base, dyaw, dpitch);
            }
        }
    }
    return out;
}

NoiseSpec noise_preset(const std::string& level, uint64_t seed) {
    NoiseSpec spec;
    spec.seed = seed;
    if (level == "none") {
        return spec;
    } else if (level == "low") {
        spec.warp_sigma = 0.8;
        spec.dropout_rate = 0.05;
        spec.drift_px_sigma = 1.0;
    } else if (level == "mid") {
        spec.warp_sigma = 1.8;
        spec.dropout_rate = 0.12;
        spec.drift_px_sigma = 2.5;
    } else if (level == "high") {
        spec.warp_sigma = 3.5;
        spec.dropout_rate = 0.30;
        spec.drift_px_sigma = 5.0;
    } else {
        throw ValidationError("unknown noise level: " + level);
    }
    return spec;
}

}  // namespace nrseg::synth
