#include "nrseg/camera_geometry.hpp"

#include <algorithm>
#include <cmath>

namespace nrseg::geom {

namespace {

constexpr double kNearClip = 1e-6;

struct Vec2d {
    double x, y;
};

// Inclusive point-in-convex-polygon test; `poly` must be CCW. Shared by the
// silhouette rasterizer so all callers make identical boundary decisions.
bool point_in_convex_poly(double px, double py, const std::vector<Vec2d>& poly) {
    size_t n = poly.size();
    if (n < 3) return false;
    for (size_t i = 0; i < n; ++i) {
        const Vec2d& a = poly[i];
        const Vec2d& b = poly[(i + 1) % n];
        double cross = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
        if (cross < -1e-12) return false;
    }
    return true;
}

// Andrew's monotone chain; returns CCW hull.
std::vector<Vec2d> convex_hull(std::vector<Vec2d> pts) {
    if (pts.size() < 3) return pts;
    std::sort(pts.begin(), pts.end(), [](const Vec2d& a, const Vec2d& b) {
        return a.x < b.x || (a.x == b.x && a.y < b.y);
    });
    auto cross = [](const Vec2d& o, const Vec2d& a, const Vec2d& b) {
        return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    };
    std::vector<Vec2d> hull(2 * pts.size());
    size_t k = 0;
    for (size_t i = 0; i < pts.size(); ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    for (size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i - 1]) <= 0) --k;
        hull[k++] = pts[i - 1];
    }
    hull.resize(k > 1 ? k - 1 : k);
    return hull;
}

void mat3_mul_vec(const std::array<double, 9>& m, const double v[3], double out[3]) {
    out[0] = m[0] * v[0] + m[1] * v[1] + m[2] * v[2];
    out[1] = m[3] * v[0] + m[4] * v[1] + m[5] * v[2];
    out[2] = m[6] * v[0] + m[7] * v[1] + m[8] * v[2];
}

}  // namespace

void CameraCalib::validate() const {
    if (width <= 0 || height <= 0) throw ValidationError("calibration: non-positive image size");
    const auto& k = intrinsics;
    if (!(k[0] > 0.0) || !(k[4] > 0.0))
        throw ValidationError("calibration: focal lengths must be positive");
    if (std::fabs(k[3]) > 1e-9 || std::fabs(k[6]) > 1e-9 || std::fabs(k[7]) > 1e-9 ||
        std::fabs(k[8] - 1.0) > 1e-9)
        throw ValidationError("calibration: intrinsics not upper-triangular with unit scale");
    // R^T R == I within 1e-6 (covers singular/aliased extrinsics).
    const auto& t = extrinsics;
    double r[3][3] = {{t[0], t[1], t[2]}, {t[4], t[5], t[6]}, {t[8], t[9], t[10]}};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (int a = 0; a < 3; ++a) dot += r[a][i] * r[a][j];
            double expect = (i == j) ? 1.0 : 0.0;
            if (std::fabs(dot - expect) > 1e-6)
                throw ValidationError("calibration: extrinsic rotation not orthonormal");
        }
    }
    if (std::fabs(t[12]) > 1e-9 || std::fabs(t[13]) > 1e-9 || std::fabs(t[14]) > 1e-9 ||
        std::fabs(t[15] - 1.0) > 1e-9)
        throw ValidationError("calibration: extrinsics last row must be (0,0,0,1)");
}

uint64_t CameraCalib::content_hash() const {
    uint64_t h = fnv1a64(intrinsics.data(), sizeof(double) * 9);
    h = fnv1a64(extrinsics.data(), sizeof(double) * 16, h);
    h = fnv1a64(&width, sizeof(width), h);
    h = fnv1a64(&height, sizeof(height), h);
    return h;
}

BevGrid BevGrid::make(double x_min, double x_max, double y_min, double y_max, double res) {
    if (!(res > 0.0)) throw ValidationError("grid: resolution must be positive");
    if (!(x_max > x_min) || !(y_max > y_min)) throw ValidationError("grid: empty range");
    double rx = (x_max - x_min) / res;
    double ry = (y_max - y_min) / res;
    if (std::fabs(rx - std::round(rx)) > 1e-9 * std::max(1.0, rx) ||
        std::fabs(ry - std::round(ry)) > 1e-9 * std::max(1.0, ry))
        throw ValidationError("grid: range must be an exact multiple of the resolution");
    return BevGrid{x_min, x_max, y_min, y_max, res};
}

bool BevGrid::cell_of(double x, double y, int& i, int& j) const {
    double fi = std::floor((x - x_min) / resolution);
    double fj = std::floor((y - y_min) / resolution);
    if (fi < 0 || fj < 0 || fi >= rows() || fj >= cols()) return false;
    i = static_cast<int>(fi);
    j = static_cast<int>(fj);
    return true;
}

int64_t BevLabel::channel_count(int c) const {
    int64_t n = static_cast<int64_t>(grid.rows()) * grid.cols();
    int64_t s = 0;
    const uint8_t* p = data.data() + static_cast<int64_t>(c) * n;
    for (int64_t i = 0; i < n; ++i) s += p[i];
    return s;
}

Tensor to_tensor(const BevLabel& label) {
    Tensor out({label.k, label.grid.rows(), label.grid.cols()});
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = label.data[static_cast<size_t>(i)];
    return out;
}

void Box3D::validate() const {
    if (!(l > 0.0) || !(w > 0.0) || !(h > 0.0))
        throw ValidationError("box: size must be positive componentwise");
}

CameraCalib make_pinhole_camera(double cam_x, double cam_y, double cam_z, double yaw,
                                double pitch, double fx, double fy, double cx, double cy,
                                int width, int height) {
    double ct = std::cos(yaw), st = std::sin(yaw);
    double cp = std::cos(pitch), sp = std::sin(pitch);
    // Camera axes in ego coordinates: x right, y down, z forward.
    double right[3] = {st, -ct, 0.0};
    double fwd[3] = {cp * ct, cp * st, -sp};
    double down[3] = {-sp * ct, -sp * st, -cp};

    CameraCalib c;
    c.intrinsics = {fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0};
    double center[3] = {cam_x, cam_y, cam_z};
    const double* rows[3] = {right, down, fwd};
    for (int r = 0; r < 3; ++r) {
        double t = 0.0;
        for (int k = 0; k < 3; ++k) {
            c.extrinsics[static_cast<size_t>(r) * 4 + k] = rows[r][k];
            t += rows[r][k] * center[k];
        }
        c.extrinsics[static_cast<size_t>(r) * 4 + 3] = -t;
    }
    c.extrinsics[12] = c.extrinsics[13] = c.extrinsics[14] = 0.0;
    c.extrinsics[15] = 1.0;
    c.width = width;
    c.height = height;
    c.validate();
    return c;
}

PixelProjection project_ego_point(const CameraCalib& calib, double x, double y, double z) {
    const auto& t = calib.extrinsics;
    double xc = t[0] * x + t[1] * y + t[2] * z + t[3];
    double yc = t[4] * x + t[5] * y + t[6] * z + t[7];
    double zc = t[8] * x + t[9] * y + t[10] * z + t[11];
    PixelProjection out;
    out.depth = zc;
    if (zc <= 0.0) {
        out.behind = true;
        return out;
    }
    const auto& k = calib.intrinsics;
    out.u = (k[0] * xc + k[1] * yc + k[2] * zc) / zc;
    out.v = (k[4] * yc + k[5] * zc) / zc;
    return out;
}

PixelProjection project_bev_to_image(int i, int j, const BevGrid& grid, const CameraCalib& calib) {
    calib.validate();
    if (i < 0 || j < 0 || i >= grid.rows() || j >= grid.cols())
        throw ValidationError("project_bev_to_image: cell outside grid");
    return project_ego_point(calib, grid.center_x(i), grid.center_y(j), 0.0);
}

GroundRayCaster::GroundRayCaster(const CameraCalib& calib) {
    calib.validate();
    const auto& k = calib.intrinsics;
    // Closed-form inverse of an upper-triangular K with K[8] == 1.
    double fx = k[0], s = k[1], cx = k[2], fy = k[4], cy = k[5];
    kinv_ = {1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy),
             0.0,      1.0 / fy,      -cy / fy,
             0.0,      0.0,           1.0};
    const auto& t = calib.extrinsics;
    rot_cam_to_ego_ = {t[0], t[4], t[8], t[1], t[5], t[9], t[2], t[6], t[10]};
    double tr[3] = {t[3], t[7], t[11]};
    double o[3];
    mat3_mul_vec(rot_cam_to_ego_, tr, o);
    origin_[0] = -o[0];
    origin_[1] = -o[1];
    origin_[2] = -o[2];
}

bool GroundRayCaster::ground_point(double u, double v, double& x, double& y) const {
    double pix[3] = {u, v, 1.0};
    double d_cam[3];
    mat3_mul_vec(kinv_, pix, d_cam);
    double d_ego[3];
    mat3_mul_vec(rot_cam_to_ego_, d_cam, d_ego);
    if (std::fabs(d_ego[2]) < 1e-15) return false;
    double t = -origin_[2] / d_ego[2];
    if (t <= kNearClip) return false;  // ray parameter equals camera depth here
    x = origin_[0] + t * d_ego[0];
    y = origin_[1] + t * d_ego[1];
    return true;
}

bool GroundRayCaster::pixel_ground_cell(int px, int py, const BevGrid& grid, int& i,
                                        int& j) const {
    double x, y;
    if (!ground_point(px + 0.5, py + 0.5, x, y)) return false;
    return grid.cell_of(x, y, i, j);
}

void rasterize_box_silhouette(const Box3D& box, const CameraCalib& calib, MaskImage& out) {
    box.validate();
    if (out.h != calib.height || out.w != calib.width)
        throw DimensionError("rasterize_box_silhouette: mask size mismatch");
    double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
    const auto& t = calib.extrinsics;
    double cam[8][3];
    int idx = 0;
    for (int sx = -1; sx <= 1; sx += 2) {
        for (int sw = -1; sw <= 1; sw += 2) {
            for (int sz = -1; sz <= 1; sz += 2) {
                double lx = sx * box.l * 0.5, ly = sw * box.w * 0.5, lz = sz * box.h * 0.5;
                double x = box.cx + cy * lx - sy * ly;
                double y = box.cy + sy * lx + cy * ly;
                double z = box.cz + lz;
                cam[idx][0] = t[0] * x + t[1] * y + t[2] * z + t[3];
                cam[idx][1] = t[4] * x + t[5] * y + t[6] * z + t[7];
                cam[idx][2] = t[8] * x + t[9] * y + t[10] * z + t[11];
                ++idx;
            }
        }
    }
    const auto& k = calib.intrinsics;
    auto project = [&](const double p[3], std::vector<Vec2d>& pts) {
        pts.push_back({(k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) / p[2],
                       (k[4] * p[1] + k[5] * p[2]) / p[2]});
    };
    std::vector<Vec2d> pts;
    bool any_behind = false;
    for (auto& c : cam) {
        if (c[2] > kNearClip)
            project(c, pts);
        else
            any_behind = true;
    }
    if (any_behind) {
        // Clip the 12 box edges against the near plane and keep crossings.
        static const int edges[12][2] = {{0, 1}, {2, 3}, {4, 5}, {6, 7}, {0, 2}, {1, 3},
                                         {4, 6}, {5, 7}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
        for (auto& e : edges) {
            double za = cam[e[0]][2], zb = cam[e[1]][2];
            if ((za > kNearClip) == (zb > kNearClip)) continue;
            double s = (kNearClip - za) / (zb - za);
            double p[3] = {cam[e[0]][0] + s * (cam[e[1]][0] - cam[e[0]][0]),
                           cam[e[0]][1] + s * (cam[e[1]][1] - cam[e[0]][1]), kNearClip};
            project(p, pts);
        }
    }
    if (pts.size() < 3) return;
    std::vector<Vec2d> hull = convex_hull(std::move(pts));
    if (hull.size() < 3) return;
    double u_min = hull[0].x, u_max = hull[0].x, v_min = hull[0].y, v_max = hull[0].y;
    for (const auto& p : hull) {
        u_min = std::min(u_min, p.x);
        u_max = std::max(u_max, p.x);
        v_min = std::min(v_min, p.y);
        v_max = std::max(v_max, p.y);
    }
    int px0 = std::max(0, static_cast<int>(std::floor(u_min - 1.0)));
    int px1 = std::min(calib.width - 1, static_cast<int>(std::ceil(u_max + 1.0)));
    int py0 = std::max(0, static_cast<int>(std::floor(v_min - 1.0)));
    int py1 = std::min(calib.height - 1, static_cast<int>(std::ceil(v_max + 1.0)));
    for (int py = py0; py <= py1; ++py)
        for (int px = px0; px <= px1; ++px)
            if (point_in_convex_poly(px + 0.5, py + 0.5, hull)) out.set(py, px, 1);
}

void render_projected_masks(const BevLabel& label, const std::vector<Box3D>& boxes,
                            const CameraCalib& calib, const std::vector<int>& road_classes,
                            MaskImage& m_o, MaskImage& m_c) {
    calib.validate();
    if (road_classes.empty())
        throw ValidationError("render_projected_masks: road_classes must be non-empty");
    for (int c : road_classes)
        if (c < 0 || c >= label.k)
            throw ValidationError("render_projected_masks: road class out of range");

    m_o = MaskImage(calib.height, calib.width);
    m_c = MaskImage(calib.height, calib.width);
    GroundRayCaster caster(calib);
    const BevGrid& grid = label.grid;

    for (int i = 0; i < grid.rows(); ++i) {
        for (int j = 0; j < grid.cols(); ++j) {
            bool labeled = false;
            for (int c : road_classes)
                if (label.at(c, i, j)) {
                    labeled = true;
                    break;
                }
            if (!labeled) continue;

            // Project the 4 cell corners to bound the pixel scan; the fill
            // rule itself is the preimage test (pixel-center ray falls inside
            // this cell), which matches the forward quad exactly.
            double xs[2] = {grid.x_min + i * grid.resolution, grid.x_min + (i + 1) * grid.resolution};
            double ys[2] = {grid.y_min + j * grid.resolution, grid.y_min + (j + 1) * grid.resolution};
            double u_min = 1e300, u_max = -1e300, v_min = 1e300, v_max = -1e300;
            int in_front = 0;
            bool behind = false;
            for (double x : xs) {
                for (double y : ys) {
                    PixelProjection p = project_ego_point(calib, x, y, 0.0);
                    if (p.behind) {
                        behind = true;
                        continue;
                    }
                    ++in_front;
                    u_min = std::min(u_min, p.u);
                    u_max = std::max(u_max, p.u);
                    v_min = std::min(v_min, p.v);
                    v_max = std::max(v_max, p.v);
                }
            }
            if (in_front == 0) continue;
            int px0, px1, py0, py1;
            if (behind) {
                // Cell straddles the camera plane; fall back to a full scan.
                px0 = 0;
                px1 = calib.width - 1;
                py0 = 0;
                py1 = calib.height - 1;
            } else {
                px0 = std::max(0, static_cast<int>(std::floor(u_min - 1.0)));
                px1 = std::min(calib.width - 1, static_cast<int>(std::ceil(u_max + 1.0)));
                py0 = std::max(0, static_cast<int>(std::floor(v_min - 1.0)));
                py1 = std::min(calib.height - 1, static_cast<int>(std::ceil(v_max + 1.0)));
            }
            for (int py = py0; py <= py1; ++py) {
                for (int px = px0; px <= px1; ++px) {
                    if (m_o.at(py, px)) continue;
                    int ci, cj;
                    if (caster.pixel_ground_cell(px, py, grid, ci, cj) && ci == i && cj == j)
                        m_o.set(py, px, 1);
                }
            }
        }
    }

    for (const auto& box : boxes) rasterize_box_silhouette(box, calib, m_c);
}

MaskImage compose_reference_mask(const MaskImage& m_o, const MaskImage& m_c) {
    if (!m_o.same_dims(m_c)) throw DimensionError("compose_reference_mask: dimension mismatch");
    MaskImage out(m_o.h, m_o.w);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = (m_o.data[i] && !m_c.data[i]) ? 1 : 0;
    return out;
}

Tensor ego_align(const Tensor& field, const EgoPose& pose_prev, const EgoPose& pose_cur,
                 const BevGrid& grid, Interp interp) {
    const auto& sh = field.shape();
    if (sh.size() != 3 || sh[1] != grid.rows() || sh[2] != grid.cols())
        throw DimensionError("ego_align: field does not match grid dims");
    int c = sh[0], rows = sh[1], cols = sh[2];

    // Current-frame cell -> same world point expressed in the previous frame.
    double dyaw = pose_cur.yaw - pose_prev.yaw;
    double cd = std::cos(dyaw), sd = std::sin(dyaw);
    double dxw = pose_cur.x - pose_prev.x;
    double dyw = pose_cur.y - pose_prev.y;
    double cp = std::cos(pose_prev.yaw), sp = std::sin(pose_prev.yaw);
    double tx = cp * dxw + sp * dyw;
    double ty = -sp * dxw + cp * dyw;

    Tensor out({c, rows, cols});
    for (int i = 0; i < rows; ++i) {
        double x = grid.center_x(i);
        for (int j = 0; j < cols; ++j) {
            double y = grid.center_y(j);
            double qx = cd * x - sd * y + tx;
            double qy = sd * x + cd * y + ty;
            double fi = (qx - grid.x_min) / grid.resolution - 0.5;
            double fj = (qy - grid.y_min) / grid.resolution - 0.5;
            if (interp == Interp::Nearest) {
                int ri = static_cast<int>(std::floor(fi + 0.5));
                int rj = static_cast<int>(std::floor(fj + 0.5));
                if (ri < 0 || rj < 0 || ri >= rows || rj >= cols) continue;
                for (int ch = 0; ch < c; ++ch) out.at(ch, i, j) = field.at(ch, ri, rj);
            } else {
                int i0 = static_cast<int>(std::floor(fi));
                int j0 = static_cast<int>(std::floor(fj));
                double ai = fi - i0, aj = fj - j0;
                for (int ch = 0; ch < c; ++ch) {
                    double acc = 0.0;
                    for (int di = 0; di <= 1; ++di) {
                        int ii = i0 + di;
                        if (ii < 0 || ii >= rows) continue;
                        double wi = di ? ai : (1.0 - ai);
                        for (int dj = 0; dj <= 1; ++dj) {
                            int jj = j0 + dj;
                            if (jj < 0 || jj >= cols) continue;
                            double wj = dj ? aj : (1.0 - aj);
                            acc += wi * wj * field.at(ch, ii, jj);
                        }
                    }
                    out.at(ch, i, j) = acc;
                }
            }
        }
    }
    return out;
}

MaskImage overlap_mask(const EgoPose& pose_prev, const EgoPose& pose_cur, const BevGrid& grid) {
    Tensor ones({1, grid.rows(), grid.cols()}, 1.0);
    Tensor aligned = ego_align(ones, pose_prev, pose_cur, grid, Interp::Bilinear);
    MaskImage out(grid.rows(), grid.cols());
    for (int i = 0; i < grid.rows(); ++i)
        for (int j = 0; j < grid.cols(); ++j)
            if (aligned.at(0, i, j) >= 0.5) out.set(i, j, 1);
    return out;
}

}  // namespace nrseg::geom
