#ifndef NRSEG_CAMERA_GEOMETRY_HPP
#define NRSEG_CAMERA_GEOMETRY_HPP

#include <array>
#include <cstdint>
#include <vector>

#include "nrseg/common.hpp"
#include "nrseg/mask.hpp"
#include "nrseg/tensor.hpp"

namespace nrseg::geom {

// Pinhole camera: intrinsics K (row-major 3x3, upper triangular, K[8]=1) and a
// rigid ego->camera transform (row-major 4x4). Camera frame is the usual CV
// one: x right, y down, z forward. Ego frame: x forward, y left, z up.
struct CameraCalib {
    std::array<double, 9> intrinsics{};
    std::array<double, 16> extrinsics{};
    int width = 0;
    int height = 0;

    void validate() const;  // throws ValidationError on malformed calibration
    uint64_t content_hash() const;
};

// Metric BEV window. Row index runs along ego x (forward), column index along
// ego y (left). Cell (i,j) covers [x_min+i*res, x_min+(i+1)*res) x [...).
struct BevGrid {
    double x_min = -50.0, x_max = 50.0;
    double y_min = -50.0, y_max = 50.0;
    double resolution = 0.5;

    static BevGrid make(double x_min, double x_max, double y_min, double y_max, double res);

    int rows() const { return static_cast<int>((x_max - x_min) / resolution + 0.5); }
    int cols() const { return static_cast<int>((y_max - y_min) / resolution + 0.5); }

    double center_x(int i) const { return x_min + (i + 0.5) * resolution; }
    double center_y(int j) const { return y_min + (j + 0.5) * resolution; }

    // floor() cell lookup shared by every projection path in the project, so
    // forward and inverse rasterization make bit-identical membership calls.
    bool cell_of(double x, double y, int& i, int& j) const;
};

// k binary channels over a BevGrid. Channels may overlap (non one-hot).
struct BevLabel {
    BevGrid grid;
    int k = 0;
    std::vector<uint8_t> data;

    BevLabel() = default;
    BevLabel(const BevGrid& g, int k_)
        : grid(g), k(k_), data(static_cast<size_t>(k_) * g.rows() * g.cols(), 0) {}

    uint8_t at(int c, int i, int j) const {
        return data[(static_cast<size_t>(c) * grid.rows() + i) * grid.cols() + j];
    }
    void set(int c, int i, int j, uint8_t v) {
        data[(static_cast<size_t>(c) * grid.rows() + i) * grid.cols() + j] = v;
    }
    int64_t channel_count(int c) const;
};

// [k, rows, cols] double view of a label, for loss evaluation.
Tensor to_tensor(const BevLabel& label);

struct Box3D {
    double cx = 0, cy = 0, cz = 0;  // center, m
    double l = 0, w = 0, h = 0;     // size, m
    double yaw = 0;                 // rad, about +z

    void validate() const;
};

// Planar ego pose in the world frame; yaw wrapped to (-pi, pi].
struct EgoPose {
    double x = 0, y = 0, yaw = 0;

    static EgoPose make(double x, double y, double yaw) { return {x, y, wrap_angle(yaw)}; }
};

struct PixelProjection {
    bool behind = false;
    double u = 0, v = 0;
    double depth = 0;
};

// Pinhole camera at (cam_x, cam_y, cam_z) in the ego frame, optical axis at
// `yaw` about ego +z and `pitch` radians downward.
CameraCalib make_pinhole_camera(double cam_x, double cam_y, double cam_z, double yaw,
                                double pitch, double fx, double fy, double cx, double cy,
                                int width, int height);

PixelProjection project_ego_point(const CameraCalib& calib, double x, double y, double z);

// BEV cell center at ground height h=0 into continuous pixel coordinates.
PixelProjection project_bev_to_image(int i, int j, const BevGrid& grid, const CameraCalib& calib);

// Precomputed pixel-center -> ground-plane ray caster for one camera.
class GroundRayCaster {
public:
    explicit GroundRayCaster(const CameraCalib& calib);

    // Ground hit of the ray through continuous pixel (u, v); false when the
    // ray does not reach z=0 in front of the camera.
    bool ground_point(double u, double v, double& x, double& y) const;

    // Convenience for the shared fill rule: center of integer pixel (px, py).
    bool pixel_ground_cell(int px, int py, const BevGrid& grid, int& i, int& j) const;

private:
    std::array<double, 9> kinv_{};
    std::array<double, 9> rot_cam_to_ego_{};
    double origin_[3] = {0, 0, 0};
};

// Silhouette of a 3D box through a pinhole camera: convex hull of the
// projected corners (clipped against a near plane when needed). Pixels whose
// centers fall inside the hull are OR-ed into `out`.
void rasterize_box_silhouette(const Box3D& box, const CameraCalib& calib, MaskImage& out);

// Projected road mask M_o (union of the selected label channels) and
// projected object mask M_c (union of box silhouettes), both image-sized.
void render_projected_masks(const BevLabel& label, const std::vector<Box3D>& boxes,
                            const CameraCalib& calib, const std::vector<int>& road_classes,
                            MaskImage& m_o, MaskImage& m_c);

// M_r = M_o AND NOT M_c.
MaskImage compose_reference_mask(const MaskImage& m_o, const MaskImage& m_c);

enum class Interp { Nearest, Bilinear };

// Resample a [C,H,W] field expressed in the previous ego frame into the
// current ego frame. Out-of-window samples fill with zero.
Tensor ego_align(const Tensor& field, const EgoPose& pose_prev, const EgoPose& pose_cur,
                 const BevGrid& grid, Interp interp);

// Cells visible in both ego frames: bilinear-aligned all-ones grid
// thresholded at 0.5.
MaskImage overlap_mask(const EgoPose& pose_prev, const EgoPose& pose_cur, const BevGrid& grid);

}  // namespace nrseg::geom

#endif  // NRSEG_CAMERA_GEOMETRY_HPP
