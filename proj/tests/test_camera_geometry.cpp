#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <nrseg/camera_geometry.hpp>
#include <nrseg/common.hpp>

using namespace nrseg;
using namespace nrseg::geom;

namespace {

// Generic, non-axis-aligned camera for tie-free rasterization tests.
CameraCalib generic_camera() {
    return make_pinhole_camera(0.23, -0.11, 1.61, 0.31, 0.12, 123.4, 119.7, 79.35, 47.2, 160, 96);
}

CameraCalib forward_camera(int w = 160, int h = 96) {
    return make_pinhole_camera(0.0, 0.0, 1.5, 0.0, 0.0, 100.0, 100.0, w / 2.0, h / 2.0, w, h);
}

BevGrid small_grid() { return BevGrid::make(-24.0, 24.0, -24.0, 24.0, 0.5); }

// Brute-force point-in-quad oracle, independent of the library fill path:
// projects the cell corners and tests every pixel center geometrically.
int64_t quad_raster_oracle(const BevGrid& grid, int ci, int cj, const CameraCalib& calib) {
    double xs[2] = {grid.x_min + ci * grid.resolution, grid.x_min + (ci + 1) * grid.resolution};
    double ys[2] = {grid.y_min + cj * grid.resolution, grid.y_min + (cj + 1) * grid.resolution};
    struct P {
        double u, v;
    };
    std::vector<P> corners;
    double order[4][2] = {{xs[0], ys[0]}, {xs[0], ys[1]}, {xs[1], ys[1]}, {xs[1], ys[0]}};
    for (auto& o : order) {
        PixelProjection p = project_ego_point(calib, o[0], o[1], 0.0);
        REQUIRE(!p.behind);
        corners.push_back({p.u, p.v});
    }
    auto inside = [&](double px, double py) {
        // consistent winding via signed area
        double area = 0.0;
        for (int i = 0; i < 4; ++i) {
            const P& a = corners[i];
            const P& b = corners[(i + 1) % 4];
            area += a.u * b.v - b.u * a.v;
        }
        double sign = area > 0 ? 1.0 : -1.0;
        for (int i = 0; i < 4; ++i) {
            const P& a = corners[i];
            const P& b = corners[(i + 1) % 4];
            double cr = (b.u - a.u) * (py - a.v) - (b.v - a.v) * (px - a.u);
            if (sign * cr < 0) return false;
        }
        return true;
    };
    int64_t count = 0;
    for (int py = 0; py < calib.height; ++py)
        for (int px = 0; px < calib.width; ++px)
            if (inside(px + 0.5, py + 0.5)) ++count;
    return count;
}

}  // namespace

TEST_CASE("pinhole symmetry: on-axis ground point maps to the principal column") {
    CameraCalib calib = forward_camera();
    PixelProjection p = project_ego_point(calib, 10.0, 0.0, 0.0);
    CHECK(!p.behind);
    CHECK(p.u == doctest::Approx(80.0));
    CHECK(p.v > 48.0);  // ground lies below the optical axis
}

TEST_CASE("behind-camera cell flags") {
    CameraCalib calib = forward_camera();
    PixelProjection p = project_ego_point(calib, -10.0, 0.0, 0.0);
    CHECK(p.behind);
}

TEST_CASE("invalid calibration raises") {
    CameraCalib calib = forward_camera();
    calib.extrinsics[0] = 5.0;  // breaks orthonormality
    BevGrid grid = small_grid();
    CHECK_THROWS_AS(project_bev_to_image(0, 0, grid, calib), ValidationError);
}

TEST_CASE("projection round-trip: ray-casting the pixel recovers the cell") {
    Rng rng(17);
    BevGrid grid = small_grid();
    int checked = 0;
    while (checked < 500) {
        CameraCalib calib = make_pinhole_camera(
            rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(1.2, 2.4),
            rng.uniform(-kPi, kPi), rng.uniform(0.0, 0.25), rng.uniform(80.0, 200.0),
            rng.uniform(80.0, 200.0), rng.uniform(70.0, 90.0), rng.uniform(40.0, 56.0), 160, 96);
        int i = static_cast<int>(rng.uniform_int(0, grid.rows() - 1));
        int j = static_cast<int>(rng.uniform_int(0, grid.cols() - 1));
        PixelProjection p = project_bev_to_image(i, j, grid, calib);
        if (p.behind || p.u < 0 || p.u >= calib.width || p.v < 0 || p.v >= calib.height) continue;
        GroundRayCaster caster(calib);
        double x, y;
        REQUIRE(caster.ground_point(p.u, p.v, x, y));
        double dx = x - grid.center_x(i);
        double dy = y - grid.center_y(j);
        CHECK(std::sqrt(dx * dx + dy * dy) < 0.5 * grid.resolution);
        ++checked;
    }
}

TEST_CASE("render_projected_masks: empty label and empty boxes") {
    CameraCalib calib = generic_camera();
    BevGrid grid = small_grid();
    BevLabel label(grid, 6);
    MaskImage m_o, m_c;
    render_projected_masks(label, {}, calib, {0}, m_o, m_c);
    CHECK(m_o.count() == 0);
    CHECK(m_c.count() == 0);
}

TEST_CASE("render_projected_masks: single cell matches point-in-quad oracle") {
    CameraCalib calib = generic_camera();
    BevGrid grid = small_grid();
    BevLabel label(grid, 6);
    int i, j;
    REQUIRE(grid.cell_of(10.3, 1.7, i, j));
    label.set(0, i, j, 1);
    MaskImage m_o, m_c;
    render_projected_masks(label, {}, calib, {0}, m_o, m_c);
    CHECK(m_o.count() == quad_raster_oracle(grid, i, j, calib));
    CHECK(m_o.count() > 0);
}

TEST_CASE("road class preconditions") {
    CameraCalib calib = generic_camera();
    BevLabel label(small_grid(), 6);
    MaskImage m_o, m_c;
    CHECK_THROWS_AS(render_projected_masks(label, {}, calib, {}, m_o, m_c), ValidationError);
    CHECK_THROWS_AS(render_projected_masks(label, {}, calib, {6}, m_o, m_c), ValidationError);
}

TEST_CASE("compose_reference_mask truth table") {
    MaskImage m_o(2, 2), m_c(2, 2);
    m_o.set(0, 0, 1);
    m_o.set(0, 1, 1);
    m_c.set(0, 1, 1);
    MaskImage m_r = compose_reference_mask(m_o, m_c);
    CHECK(m_r.at(0, 0) == 1);
    CHECK(m_r.at(0, 1) == 0);
    CHECK(m_r.count() == 1);

    MaskImage zeros(2, 2);
    MaskImage id = compose_reference_mask(m_o, zeros);
    CHECK(id.data == m_o.data);

    MaskImage ones(2, 2);
    ones.data.assign(4, 1);
    CHECK(compose_reference_mask(m_o, ones).count() == 0);

    MaskImage bad(3, 2);
    CHECK_THROWS_AS(compose_reference_mask(m_o, bad), DimensionError);
}

TEST_CASE("monotonicity: adding a box never grows the reference mask") {
    Rng rng(23);
    CameraCalib calib = generic_camera();
    BevGrid grid = small_grid();
    BevLabel label(grid, 6);
    for (int n = 0; n < 300; ++n) {
        int i = static_cast<int>(rng.uniform_int(0, grid.rows() - 1));
        int j = static_cast<int>(rng.uniform_int(0, grid.cols() - 1));
        label.set(0, i, j, 1);
    }
    std::vector<Box3D> boxes;
    MaskImage m_o, m_c;
    render_projected_masks(label, boxes, calib, {0}, m_o, m_c);
    MaskImage prev = compose_reference_mask(m_o, m_c);
    for (int b = 0; b < 4; ++b) {
        boxes.push_back({rng.uniform(3.0, 20.0), rng.uniform(-6.0, 6.0), 0.8, 4.2, 1.9, 1.6,
                         rng.uniform(-kPi, kPi)});
        render_projected_masks(label, boxes, calib, {0}, m_o, m_c);
        MaskImage cur = compose_reference_mask(m_o, m_c);
        for (size_t p = 0; p < cur.data.size(); ++p) CHECK(cur.data[p] <= prev.data[p]);
        prev = cur;
    }
}

TEST_CASE("ego_align: identity pose is bitwise identity") {
    Rng rng(31);
    BevGrid grid = small_grid();
    Tensor field({2, grid.rows(), grid.cols()});
    for (int64_t i = 0; i < field.numel(); ++i) field[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;
    EgoPose pose = EgoPose::make(3.7, -2.1, 0.83);
    Tensor nearest = ego_align(field, pose, pose, grid, Interp::Nearest);
    CHECK(nearest.vec() == field.vec());
    Tensor bilinear = ego_align(field, pose, pose, grid, Interp::Bilinear);
    for (int64_t i = 0; i < field.numel(); ++i) CHECK(bilinear[i] == field[i]);
}

TEST_CASE("ego_align: one-cell forward translation shifts by one row") {
    BevGrid grid = small_grid();
    Rng rng(37);
    Tensor field({1, grid.rows(), grid.cols()});
    for (int64_t i = 0; i < field.numel(); ++i) field[i] = rng.uniform(0.0, 1.0);
    EgoPose prev = EgoPose::make(0, 0, 0);
    EgoPose cur = EgoPose::make(grid.resolution, 0, 0);
    Tensor out = ego_align(field, prev, cur, grid, Interp::Bilinear);
    for (int i = 0; i < grid.rows(); ++i) {
        for (int j = 0; j < grid.cols(); ++j) {
            double expect = (i + 1 < grid.rows()) ? field.at(0, i + 1, j) : 0.0;
            CHECK(out.at(0, i, j) == doctest::Approx(expect).epsilon(1e-12));
        }
    }
}

TEST_CASE("ego_align: 180 degree yaw reverses indices") {
    BevGrid grid = small_grid();
    Rng rng(41);
    Tensor field({1, grid.rows(), grid.cols()});
    for (int64_t i = 0; i < field.numel(); ++i) field[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    EgoPose prev = EgoPose::make(0, 0, 0);
    EgoPose cur = EgoPose::make(0, 0, kPi);
    Tensor out = ego_align(field, prev, cur, grid, Interp::Nearest);
    for (int i = 0; i < grid.rows(); ++i)
        for (int j = 0; j < grid.cols(); ++j)
            CHECK(out.at(0, i, j) == field.at(0, grid.rows() - 1 - i, grid.cols() - 1 - j));
}

TEST_CASE("ego_align composition") {
    BevGrid grid = small_grid();
    Tensor field({1, grid.rows(), grid.cols()});
    for (int i = 0; i < grid.rows(); ++i)
        for (int j = 0; j < grid.cols(); ++j)
            field.at(0, i, j) =
                std::sin(grid.center_x(i) / 120.0) + std::cos(grid.center_y(j) / 110.0);
    Rng rng(43);
    for (int trial = 0; trial < 5; ++trial) {
        EgoPose a = EgoPose::make(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.05, 0.05));
        EgoPose b = EgoPose::make(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.05, 0.05));
        EgoPose c = EgoPose::make(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-0.05, 0.05));
        Tensor two_step = ego_align(ego_align(field, a, b, grid, Interp::Bilinear), b, c, grid,
                                    Interp::Bilinear);
        Tensor one_step = ego_align(field, a, c, grid, Interp::Bilinear);
        // interior cells only; the window border mixes with zero fill
        int margin = 16;
        double max_diff = 0.0;
        for (int i = margin; i < grid.rows() - margin; ++i)
            for (int j = margin; j < grid.cols() - margin; ++j)
                max_diff = std::max(max_diff, std::fabs(two_step.at(0, i, j) - one_step.at(0, i, j)));
        CHECK(max_diff < 1e-5);
    }
}

TEST_CASE("overlap_mask: zero motion, disjoint windows, analytic block") {
    BevGrid grid = BevGrid::make(-50, 50, -50, 50, 0.5);
    EgoPose origin = EgoPose::make(0, 0, 0);
    MaskImage all = overlap_mask(origin, origin, grid);
    CHECK(all.count() == static_cast<int64_t>(grid.rows()) * grid.cols());

    MaskImage none = overlap_mask(origin, EgoPose::make(100.0, 0, 0), grid);
    CHECK(none.count() == 0);

    MaskImage block = overlap_mask(origin, EgoPose::make(25.0, 0, 0), grid);
    CHECK(block.count() == 150 * 200);
    // cells near the far edge survive, the leading 50 rows drop out
    CHECK(block.at(0, 0) == 1);
    CHECK(block.at(150, 0) == 0);
}

TEST_CASE("overlap_mask symmetry") {
    BevGrid grid = small_grid();
    Rng rng(47);
    for (int trial = 0; trial < 8; ++trial) {
        EgoPose a = EgoPose::make(rng.uniform(-30, 30), rng.uniform(-30, 30), 0.0);
        EgoPose b = EgoPose::make(rng.uniform(-30, 30), rng.uniform(-30, 30), 0.0);
        CHECK(overlap_mask(a, b, grid).count() == overlap_mask(b, a, grid).count());
    }
    for (int trial = 0; trial < 8; ++trial) {
        double x = rng.uniform(-5, 5), y = rng.uniform(-5, 5);
        EgoPose a = EgoPose::make(x, y, rng.uniform(-kPi, kPi));
        EgoPose b = EgoPose::make(x, y, rng.uniform(-kPi, kPi));
        CHECK(overlap_mask(a, b, grid).count() == overlap_mask(b, a, grid).count());
    }
}

TEST_CASE("grid construction validates divisibility") {
    CHECK_THROWS_AS(BevGrid::make(-50, 50, -50, 50, 0.3), ValidationError);
    BevGrid g = BevGrid::make(-50, 50, -50, 50, 0.5);
    CHECK(g.rows() == 200);
    CHECK(g.cols() == 200);
}
