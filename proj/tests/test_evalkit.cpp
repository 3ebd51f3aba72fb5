#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <nrseg/common.hpp>
#include <nrseg/evalkit.hpp>

using namespace nrseg;
using namespace nrseg::evalkit;
namespace fs = std::filesystem;

namespace {

geom::BevGrid grid4() { return geom::BevGrid::make(-1, 1, -1, 1, 0.5); }  // 4x4

geom::BevLabel label_from(std::vector<uint8_t> bits, int k = 1) {
    geom::BevLabel l(grid4(), k);
    l.data = std::move(bits);
    return l;
}

}  // namespace

TEST_CASE("per_class_iou closed forms") {
    // pred 3 cells, gt 2 cells, overlap 1 -> 1/4
    geom::BevLabel gt = label_from({1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
    Tensor pred({1, 4, 4});
    pred[0] = 1;
    pred[4] = 1;
    pred[5] = 1;
    CHECK(per_class_iou(pred, gt)[0] == doctest::Approx(0.25));

    // perfect prediction
    Tensor exact({1, 4, 4});
    exact[0] = 1;
    exact[1] = 1;
    CHECK(per_class_iou(exact, gt)[0] == 1.0);

    // complement covers everything
    Tensor comp({1, 4, 4}, 1.0);
    comp[0] = 0;
    comp[1] = 0;
    CHECK(per_class_iou(comp, gt)[0] == 0.0);

    // both empty over the split -> 1
    geom::BevLabel empty = label_from(std::vector<uint8_t>(16, 0));
    Tensor zeros({1, 4, 4});
    CHECK(per_class_iou(zeros, empty)[0] == 1.0);
}

TEST_CASE("dataset-level accumulation equals global counting") {
    Rng rng(3);
    IoUAccumulator acc(2);
    int64_t inter[2] = {0, 0}, uni[2] = {0, 0};
    for (int frame = 0; frame < 3; ++frame) {
        geom::BevLabel gt(grid4(), 2);
        Tensor pred({2, 4, 4});
        for (int c = 0; c < 2; ++c) {
            for (int i = 0; i < 16; ++i) {
                bool l = rng.bernoulli(0.4), p = rng.bernoulli(0.4);
                gt.data[static_cast<size_t>(c) * 16 + i] = l;
                pred[c * 16 + i] = p ? 1.0 : 0.0;
                inter[c] += (l && p) ? 1 : 0;
                uni[c] += (l || p) ? 1 : 0;
            }
        }
        acc.add(pred, gt);
    }
    auto pc = acc.per_class();
    for (int c = 0; c < 2; ++c)
        CHECK(pc[static_cast<size_t>(c)] ==
              doctest::Approx(static_cast<double>(inter[c]) / uni[c]));
    CHECK(acc.miou() == doctest::Approx((pc[0] + pc[1]) / 2.0).epsilon(1e-9));
}

TEST_CASE("merge is additive") {
    geom::BevLabel gt = label_from({1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
    Tensor pred({1, 4, 4});
    pred[0] = 1;
    IoUAccumulator a(1), b(1);
    a.add(pred, gt);
    b.add(pred, gt);
    IoUAccumulator whole(1);
    whole.add(pred, gt);
    whole.add(pred, gt);
    a.merge(b);
    CHECK(a.per_class()[0] == whole.per_class()[0]);
    CHECK(a.frames() == 2);
}

TEST_CASE("threshold_uncertainty") {
    Tensor probs({1, 2, 2}, {0.9, 0.9, 0.2, 0.9});
    Tensor unc_high({1, 2, 2}, 1.0);
    ThresholdResult all_filtered = threshold_uncertainty(probs, unc_high, 0.45);
    CHECK(all_filtered.coverage == 0.0);
    for (int64_t i = 0; i < 4; ++i) CHECK(all_filtered.pred[i] == 0.0);

    Tensor unc_low({1, 2, 2}, 0.2);
    ThresholdResult pass = threshold_uncertainty(probs, unc_low, 0.45);
    CHECK(pass.coverage == 1.0);
    CHECK(pass.pred[0] == 1.0);
    CHECK(pass.pred[2] == 0.0);

    // counting oracle on a mixed field
    Tensor unc_mix({1, 2, 2}, {0.1, 0.5, 0.44, 0.9});
    ThresholdResult mixed = threshold_uncertainty(probs, unc_mix, 0.45);
    CHECK(mixed.coverage == doctest::Approx(0.5));
    CHECK(mixed.pred[0] == 1.0);  // certain and confident
    CHECK(mixed.pred[1] == 0.0);  // uncertainty at the bar is excluded
    CHECK(mixed.pred[2] == 0.0);  // certain but p <= 0.5
    CHECK(mixed.pred[3] == 0.0);

    // coverage is monotone non-increasing as tau drops
    double prev = 1.1;
    for (double tau : {1.0, 0.7, 0.45, 0.2, 0.05}) {
        double c = threshold_uncertainty(probs, unc_mix, tau).coverage;
        CHECK(c <= prev);
        prev = c;
    }
    CHECK_THROWS_AS(threshold_uncertainty(probs, unc_mix, 0.0), ValidationError);
}

TEST_CASE("report emission round trip and determinism") {
    std::string dir = (fs::temp_directory_path() / "nrseg_report_test").string();
    fs::remove_all(dir);

    EvalReport report;
    report.class_names = {"drivable", "crossing", "walkway", "stop_line", "carpark", "divider"};
    report.per_class_iou = {0.5, 0.25, 0.75, 0.0, 1.0, 0.125};
    double acc = 0;
    for (double v : report.per_class_iou) acc += v;
    report.miou = acc / 6.0;
    report.frames = 3;
    report.uncertainty_tau = 0.45;
    report.filtered_coverage = 0.8;
    report.head = "evidential";
    emit_report(report, dir);

    EvalReport loaded = load_report(dir + "/report.json");
    CHECK(loaded.per_class_iou == report.per_class_iou);
    CHECK(loaded.miou == report.miou);
    CHECK(loaded.head == report.head);

    // csv has one row per class plus the miou row
    std::ifstream csv(dir + "/report.csv");
    int rows = 0;
    std::string line;
    std::getline(csv, line);  // header
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 7);

    std::ifstream first(dir + "/report.json");
    std::string bytes1((std::istreambuf_iterator<char>(first)), std::istreambuf_iterator<char>());
    emit_report(report, dir);
    std::ifstream second(dir + "/report.json");
    std::string bytes2((std::istreambuf_iterator<char>(second)),
                       std::istreambuf_iterator<char>());
    CHECK(bytes1 == bytes2);
}

TEST_CASE("miou equals the mean of per-class IoUs") {
    Rng rng(9);
    IoUAccumulator acc(6);
    for (int f = 0; f < 4; ++f) {
        geom::BevLabel gt(grid4(), 6);
        Tensor pred({6, 4, 4});
        for (int64_t i = 0; i < 96; ++i) {
            gt.data[static_cast<size_t>(i)] = rng.bernoulli(0.3);
            pred[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;
        }
        acc.add(pred, gt);
    }
    auto pc = acc.per_class();
    double mean = 0;
    for (double v : pc) mean += v;
    CHECK(acc.miou() == doctest::Approx(mean / 6.0).epsilon(1e-9));
}
