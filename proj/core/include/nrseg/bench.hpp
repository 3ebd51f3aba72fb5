#ifndef NRSEG_BENCH_HPP
#define NRSEG_BENCH_HPP

#include <string>
#include <utility>
#include <vector>

#include "nrseg/dataset_io.hpp"
#include "nrseg/pgcm.hpp"

namespace nrseg::bench {

// Consistency scores for a list of frames: reference masks projected from
// the stored labels vs the rendered road masks on disk.
std::map<std::string, pgcm::ConsistencyScore> score_frames(const io::Dataset& dataset,
                                                           const std::vector<std::string>& ids,
                                                           const std::vector<int>& road_classes,
                                                           double floor);

// Desk-scale experiment matrix shared by the noise benchmark and the
// acceptance suite. Knobs default to the documented budget (96x96 grid at
// 0.5 m, 3 cameras at 96x160).
struct BenchOptions {
    std::string out_dir = "bench_out";
    uint64_t seed = 1;
    std::vector<uint64_t> train_seeds = {11, 12, 13};
    std::vector<std::string> losses = {"dice", "m1", "m2", "pgcm"};
    std::vector<std::string> conditions = {"clean", "mid"};

    int labeled_scenes = 6;
    int synthetic_scenes = 4;
    int val_scenes = 5;
    int frames_per_scene = 8;
    int epochs = 12;
    int num_cams = 3;
    int image_w = 160, image_h = 96;
    double grid_half = 24.0;
    double resolution = 0.5;
    double lr = 2e-3;
};

struct NoiseCell {
    std::string loss;
    std::string condition;
    std::vector<double> mious;
    double mean = 0.0;
    double stddev = 0.0;
};

// {loss} x {condition} x seeds training matrix; emits bench_summary.md/.csv
// under out_dir and returns the table.
std::vector<NoiseCell> bench_noise_resilience(const BenchOptions& opt);

struct HlseCell {
    std::string partition;               // "global" | "hlse"
    uint64_t seed = 0;
    std::vector<double> evidential_iou;  // per class
    std::vector<double> multinomial_iou;
    double coverage = 0.0;
    double evidential_miou = 0.0;
};

// Global-cluster vs one-vs-rest evidential training on data where dividers
// always lie on drivable; emits hlse_summary.md/.csv under out_dir.
std::vector<HlseCell> bench_hlse(const BenchOptions& opt);

// Finite-difference suites behind the gradcheck CLI; returns (name, max
// relative error) per operation.
std::vector<std::pair<std::string, double>> gradcheck_suites(uint64_t seed, int trials);

// Dataset recipe shared by benches and the acceptance suite.
struct ToyDataOptions {
    std::string dir;
    uint64_t seed = 1;
    std::string noise_level = "mid";  // applied to the synthetic split
    int labeled_scenes = 6;
    int synthetic_scenes = 4;
    int val_scenes = 5;
    int frames_per_scene = 8;
    int num_cams = 3;
    int image_w = 160, image_h = 96;
    double grid_half = 24.0;
    double resolution = 0.5;
};
void make_toy_dataset(const ToyDataOptions& opt);

}  // namespace nrseg::bench

#endif  // NRSEG_BENCH_HPP
