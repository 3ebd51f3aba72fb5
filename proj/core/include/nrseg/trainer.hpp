#ifndef NRSEG_TRAINER_HPP
#define NRSEG_TRAINER_HPP

#include <string>
#include <vector>

#include "nrseg/dataset_io.hpp"
#include "nrseg/segnet.hpp"

namespace nrseg::train {

struct TrainConfig {
    std::string mode = "supervised";  // supervised | ssl | uda
    double lambda1 = 0.5;
    double lambda2 = 0.1;
    double lambda3 = 1.0;
    double momentum = 0.99;  // teacher EMA
    int epochs = 10;
    int batch = 1;  // clips per optimizer step
    double lr = 2e-3;
    double lr_min = 1e-5;
    uint64_t seed = 0;

    std::string dataset_labeled;
    std::string dataset_synthetic;  // optional; frames in its "synthetic" split
    std::string dataset_target;     // optional; frames in its "unlabeled" split
    std::string scores_path;        // default: <dataset_synthetic>/scores.json
    std::string partition_path;     // empty: one-vs-rest default

    double score_floor = 0.05;
    double tau = 0.45;
    std::string loss_variant = "pgcm";  // pgcm | dice | m1 | m2
    int clip_len = 2;
    double sigma = 1.0;
    int c1 = 16, c2 = 24;
    bool force_r_one = false;
    bool strong_flip = true;
    double jitter = 0.08;
    bool edl_pixel_mean = true;
    double poly_power = 0.9;
    std::string run_dir = "runs/run";
    std::string name = "run";

    static TrainConfig load(const std::string& path);
    void save(const std::string& path) const;
    void validate() const;
    std::string config_hash() const;
};

// Sigmoid ramp: ~0 at the start, 0.1 from halfway on.
double beta_rampup(int64_t it, int64_t total_iterations);

// theta_t <- momentum * theta_t + (1 - momentum) * theta_s, elementwise.
void ema_update(std::vector<ad::Var>& teacher, const std::vector<ad::Var>& student,
                double momentum);

// Mean squared difference; the teacher side enters as a constant.
ad::Var pseudo_label_loss(const ad::Var& student, const Tensor& teacher);

struct LossComponents {
    double gt = 0, pv = 0, tr = 0, e = 0, pl = 0, e_t = 0;
    double r_used = 1.0;
    int64_t multi_positive_cells = 0;
};

// Frame inputs normalized for the model: images in [0,1], perspective masks
// downsampled to the encoder's feature stride.
struct FrameTensors {
    std::vector<Tensor> images;
    std::vector<Tensor> pv_masks;
    geom::BevLabel label;
    std::vector<geom::CameraCalib> calib;
    geom::EgoPose pose;
};
FrameTensors prepare_frame(const io::FrameData& frame, int feat_stride);

struct SourceLossResult {
    ad::Var total;
    LossComponents comp;
    net::ModelState next_state;
};

// Loss_s = Loss_gt + l1*Loss_pv + l2*Loss_tr + l3*Loss_e on one frame; the
// consistency score r weights Loss_gt (1 for original frames).
SourceLossResult source_loss(net::SegNet& model, const FrameTensors& frame,
                             const net::ModelState& state, double r, int64_t it,
                             int64_t total_iterations, const TrainConfig& cfg);

struct TrainResult {
    std::string run_dir;
    double final_miou = 0.0;
    std::vector<double> final_per_class;
    int64_t steps = 0;
    std::vector<double> epoch_loss_gt;
};

TrainResult train(const TrainConfig& cfg);

}  // namespace nrseg::train

#endif  // NRSEG_TRAINER_HPP
