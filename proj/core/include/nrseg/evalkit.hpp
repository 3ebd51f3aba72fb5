#ifndef NRSEG_EVALKIT_HPP
#define NRSEG_EVALKIT_HPP

#include <string>
#include <vector>

#include "nrseg/camera_geometry.hpp"
#include "nrseg/dataset_io.hpp"
#include "nrseg/segnet.hpp"
#include "nrseg/tensor.hpp"

namespace nrseg::evalkit {

// Dataset-level IoU: intersection/union counts accumulate over the whole
// split, frame partials merge deterministically.
class IoUAccumulator {
public:
    explicit IoUAccumulator(int k) : inter_(k, 0), uni_(k, 0) {}

    void add(const Tensor& pred_binary, const geom::BevLabel& gt);
    void merge(const IoUAccumulator& other);

    // both-empty convention: IoU = 1
    std::vector<double> per_class() const;
    double miou() const;
    int64_t frames() const { return frames_; }

private:
    std::vector<int64_t> inter_, uni_;
    int64_t frames_ = 0;
};

std::vector<double> per_class_iou(const Tensor& pred_binary, const geom::BevLabel& gt);

struct ThresholdResult {
    Tensor pred;       // [k,H,W] binary
    double coverage;   // fraction of (cell,class) below the uncertainty bar
};

// positive iff P_e > 0.5 and u < tau
ThresholdResult threshold_uncertainty(const Tensor& probs, const Tensor& uncertainty, double tau);

struct EvalReport {
    std::vector<std::string> class_names;
    std::vector<double> per_class_iou;
    double miou = 0.0;
    int64_t frames = 0;
    double uncertainty_tau = 0.0;
    double filtered_coverage = 1.0;
    std::string head = "multinomial";
};

void emit_report(const EvalReport& report, const std::string& dir);
EvalReport load_report(const std::string& json_path);

// Streams the split scene by scene through the model (multinomial head at
// threshold 0.5, evidential head through the uncertainty filter).
EvalReport run_eval(net::SegNet& model, const io::Dataset& dataset, const std::string& split,
                    const std::string& head, double tau, const std::string& per_frame_dir = "");

}  // namespace nrseg::evalkit

#endif  // NRSEG_EVALKIT_HPP
