#include "nrseg/evalkit.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "nrseg/hlse.hpp"

namespace nrseg::evalkit {

using json = nlohmann::json;

void IoUAccumulator::add(const Tensor& pred_binary, const geom::BevLabel& gt) {
    int k = static_cast<int>(inter_.size());
    if (pred_binary.ndim() != 3 || pred_binary.dim(0) != k || pred_binary.dim(1) != gt.grid.rows() ||
        pred_binary.dim(2) != gt.grid.cols() || gt.k != k)
        throw DimensionError("iou: prediction/label shape mismatch");
    int64_t hw = static_cast<int64_t>(gt.grid.rows()) * gt.grid.cols();
    for (int c = 0; c < k; ++c) {
        const double* p = pred_binary.data() + c * hw;
        const uint8_t* l = gt.data.data() + c * hw;
        int64_t inter = 0, uni = 0;
        for (int64_t i = 0; i < hw; ++i) {
            bool pv = p[i] != 0.0, lv = l[i] != 0;
            inter += (pv && lv) ? 1 : 0;
            uni += (pv || lv) ? 1 : 0;
        }
        inter_[static_cast<size_t>(c)] += inter;
        uni_[static_cast<size_t>(c)] += uni;
    }
    ++frames_;
}

void IoUAccumulator::merge(const IoUAccumulator& other) {
    if (other.inter_.size() != inter_.size()) throw DimensionError("iou: class count mismatch");
    for (size_t c = 0; c < inter_.size(); ++c) {
        inter_[c] += other.inter_[c];
        uni_[c] += other.uni_[c];
    }
    frames_ += other.frames_;
}

std::vector<double> IoUAccumulator::per_class() const {
    std::vector<double> out(inter_.size());
    for (size_t c = 0; c < inter_.size(); ++c)
        out[c] = uni_[c] == 0 ? 1.0 : static_cast<double>(inter_[c]) / uni_[c];
    return out;
}

double IoUAccumulator::miou() const {
    std::vector<double> pc = per_class();
    double acc = 0.0;
    for (double v : pc) acc += v;
    return acc / pc.size();
}

std::vector<double> per_class_iou(const Tensor& pred_binary, const geom::BevLabel& gt) {
    IoUAccumulator acc(gt.k);
    acc.add(pred_binary, gt);
    return acc.per_class();
}

ThresholdResult threshold_uncertainty(const Tensor& probs, const Tensor& uncertainty, double tau) {
    if (!(tau > 0.0) || tau > 1.0)
        throw ValidationError("threshold_uncertainty: tau must lie in (0,1]");
    if (!probs.same_shape(uncertainty))
        throw DimensionError("threshold_uncertainty: shape mismatch");
    ThresholdResult out{Tensor(probs.shape()), 0.0};
    int64_t kept = 0;
    for (int64_t i = 0; i < probs.numel(); ++i) {
        bool certain = uncertainty[i] < tau;
        kept += certain ? 1 : 0;
        out.pred[i] = (certain && probs[i] > 0.5) ? 1.0 : 0.0;
    }
    out.coverage = static_cast<double>(kept) / probs.numel();
    return out;
}

void emit_report(const EvalReport& report, const std::string& dir) {
    std::filesystem::create_directories(dir);
    json j;
    j["class_names"] = report.class_names;
    j["per_class_iou"] = report.per_class_iou;
    j["miou"] = report.miou;
    j["frames"] = report.frames;
    j["uncertainty_tau"] = report.uncertainty_tau;
    j["filtered_coverage"] = report.filtered_coverage;
    j["head"] = report.head;
    std::ofstream jf(dir + "/report.json");
    if (!jf) throw IoError("report: cannot write " + dir + "/report.json");
    jf << j.dump(2) << "\n";

    std::ofstream cf(dir + "/report.csv");
    if (!cf) throw IoError("report: cannot write " + dir + "/report.csv");
    cf << "class,iou\n";
    char buf[64];
    for (size_t c = 0; c < report.per_class_iou.size(); ++c) {
        std::snprintf(buf, sizeof(buf), "%.9g", report.per_class_iou[c]);
        cf << report.class_names[c] << "," << buf << "\n";
    }
    std::snprintf(buf, sizeof(buf), "%.9g", report.miou);
    cf << "miou," << buf << "\n";
}

EvalReport load_report(const std::string& json_path) {
    std::ifstream in(json_path);
    if (!in) throw IoError("report: cannot open " + json_path);
    json j;
    in >> j;
    EvalReport r;
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.per_class_iou = j.at("per_class_iou").get<std::vector<double>>();
    r.miou = j.at("miou").get<double>();
    r.frames = j.at("frames").get<int64_t>();
    r.uncertainty_tau = j.at("uncertainty_tau").get<double>();
    r.filtered_coverage = j.at("filtered_coverage").get<double>();
    r.head = j.at("head").get<std::string>();
    return r;
}

EvalReport run_eval(net::SegNet& model, const io::Dataset& dataset, const std::string& split,
                    const std::string& head, double tau, const std::string& per_frame_dir) {
    if (head != "multinomial" && head != "evidential")
        throw ValidationError("eval: head must be multinomial or evidential");
    const auto& ids = dataset.split(split);
    if (ids.empty()) throw ValidationError("eval: split '" + split + "' is empty");

    IoUAccumulator acc(dataset.manifest().k);
    double coverage_sum = 0.0;
    int64_t coverage_n = 0;
    std::ofstream per_frame;
    if (!per_frame_dir.empty()) {
        std::filesystem::create_directories(per_frame_dir);
        per_frame.open(per_frame_dir + "/per_frame.txt");
    }

    for (const auto& scene : io::Dataset::group_scenes(ids)) {
        net::ModelState state;
        for (const auto& id : scene) {
            io::FrameData frame = dataset.load_frame(id);
            std::vector<Tensor> images;
            for (const auto& img : frame.images) {
                Tensor t({3, img.h, img.w});
                for (int y = 0; y < img.h; ++y)
                    for (int x = 0; x < img.w; ++x)
                        for (int c = 0; c < 3; ++c)
                            t.at(c, y, x) = img.px(y, x)[c] / 255.0;
                images.push_back(std::move(t));
            }
            net::ForwardOutput out = model.forward(images, frame.calib, frame.pose, state);
            state = out.state;

            Tensor pred;
            if (head == "multinomial") {
                pred = Tensor(out.d_m->value.shape());
                for (int64_t i = 0; i < pred.numel(); ++i)
                    pred[i] = out.d_m->value[i] > 0.0 ? 1.0 : 0.0;  // sigmoid(x) > 0.5
            } else {
                Tensor probs, unc;
                hlse::cluster_predictions(out.d_d->value, model.config().partition, probs, unc);
                ThresholdResult thr = threshold_uncertainty(probs, unc, tau);
                pred = thr.pred;
                coverage_sum += thr.coverage;
                ++coverage_n;
            }
            acc.add(pred, frame.label);

            if (per_frame.is_open()) {
                std::vector<double> pc = per_class_iou(pred, frame.label);
                per_frame << id;
                for (double v : pc) per_frame << " " << v;
                per_frame << "\n";
            }
        }
    }

    EvalReport report;
    report.class_names = dataset.manifest().class_names;
    report.per_class_iou = acc.per_class();
    report.miou = acc.miou();
    report.frames = acc.frames();
    report.uncertainty_tau = tau;
    report.filtered_coverage = coverage_n ? coverage_sum / coverage_n : 1.0;
    report.head = head;
    return report;
}

}  // namespace nrseg::evalkit
