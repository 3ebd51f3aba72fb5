#include "nrseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "nrseg/evalkit.hpp"
#include "nrseg/evidential.hpp"
#include "nrseg/hlse.hpp"
#include "nrseg/pgcm.hpp"

namespace nrseg::train {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json config_to_json(const TrainConfig& c) {
    json j;
    j["mode"] = c.mode;
    j["lambda1"] = c.lambda1;
    j["lambda2"] = c.lambda2;
    j["lambda3"] = c.lambda3;
    j["momentum"] = c.momentum;
    j["epochs"] = c.epochs;
    j["batch"] = c.batch;
    j["lr"] = c.lr;
    j["lr_min"] = c.lr_min;
    j["seed"] = c.seed;
    j["dataset_labeled"] = c.dataset_labeled;
    j["dataset_synthetic"] = c.dataset_synthetic;
    j["dataset_target"] = c.dataset_target;
    j["scores_path"] = c.scores_path;
    j["partition_path"] = c.partition_path;
    j["score_floor"] = c.score_floor;
    j["tau"] = c.tau;
    j["loss_variant"] = c.loss_variant;
    j["clip_len"] = c.clip_len;
    j["sigma"] = c.sigma;
    j["c1"] = c.c1;
    j["c2"] = c.c2;
    j["force_r_one"] = c.force_r_one;
    j["strong_flip"] = c.strong_flip;
    j["jitter"] = c.jitter;
    j["edl_pixel_mean"] = c.edl_pixel_mean;
    j["poly_power"] = c.poly_power;
    j["run_dir"] = c.run_dir;
    j["name"] = c.name;
    return j;
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

TrainConfig TrainConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: malformed json: ") + e.what());
    }
    TrainConfig c;
    maybe(j, "mode", c.mode);
    maybe(j, "lambda1", c.lambda1);
    maybe(j, "lambda2", c.lambda2);
    maybe(j, "lambda3", c.lambda3);
    maybe(j, "momentum", c.momentum);
    maybe(j, "epochs", c.epochs);
    maybe(j, "batch", c.batch);
    maybe(j, "lr", c.lr);
    maybe(j, "lr_min", c.lr_min);
    maybe(j, "seed", c.seed);
    maybe(j, "dataset_labeled", c.dataset_labeled);
    maybe(j, "dataset_synthetic", c.dataset_synthetic);
    maybe(j, "dataset_target", c.dataset_target);
    maybe(j, "scores_path", c.scores_path);
    maybe(j, "partition_path", c.partition_path);
    maybe(j, "score_floor", c.score_floor);
    maybe(j, "tau", c.tau);
    maybe(j, "loss_variant", c.loss_variant);
    maybe(j, "clip_len", c.clip_len);
    maybe(j, "sigma", c.sigma);
    maybe(j, "c1", c.c1);
    maybe(j, "c2", c.c2);
    maybe(j, "force_r_one", c.force_r_one);
    maybe(j, "strong_flip", c.strong_flip);
    maybe(j, "jitter", c.jitter);
    maybe(j, "edl_pixel_mean", c.edl_pixel_mean);
    maybe(j, "poly_power", c.poly_power);
    maybe(j, "run_dir", c.run_dir);
    maybe(j, "name", c.name);
    return c;
}

void TrainConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("config: cannot write " + path);
    out << config_to_json(*this).dump(2) << "\n";
}

void TrainConfig::validate() const {
    if (mode != "supervised" && mode != "ssl" && mode != "uda")
        throw ValidationError("config: mode must be supervised|ssl|uda");
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
        throw ValidationError("config: lambda weights must be >= 0");
    if (!(momentum > 0.0) || !(momentum < 1.0))
        throw ValidationError("config: teacher momentum must lie in (0,1)");
    if (epochs < 1) throw ValidationError("config: epochs must be >= 1");
    if (batch < 1) throw ValidationError("config: batch must be >= 1");
    if (clip_len < 1) throw ValidationError("config: clip_len must be >= 1");
    if (!(lr > 0.0) || !(lr_min > 0.0) || lr_min > lr)
        throw ValidationError("config: need lr >= lr_min > 0");
    if (dataset_labeled.empty()) throw ValidationError("config: dataset_labeled is required");
    if (mode == "uda" && dataset_target.empty())
        throw ValidationError("config: uda mode requires dataset_target");
    if (loss_variant != "pgcm" && loss_variant != "dice" && loss_variant != "m1" &&
        loss_variant != "m2")
        throw ValidationError("config: loss_variant must be pgcm|dice|m1|m2");
    if (score_floor < 0.0 || score_floor >= 1.0)
        throw ValidationError("config: score_floor must lie in [0,1)");
    if (!(tau > 0.0) || tau > 1.0) throw ValidationError("config: tau must lie in (0,1]");
}

std::string TrainConfig::config_hash() const { return to_hex(fnv1a64(config_to_json(*this).dump())); }

double beta_rampup(int64_t it, int64_t total_iterations) {
    if (total_iterations <= 0) throw ValidationError("beta_rampup: total iterations must be > 0");
    double half = total_iterations / 2.0;
    double t = std::min(1.0, static_cast<double>(it) / half);
    double gap = 1.0 - t;
    return 0.1 * std::exp(-5.0 * gap * gap);
}

void ema_update(std::vector<ad::Var>& teacher, const std::vector<ad::Var>& student,
                double momentum) {
    if (teacher.size() != student.size())
        throw DimensionError("ema_update: parameter list mismatch");
    for (size_t i = 0; i < teacher.size(); ++i) {
        Tensor& t = teacher[i]->value;
        const Tensor& s = student[i]->value;
        if (!t.same_shape(s)) throw DimensionError("ema_update: parameter shape mismatch");
        for (int64_t n = 0; n < t.numel(); ++n)
            t[n] = momentum * t[n] + (1.0 - momentum) * s[n];
    }
}

ad::Var pseudo_label_loss(const ad::Var& student, const Tensor& teacher) {
    if (!student->value.same_shape(teacher))
        throw DimensionError("pseudo_label_loss: shape mismatch");
    ad::Var diff = ad::sub(student, ad::constant(teacher));
    return ad::mean(ad::mul(diff, diff));
}

FrameTensors prepare_frame(const io::FrameData& frame, int feat_stride) {
    FrameTensors out;
    out.label = frame.label;
    out.calib = frame.calib;
    out.pose = frame.pose;
    for (const auto& img : frame.images) {
        Tensor t({3, img.h, img.w});
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                for (int c = 0; c < 3; ++c) t.at(c, y, x) = img.px(y, x)[c] / 255.0;
        out.images.push_back(std::move(t));
    }
    for (const auto& class_masks : frame.masks) {
        int k = static_cast<int>(class_masks.size());
        int hp = class_masks[0].h / feat_stride, wp = class_masks[0].w / feat_stride;
        Tensor t({k, hp, wp});
        for (int c = 0; c < k; ++c)
            for (int y = 0; y < hp; ++y)
                for (int x = 0; x < wp; ++x)
                    t.at(c, y, x) = class_masks[static_cast<size_t>(c)].at(y * feat_stride,
                                                                           x * feat_stride);
        out.pv_masks.push_back(std::move(t));
    }
    return out;
}

SourceLossResult source_loss(net::SegNet& model, const FrameTensors& frame,
                             const net::ModelState& state, double r, int64_t it,
                             int64_t total_iterations, const TrainConfig& cfg) {
    net::ForwardOutput out = model.forward(frame.images, frame.calib, frame.pose, state);
    SourceLossResult res;
    res.comp.r_used = r;

    ad::Var p_m = ad::sigmoid(out.d_m);
    Tensor labels = geom::to_tensor(frame.label);
    ad::Var loss_gt;
    if (cfg.loss_variant == "dice") {
        loss_gt = pgcm::dice_loss(p_m, labels, cfg.sigma);
    } else if (cfg.loss_variant == "pgcm") {
        loss_gt = pgcm::weighted_dice_loss(p_m, labels, r, cfg.sigma);
    } else {
        pgcm::VariantMode mode =
            cfg.loss_variant == "m1" ? pgcm::VariantMode::M1 : pgcm::VariantMode::M2;
        loss_gt = pgcm::variant_loss(p_m, labels, r, cfg.sigma, mode);
    }

    ad::Var loss_pv = net::perspective_loss(out.p_v, frame.pv_masks, cfg.sigma);

    ad::Var loss_tr;
    if (state.valid) {
        loss_tr = net::temporal_alignment_loss(state.prev_feature, state.prev_pose, out.bev_pre,
                                               frame.pose, model.feature_grid());
    } else {
        loss_tr = ad::constant(Tensor::scalar(0.0));
    }

    hlse::HlseLossResult hlse_res =
        hlse::hlse_loss(out.d_d, frame.label, model.config().partition, it, total_iterations);
    ad::Var loss_e = hlse_res.loss;
    if (cfg.edl_pixel_mean) {
        double hw = static_cast<double>(frame.label.grid.rows()) * frame.label.grid.cols();
        loss_e = ad::mul_scalar(loss_e, 1.0 / hw);
    }

    res.comp.gt = ad::scalar_value(loss_gt);
    res.comp.pv = ad::scalar_value(loss_pv);
    res.comp.tr = ad::scalar_value(loss_tr);
    res.comp.e = ad::scalar_value(loss_e);
    res.comp.multi_positive_cells = hlse_res.multi_positive_cells;

    res.total = ad::add(
        loss_gt, ad::add(ad::mul_scalar(loss_pv, cfg.lambda1),
                         ad::add(ad::mul_scalar(loss_tr, cfg.lambda2),
                                 ad::mul_scalar(loss_e, cfg.lambda3))));
    res.next_state = out.state;
    return res;
}

namespace {

struct Clip {
    const io::Dataset* dataset;
    std::vector<std::string> ids;
    bool synthetic = false;
};

std::vector<Clip> make_clips(const io::Dataset& ds, const std::vector<std::string>& ids,
                             bool synthetic, int clip_len) {
    std::vector<Clip> clips;
    for (const auto& scene : io::Dataset::group_scenes(ids)) {
        for (size_t start = 0; start < scene.size(); start += static_cast<size_t>(clip_len)) {
            Clip c;
            c.dataset = &ds;
            c.synthetic = synthetic;
            for (size_t i = start; i < std::min(scene.size(), start + clip_len); ++i)
                c.ids.push_back(scene[i]);
            clips.push_back(std::move(c));
        }
    }
    return clips;
}

// mirror pairing: view i maps to the view whose yaw is -yaw_i
std::vector<int> mirror_permutation(const std::vector<geom::CameraCalib>& rig) {
    std::vector<double> yaws;
    for (const auto& c : rig) {
        const auto& t = c.extrinsics;
        // optical axis in ego coordinates is the third row of R transposed
        double fx = t[2], fy = t[6];
        (void)fx;
        yaws.push_back(std::atan2(t[6], t[2]));
        (void)fy;
    }
    std::vector<int> perm(rig.size(), -1);
    for (size_t i = 0; i < yaws.size(); ++i) {
        for (size_t j = 0; j < yaws.size(); ++j) {
            if (std::fabs(wrap_angle(yaws[i] + yaws[j])) < 1e-6 ||
                (std::fabs(std::fabs(yaws[i]) - kPi) < 1e-6 &&
                 std::fabs(std::fabs(yaws[j]) - kPi) < 1e-6)) {
                perm[i] = static_cast<int>(j);
                break;
            }
        }
        if (perm[i] < 0) return {};  // asymmetric rig: flip disabled
    }
    return perm;
}

Tensor flip_w(const Tensor& t) {
    Tensor out(t.shape());
    int c = t.dim(0), h = t.dim(1), w = t.dim(2);
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(ci, y, x) = t.at(ci, y, w - 1 - x);
    return out;
}

geom::BevLabel flip_label_cols(const geom::BevLabel& label) {
    geom::BevLabel out(label.grid, label.k);
    int rows = label.grid.rows(), cols = label.grid.cols();
    for (int c = 0; c < label.k; ++c)
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) out.set(c, i, j, label.at(c, i, cols - 1 - j));
    return out;
}

struct EpochStats {
    double gt = 0, pv = 0, tr = 0, e = 0, pl = 0;
    int64_t frames = 0, target_frames = 0;
    void add_source(const LossComponents& c) {
        gt += c.gt;
        pv += c.pv;
        tr += c.tr;
        e += c.e;
        ++frames;
    }
};

class Logger {
public:
    explicit Logger(const std::string& path) : out_(path) {}
    void line(const std::string& s) {
        out_ << s << "\n";
        out_.flush();
        std::cout << s << "\n";
    }

private:
    std::ofstream out_;
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.run_dir);
    Logger log(cfg.run_dir + "/log.txt");
    cfg.save(cfg.run_dir + "/config.json");

    io::Dataset labeled = io::Dataset::open(cfg.dataset_labeled);
    const int k = labeled.manifest().k;

    hlse::ClusterPartition partition =
        cfg.partition_path.empty() ? hlse::ClusterPartition::one_vs_rest(k)
                                   : hlse::ClusterPartition::load(cfg.partition_path, k);

    // partition health check against a label sample
    {
        std::vector<geom::BevLabel> sample;
        const auto& ids = labeled.split("labeled");
        for (size_t i = 0; i < std::min<size_t>(ids.size(), 4); ++i)
            sample.push_back(labeled.load_frame(ids[i]).label);
        std::vector<const geom::BevLabel*> ptrs;
        for (const auto& l : sample) ptrs.push_back(&l);
        hlse::ExclusivityReport report = hlse::validate_partition(partition, ptrs);
        for (size_t m = 0; m < report.clusters.size(); ++m)
            if (!report.clusters[m].pass)
                log.line("warning: cluster " + std::to_string(m) + " exclusivity violated, " +
                         fmt(report.clusters[m].overlap_fraction) + " of cells multi-positive");
    }

    // model setup from the first labeled frame's geometry
    const auto& labeled_ids = labeled.split("labeled");
    if (labeled_ids.empty()) throw ValidationError("train: labeled split is empty");
    io::FrameData probe = labeled.load_frame(labeled_ids.front());
    net::ModelConfig mc;
    mc.image_h = probe.images[0].h;
    mc.image_w = probe.images[0].w;
    mc.num_cams = static_cast<int>(probe.images.size());
    mc.grid = labeled.manifest().grid;
    mc.k = k;
    mc.c1 = cfg.c1;
    mc.c2 = cfg.c2;
    mc.partition = partition;
    mc.seed = cfg.seed;

    net::SegNet student(mc);
    net::SegNet teacher(mc);
    teacher.copy_parameters_from(student);
    for (auto& p : teacher.parameters()) p->requires_grad = false;

    // datasets and clips
    std::vector<Clip> units = make_clips(labeled, labeled_ids, false, cfg.clip_len);
    size_t labeled_frames = labeled_ids.size();

    std::unique_ptr<io::Dataset> synthetic;
    std::map<std::string, pgcm::ConsistencyScore> scores;
    size_t synthetic_frames = 0;
    if (!cfg.dataset_synthetic.empty()) {
        synthetic = std::make_unique<io::Dataset>(io::Dataset::open(cfg.dataset_synthetic));
        const auto& syn_ids = synthetic->split("synthetic");
        synthetic_frames = syn_ids.size();
        auto syn_clips = make_clips(*synthetic, syn_ids, true, cfg.clip_len);
        units.insert(units.end(), syn_clips.begin(), syn_clips.end());
        std::string spath = cfg.scores_path.empty() ? cfg.dataset_synthetic + "/scores.json"
                                                    : cfg.scores_path;
        if (!syn_ids.empty()) scores = io::read_scores(spath);
    }
    if (synthetic_frames > labeled_frames)
        log.line("warning: synthetic frames (" + std::to_string(synthetic_frames) +
                 ") exceed labeled frames (" + std::to_string(labeled_frames) +
                 "); accuracy typically declines past parity");

    std::unique_ptr<io::Dataset> target;
    std::vector<Clip> target_units;
    if (cfg.mode != "supervised") {
        if (!cfg.dataset_target.empty())
            target = std::make_unique<io::Dataset>(io::Dataset::open(cfg.dataset_target));
        else
            target = std::make_unique<io::Dataset>(io::Dataset::open(cfg.dataset_labeled));
        target_units = make_clips(*target, target->split("unlabeled"), false, cfg.clip_len);
        if (target_units.empty())
            throw ValidationError("train: " + cfg.mode + " mode needs an unlabeled split");
    }

    // validation source: target-domain val when adapting across domains
    const io::Dataset* val_ds = &labeled;
    if (cfg.mode == "uda" && target && !target->split("val").empty()) val_ds = target.get();

    int64_t steps_per_epoch =
        static_cast<int64_t>((units.size() + cfg.batch - 1) / cfg.batch);
    int64_t total_steps = steps_per_epoch * cfg.epochs;
    log.line("training " + cfg.name + ": " + std::to_string(units.size()) + " clips/epoch, " +
             std::to_string(total_steps) + " steps total, mode " + cfg.mode + ", loss " +
             cfg.loss_variant);

    // SSL target supervision can use real perspective masks; UDA cannot
    bool target_has_masks = cfg.mode == "ssl";
    std::vector<int> mirror_perm = mirror_permutation(probe.calib);
    bool flip_enabled = cfg.strong_flip && !mirror_perm.empty();

    Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    Rng aug_rng(cfg.seed ^ 0x243f6a8885a308d3ull);

    std::vector<ad::Var>& params = student.parameters();
    std::vector<Tensor> adam_m, adam_v;
    for (auto& p : params) {
        adam_m.push_back(Tensor::zeros(p->value.shape()));
        adam_v.push_back(Tensor::zeros(p->value.shape()));
    }

    std::ofstream metrics(cfg.run_dir + "/metrics.csv");
    metrics << "epoch,loss_gt,loss_pv,loss_tr,loss_e,loss_pl,beta,lambda_k,miou";
    for (const auto& name : labeled.manifest().class_names) metrics << ",iou_" << name;
    metrics << "\n";

    TrainResult result;
    result.run_dir = cfg.run_dir;
    int64_t it = 0;
    size_t target_cursor = 0;
    std::vector<size_t> target_order(target_units.size());
    for (size_t i = 0; i < target_order.size(); ++i) target_order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order(units.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
        if (!target_order.empty())
            std::shuffle(target_order.begin(), target_order.end(), shuffle_rng.engine());

        EpochStats stats;
        double beta = 0.0, lambda_k = 0.0;

        for (size_t u = 0; u < order.size(); ++u) {
            const Clip& clip = units[order[u]];
            student.zero_grad();

            // --- source pass ---
            net::ModelState state;
            ad::Var clip_loss;
            int frames_in_clip = 0;
            for (const auto& id : clip.ids) {
                io::FrameData fd = clip.dataset->load_frame(id);
                FrameTensors frame = prepare_frame(fd, student.feature_stride_image());
                double r = 1.0;
                if (clip.synthetic && !cfg.force_r_one) {
                    auto it_s = scores.find(id);
                    if (it_s == scores.end())
                        throw ValidationError("train: missing consistency score for synthetic frame " +
                                              id);
                    r = std::clamp(it_s->second.value, std::max(cfg.score_floor, 1e-6), 1.0);
                }
                SourceLossResult res = source_loss(student, frame, state, r, it, total_steps, cfg);
                state = res.next_state;
                stats.add_source(res.comp);
                clip_loss = frames_in_clip == 0 ? res.total : ad::add(clip_loss, res.total);
                ++frames_in_clip;
            }
            clip_loss = ad::mul_scalar(clip_loss, 1.0 / frames_in_clip);

            // --- target pass (mean teacher) ---
            beta = beta_rampup(it, total_steps);
            lambda_k = edl::kl_weight(it, total_steps);
            if (!target_units.empty()) {
                const Clip& tclip = target_units[target_order[target_cursor % target_order.size()]];
                ++target_cursor;
                bool flip = flip_enabled && aug_rng.bernoulli(0.5);

                net::ModelState s_state, t_state;
                ad::Var target_total;
                int tcount = 0;
                for (const auto& id : tclip.ids) {
                    io::FrameData fd = tclip.dataset->load_frame(id);
                    FrameTensors weak = prepare_frame(fd, student.feature_stride_image());

                    // strong view: photometric jitter + optional mirror flip
                    FrameTensors strong = weak;
                    for (auto& img : strong.images) {
                        double gain = 1.0 + aug_rng.uniform(-cfg.jitter, cfg.jitter);
                        double bias = aug_rng.uniform(-cfg.jitter, cfg.jitter) * 0.5;
                        for (int64_t i = 0; i < img.numel(); ++i)
                            img[i] = std::clamp(img[i] * gain + bias, 0.0, 1.0);
                    }
                    if (flip) {
                        FrameTensors flipped = strong;
                        for (size_t v = 0; v < strong.images.size(); ++v) {
                            flipped.images[v] =
                                flip_w(strong.images[static_cast<size_t>(mirror_perm[v])]);
                            flipped.pv_masks[v] =
                                flip_w(strong.pv_masks[static_cast<size_t>(mirror_perm[v])]);
                        }
                        flipped.label = flip_label_cols(strong.label);
                        strong = std::move(flipped);
                    }

                    net::ForwardOutput t_out =
                        teacher.forward(weak.images, weak.calib, weak.pose, t_state);
                    t_state = t_out.state;
                    net::ForwardOutput s_out =
                        student.forward(strong.images, strong.calib, strong.pose, s_state);

                    // teacher targets mapped into the student's geometry
                    Tensor t_pm(t_out.d_m->value.shape());
                    for (int64_t i = 0; i < t_pm.numel(); ++i)
                        t_pm[i] = 1.0 / (1.0 + std::exp(-t_out.d_m->value[i]));
                    Tensor t_probs, t_unc;
                    hlse::cluster_predictions(t_out.d_d->value, partition, t_probs, t_unc);
                    if (flip) {
                        t_pm = flip_w(t_pm);
                        t_probs = flip_w(t_probs);
                    }

                    ad::Var loss_pl = pseudo_label_loss(ad::sigmoid(s_out.d_m), t_pm);
                    ad::Var loss_e_t =
                        pseudo_label_loss(hlse::cluster_probabilities(s_out.d_d, partition),
                                          t_probs);

                    ad::Var loss_pv_t;
                    if (target_has_masks) {
                        loss_pv_t = net::perspective_loss(s_out.p_v, strong.pv_masks, cfg.sigma);
                    } else {
                        std::vector<Tensor> pseudo;
                        for (size_t v = 0; v < t_out.p_v.size(); ++v) {
                            size_t src = flip ? static_cast<size_t>(mirror_perm[v]) : v;
                            Tensor m(t_out.p_v[src]->value.shape());
                            for (int64_t i = 0; i < m.numel(); ++i)
                                m[i] = t_out.p_v[src]->value[i] > 0.5 ? 1.0 : 0.0;
                            pseudo.push_back(flip ? flip_w(m) : m);
                        }
                        loss_pv_t = net::perspective_loss(s_out.p_v, pseudo, cfg.sigma);
                    }

                    ad::Var loss_tr_t;
                    if (s_state.valid) {
                        loss_tr_t = net::temporal_alignment_loss(s_state.prev_feature,
                                                                 s_state.prev_pose, s_out.bev_pre,
                                                                 strong.pose,
                                                                 student.feature_grid());
                    } else {
                        loss_tr_t = ad::constant(Tensor::scalar(0.0));
                    }
                    s_state = s_out.state;

                    stats.pl += ad::scalar_value(loss_pl);
                    ++stats.target_frames;

                    ad::Var frame_t = ad::add(
                        ad::mul_scalar(ad::add(loss_pl, ad::mul_scalar(loss_e_t, cfg.lambda3)),
                                       beta),
                        ad::add(ad::mul_scalar(loss_pv_t, cfg.lambda1),
                                ad::mul_scalar(loss_tr_t, cfg.lambda2)));
                    target_total = tcount == 0 ? frame_t : ad::add(target_total, frame_t);
                    ++tcount;
                }
                clip_loss = ad::add(clip_loss, ad::mul_scalar(target_total, 1.0 / tcount));
            }

            double loss_value = ad::scalar_value(clip_loss);
            if (!std::isfinite(loss_value)) {
                log.line("numerical failure at step " + std::to_string(it) + ": loss " +
                         fmt(loss_value) + "; aborting");
                throw NumericalError("train: non-finite loss at step " + std::to_string(it));
            }

            ad::backward(clip_loss);

            double lr = cfg.lr_min + (cfg.lr - cfg.lr_min) *
                                         std::pow(1.0 - static_cast<double>(it) / total_steps,
                                                  cfg.poly_power);
            // Adam with the polynomial schedule; adaptive scaling bridges the
            // magnitude gap between the single-fraction DICE and the EDL terms.
            double t1 = 1.0 - std::pow(0.9, it + 1);
            double t2 = 1.0 - std::pow(0.999, it + 1);
            for (size_t p = 0; p < params.size(); ++p) {
                Tensor& m = adam_m[p];
                Tensor& v = adam_v[p];
                Tensor& g = params[p]->grad;
                Tensor& w = params[p]->value;
                for (int64_t i = 0; i < w.numel(); ++i) {
                    m[i] = 0.9 * m[i] + 0.1 * g[i];
                    v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                    w[i] -= lr * (m[i] / t1) / (std::sqrt(v[i] / t2) + 1e-8);
                }
            }
            ema_update(teacher.parameters(), student.parameters(), cfg.momentum);
            ++it;
        }

        evalkit::EvalReport report =
            evalkit::run_eval(student, *val_ds, "val", "multinomial", cfg.tau);
        double n = std::max<int64_t>(stats.frames, 1);
        double tn = std::max<int64_t>(stats.target_frames, 1);
        metrics << epoch + 1 << "," << fmt(stats.gt / n) << "," << fmt(stats.pv / n) << ","
                << fmt(stats.tr / n) << "," << fmt(stats.e / n) << "," << fmt(stats.pl / tn) << ","
                << fmt(beta) << "," << fmt(lambda_k) << "," << fmt(report.miou);
        for (double v : report.per_class_iou) metrics << "," << fmt(v);
        metrics << "\n";
        metrics.flush();
        log.line("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
                 " loss_gt " + fmt(stats.gt / n) + " miou " + fmt(report.miou));

        result.epoch_loss_gt.push_back(stats.gt / n);
        result.final_miou = report.miou;
        result.final_per_class = report.per_class_iou;
    }

    result.steps = it;
    std::string chash = cfg.config_hash();
    student.save_checkpoint(cfg.run_dir + "/ckpt_student.bin", "student", it, chash);
    teacher.save_checkpoint(cfg.run_dir + "/ckpt_teacher.bin", "teacher", it, chash);
    return result;
}

}  // namespace nrseg::train
