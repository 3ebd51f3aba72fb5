#include "nrseg/segnet.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "nrseg/pgcm.hpp"

namespace nrseg::net {

using json = nlohmann::json;

namespace {

Tensor he_init(Rng& rng, std::vector<int> shape, int fan_in) {
    Tensor t(shape);
    double stddev = std::sqrt(2.0 / fan_in);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

// sub-pixel 2x decoder: channel (c*4 + dy*2 + dx) at (y,x) lands on output
// (c, 2y+dy, 2x+dx)
std::shared_ptr<const ad::SparseLinear> make_pixel_shuffle2(int c_out, int h, int w) {
    auto m = std::make_shared<ad::SparseLinear>();
    int oh = h * 2, ow = w * 2;
    m->in_numel = static_cast<int64_t>(c_out) * 4 * h * w;
    m->out_shape = {c_out, oh, ow};
    m->row_offsets.push_back(0);
    for (int ch = 0; ch < c_out; ++ch) {
        for (int oy = 0; oy < oh; ++oy) {
            int y = oy / 2, dy = oy % 2;
            for (int ox = 0; ox < ow; ++ox) {
                int x = ox / 2, dx = ox % 2;
                int in_ch = ch * 4 + dy * 2 + dx;
                m->col_idx.push_back((static_cast<int64_t>(in_ch) * h + y) * w + x);
                m->weights.push_back(1.0);
                m->row_offsets.push_back(static_cast<int64_t>(m->col_idx.size()));
            }
        }
    }
    return m;
}

uint64_t rig_hash(const std::vector<geom::CameraCalib>& calib) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& c : calib) {
        uint64_t ch = c.content_hash();
        h = fnv1a64(&ch, sizeof(ch), h);
    }
    return h;
}

}  // namespace

uint64_t ModelConfig::content_hash() const {
    json j;
    j["image_h"] = image_h;
    j["image_w"] = image_w;
    j["num_cams"] = num_cams;
    j["grid"] = {grid.x_min, grid.x_max, grid.y_min, grid.y_max, grid.resolution};
    j["k"] = k;
    j["c1"] = c1;
    j["c2"] = c2;
    j["clusters"] = partition.clusters;
    j["complement"] = partition.complement;
    j["seed"] = seed;
    return fnv1a64(j.dump());
}

ad::Var SegNet::param(const std::string& name, Tensor init) {
    ad::Var p = ad::parameter(std::move(init));
    params_.push_back(p);
    param_names_.push_back(name);
    by_name_[name] = p;
    return p;
}

SegNet::SegNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.partition.validate_structure();
    if (cfg_.partition.num_classes != cfg_.k)
        throw ValidationError("model: partition class count must equal k");
    if (cfg_.image_h % 4 != 0 || cfg_.image_w % 4 != 0)
        throw ValidationError("model: image size must be divisible by 4");
    if (cfg_.grid.rows() % 2 != 0 || cfg_.grid.cols() % 2 != 0)
        throw ValidationError("model: grid dims must be even");
    feat_grid_ = geom::BevGrid::make(cfg_.grid.x_min, cfg_.grid.x_max, cfg_.grid.y_min,
                                     cfg_.grid.y_max, cfg_.grid.resolution * 2.0);

    Rng rng(cfg_.seed);
    int c1 = cfg_.c1, c2 = cfg_.c2, k = cfg_.k;
    int kz = cfg_.partition.head_channels();

    param("enc.w1", he_init(rng, {c1, 3, 3, 3}, 3 * 9));
    param("enc.b1", Tensor({c1}));
    param("enc.w2", he_init(rng, {c2, c1, 3, 3}, c1 * 9));
    param("enc.b2", Tensor({c2}));
    param("enc.w3", he_init(rng, {c2, c2, 3, 3}, c2 * 9));
    param("enc.b3", Tensor({c2}));
    param("pv.w", he_init(rng, {k, c2, 1, 1}, c2));
    param("pv.b", Tensor({k}));
    param("gate.w", he_init(rng, {c2, 2 * c2, 1, 1}, 2 * c2));
    param("gate.b", Tensor({c2}, 1.0));
    param("bev.w1", he_init(rng, {c2, c2 + 3, 3, 3}, (c2 + 3) * 9));
    param("bev.b1", Tensor({c2}));
    param("bev.w2", he_init(rng, {c2, c2, 3, 3}, c2 * 9));
    param("bev.b2", Tensor({c2}));
    param("head_m.w", he_init(rng, {k * 4, c2, 1, 1}, c2));
    param("head_m.b", Tensor({k * 4}));
    param("head_d.w", he_init(rng, {kz * 4, c2, 1, 1}, c2));
    param("head_d.b", Tensor({kz * 4}));

    upsample_k_ = make_pixel_shuffle2(k, feat_grid_.rows(), feat_grid_.cols());
    upsample_kz_ = make_pixel_shuffle2(kz, feat_grid_.rows(), feat_grid_.cols());
}

const std::vector<std::shared_ptr<const ad::SparseLinear>>& SegNet::ipm_maps(
    const std::vector<geom::CameraCalib>& calib, int channels) {
    uint64_t key = rig_hash(calib) ^ static_cast<uint64_t>(channels);
    auto it = ipm_cache_.find(key);
    if (it != ipm_cache_.end()) return it->second;

    int hp = cfg_.image_h / 4, wp = cfg_.image_w / 4;
    int hf = feat_grid_.rows(), wf = feat_grid_.cols();
    int c2 = channels;
    int64_t cells = static_cast<int64_t>(hf) * wf;

    struct Tap {
        int64_t col;
        double w;
    };
    // visibility count first, so weights can average across cameras
    std::vector<int> vis(cells, 0);
    std::vector<std::vector<std::array<double, 3>>> samples(calib.size());
    for (size_t cam = 0; cam < calib.size(); ++cam) {
        samples[cam].assign(cells, {0, 0, -1});
        for (int i = 0; i < hf; ++i) {
            for (int j = 0; j < wf; ++j) {
                geom::PixelProjection p = geom::project_ego_point(
                    calib[cam], feat_grid_.center_x(i), feat_grid_.center_y(j), 0.0);
                if (p.behind) continue;
                double fu = (p.u - 0.5) / 4.0;
                double fv = (p.v - 0.5) / 4.0;
                if (fu < 0.0 || fv < 0.0 || fu > wp - 1.0 || fv > hp - 1.0) continue;
                int64_t cell = static_cast<int64_t>(i) * wf + j;
                samples[cam][cell] = {fu, fv, 1.0};
                ++vis[cell];
            }
        }
    }

    std::vector<std::shared_ptr<const ad::SparseLinear>> maps;
    for (size_t cam = 0; cam < calib.size(); ++cam) {
        auto m = std::make_shared<ad::SparseLinear>();
        m->in_numel = static_cast<int64_t>(c2) * hp * wp;
        m->out_shape = {c2, hf, wf};
        m->row_offsets.reserve(static_cast<size_t>(c2) * cells + 1);
        m->row_offsets.push_back(0);
        for (int ch = 0; ch < c2; ++ch) {
            for (int64_t cell = 0; cell < cells; ++cell) {
                const auto& s = samples[cam][cell];
                if (s[2] > 0.0) {
                    double scale = 1.0 / vis[cell];
                    int x0 = static_cast<int>(std::floor(s[0]));
                    int y0 = static_cast<int>(std::floor(s[1]));
                    double ax = s[0] - x0, ay = s[1] - y0;
                    for (int dy = 0; dy <= 1; ++dy) {
                        int yy = std::clamp(y0 + dy, 0, hp - 1);
                        double wy = dy ? ay : 1.0 - ay;
                        for (int dx = 0; dx <= 1; ++dx) {
                            int xx = std::clamp(x0 + dx, 0, wp - 1);
                            double wx = dx ? ax : 1.0 - ax;
                            double w = wy * wx * scale;
                            if (w == 0.0) continue;
                            m->col_idx.push_back((static_cast<int64_t>(ch) * hp + yy) * wp + xx);
                            m->weights.push_back(w);
                        }
                    }
                }
                m->row_offsets.push_back(static_cast<int64_t>(m->col_idx.size()));
            }
        }
        maps.push_back(m);
    }
    auto [ins, ok] = ipm_cache_.emplace(key, std::move(maps));
    (void)ok;
    return ins->second;
}

ad::Var SegNet::temporal_fuse(const ad::Var& prev_aligned, const ad::Var& cur) {
    if (!prev_aligned->value.same_shape(cur->value))
        throw DimensionError("temporal_fuse: shape mismatch");
    ad::Var gate = ad::sigmoid(ad::conv2d(ad::concat_channels(cur, prev_aligned),
                                          by_name_.at("gate.w"), by_name_.at("gate.b"), 1, 0));
    ad::Var one_minus = ad::add_scalar(ad::neg(gate), 1.0);
    return ad::add(ad::mul(gate, cur), ad::mul(one_minus, prev_aligned));
}

ForwardOutput SegNet::forward(const std::vector<Tensor>& images,
                              const std::vector<geom::CameraCalib>& calib,
                              const geom::EgoPose& pose, const ModelState& state) {
    if (images.size() != static_cast<size_t>(cfg_.num_cams) || images.size() != calib.size())
        throw DimensionError("forward: camera/view count mismatch");
    for (const auto& img : images)
        if (img.ndim() != 3 || img.dim(0) != 3 || img.dim(1) != cfg_.image_h ||
            img.dim(2) != cfg_.image_w)
            throw DimensionError("forward: image shape mismatch");

    const auto& maps = ipm_maps(calib, cfg_.c2);
    const auto& rgb_maps = ipm_maps(calib, 3);
    int hp = cfg_.image_h / 4, wp = cfg_.image_w / 4;
    ForwardOutput out;
    ad::Var bev_pre;
    Tensor rgb_bev({3, feat_grid_.rows(), feat_grid_.cols()});
    for (size_t cam = 0; cam < images.size(); ++cam) {
        ad::Var x = ad::constant(images[cam]);
        ad::Var h1 = ad::relu(ad::instance_norm(
            ad::conv2d(x, by_name_.at("enc.w1"), by_name_.at("enc.b1"), 2, 1)));
        ad::Var h2 = ad::relu(ad::instance_norm(
            ad::conv2d(h1, by_name_.at("enc.w2"), by_name_.at("enc.b2"), 2, 1)));
        ad::Var h3 = ad::relu(ad::instance_norm(
            ad::conv2d(h2, by_name_.at("enc.w3"), by_name_.at("enc.b3"), 1, 1)));
        out.p_v.push_back(
            ad::sigmoid(ad::conv2d(h3, by_name_.at("pv.w"), by_name_.at("pv.b"), 1, 0)));
        ad::Var lifted = ad::linear_map(h3, maps[cam]);
        bev_pre = cam == 0 ? lifted : ad::add(bev_pre, lifted);

        // color skip: box-filtered image lifted through the same geometry;
        // constant wrt the parameters, so it costs nothing in backward
        Tensor pooled({3, hp, wp});
        for (int c = 0; c < 3; ++c)
            for (int fy = 0; fy < hp; ++fy)
                for (int fx = 0; fx < wp; ++fx) {
                    double acc = 0.0;
                    for (int dy = 0; dy < 4; ++dy)
                        for (int dx = 0; dx < 4; ++dx)
                            acc += images[cam].at(c, fy * 4 + dy, fx * 4 + dx);
                    pooled.at(c, fy, fx) = acc / 16.0;
                }
        const auto& m = rgb_maps[cam];
        for (int64_t r = 0; r < rgb_bev.numel(); ++r) {
            double acc = 0.0;
            for (int64_t t = m->row_offsets[r]; t < m->row_offsets[r + 1]; ++t)
                acc += m->weights[t] * pooled[m->col_idx[t]];
            rgb_bev[r] += acc;
        }
    }
    out.bev_pre = bev_pre;

    if (state.valid) {
        Tensor aligned =
            geom::ego_align(state.prev_feature, state.prev_pose, pose, feat_grid_,
                            geom::Interp::Bilinear);
        out.bev_fused = temporal_fuse(ad::constant(aligned), bev_pre);
    } else {
        out.bev_fused = bev_pre;
    }

    ad::Var enc_in = ad::concat_channels(out.bev_fused, ad::constant(rgb_bev));
    ad::Var enc = ad::relu(ad::instance_norm(
        ad::conv2d(enc_in, by_name_.at("bev.w1"), by_name_.at("bev.b1"), 1, 1)));
    enc = ad::relu(ad::instance_norm(
        ad::conv2d(enc, by_name_.at("bev.w2"), by_name_.at("bev.b2"), 1, 1)));

    out.d_m = ad::linear_map(ad::conv2d(enc, by_name_.at("head_m.w"), by_name_.at("head_m.b"), 1, 0),
                             upsample_k_);
    out.d_d = ad::linear_map(ad::conv2d(enc, by_name_.at("head_d.w"), by_name_.at("head_d.b"), 1, 0),
                             upsample_kz_);

    out.state.prev_feature = out.bev_fused->value;  // detached copy
    out.state.prev_pose = pose;
    out.state.valid = true;
    return out;
}

void SegNet::zero_grad() {
    for (auto& p : params_) {
        p->grad = Tensor();
        p->ensure_grad();
    }
}

void SegNet::copy_parameters_from(const SegNet& other) {
    if (other.params_.size() != params_.size())
        throw DimensionError("copy_parameters_from: parameter list mismatch");
    for (size_t i = 0; i < params_.size(); ++i) {
        if (!params_[i]->value.same_shape(other.params_[i]->value))
            throw DimensionError("copy_parameters_from: shape mismatch");
        params_[i]->value = other.params_[i]->value;
    }
}

uint64_t SegNet::parameter_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params_)
        h = fnv1a64(p->value.data(), sizeof(double) * static_cast<size_t>(p->value.numel()), h);
    return h;
}

void SegNet::save_checkpoint(const std::string& path, const std::string& role, int64_t step,
                             const std::string& config_hash) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot write " + path);
    const char magic[4] = {'N', 'R', 'C', 'K'};
    uint32_t version = 1;
    uint64_t count = 0;
    for (const auto& p : params_) count += static_cast<uint64_t>(p->value.numel());
    out.write(magic, 4);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& p : params_)
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::streamsize>(sizeof(double) * p->value.numel()));

    json j;
    j["step"] = step;
    j["config_hash"] = config_hash;
    j["role"] = role;
    json model;
    model["image_h"] = cfg_.image_h;
    model["image_w"] = cfg_.image_w;
    model["num_cams"] = cfg_.num_cams;
    model["grid"] = {{"x_min", cfg_.grid.x_min}, {"x_max", cfg_.grid.x_max},
                     {"y_min", cfg_.grid.y_min}, {"y_max", cfg_.grid.y_max},
                     {"resolution", cfg_.grid.resolution}};
    model["k"] = cfg_.k;
    model["c1"] = cfg_.c1;
    model["c2"] = cfg_.c2;
    model["clusters"] = cfg_.partition.clusters;
    model["complement"] = cfg_.partition.complement;
    model["seed"] = cfg_.seed;
    j["model"] = model;
    std::ofstream sidecar(path + ".json");
    if (!sidecar) throw IoError("checkpoint: cannot write " + path + ".json");
    sidecar << j.dump(2) << "\n";
}

ModelConfig SegNet::read_checkpoint_config(const std::string& path) {
    std::ifstream sidecar(path + ".json");
    if (!sidecar) throw IoError("checkpoint: cannot open " + path + ".json");
    json j;
    sidecar >> j;
    const json& m = j.at("model");
    ModelConfig cfg;
    cfg.image_h = m.at("image_h").get<int>();
    cfg.image_w = m.at("image_w").get<int>();
    cfg.num_cams = m.at("num_cams").get<int>();
    const auto& g = m.at("grid");
    cfg.grid = geom::BevGrid::make(g.at("x_min").get<double>(), g.at("x_max").get<double>(),
                                   g.at("y_min").get<double>(), g.at("y_max").get<double>(),
                                   g.at("resolution").get<double>());
    cfg.k = m.at("k").get<int>();
    cfg.c1 = m.at("c1").get<int>();
    cfg.c2 = m.at("c2").get<int>();
    cfg.partition.num_classes = cfg.k;
    cfg.partition.clusters = m.at("clusters").get<std::vector<std::vector<int>>>();
    cfg.partition.complement = m.at("complement").get<std::vector<bool>>();
    cfg.seed = m.at("seed").get<uint64_t>();
    return cfg;
}

std::string SegNet::load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    char magic[4];
    uint32_t version;
    uint64_t count;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&count), 8);
    if (!in || std::memcmp(magic, "NRCK", 4) != 0 || version != 1)
        throw IoError("checkpoint: bad header in " + path);
    uint64_t expect = 0;
    for (const auto& p : params_) expect += static_cast<uint64_t>(p->value.numel());
    if (count != expect) throw ValidationError("checkpoint: parameter count mismatch");
    for (auto& p : params_) {
        in.read(reinterpret_cast<char*>(p->value.data()),
                static_cast<std::streamsize>(sizeof(double) * p->value.numel()));
    }
    if (!in) throw IoError("checkpoint: truncated payload in " + path);

    std::ifstream sidecar(path + ".json");
    if (!sidecar) throw IoError("checkpoint: cannot open " + path + ".json");
    json j;
    sidecar >> j;
    return j.at("config_hash").get<std::string>();
}

ad::Var perspective_loss(const std::vector<ad::Var>& p_v, const std::vector<Tensor>& targets,
                         double sigma) {
    if (p_v.empty() || p_v.size() != targets.size())
        throw DimensionError("perspective_loss: view count mismatch");
    ad::Var pred = p_v[0];
    Tensor lab = targets[0];
    for (size_t v = 1; v < p_v.size(); ++v) {
        pred = ad::concat_channels(pred, p_v[v]);
        const Tensor& t = targets[v];
        Tensor merged({lab.dim(0) + t.dim(0), lab.dim(1), lab.dim(2)});
        std::copy_n(lab.data(), lab.numel(), merged.data());
        std::copy_n(t.data(), t.numel(), merged.data() + lab.numel());
        lab = merged;
    }
    return pgcm::dice_loss(pred, lab, sigma);
}

ad::Var temporal_alignment_loss(const Tensor& prev_feature, const geom::EgoPose& prev_pose,
                                const ad::Var& cur_pre, const geom::EgoPose& cur_pose,
                                const geom::BevGrid& feat_grid) {
    if (!prev_feature.same_shape(cur_pre->value))
        throw DimensionError("temporal_alignment_loss: shape mismatch");
    Tensor aligned = geom::ego_align(prev_feature, prev_pose, cur_pose, feat_grid,
                                     geom::Interp::Bilinear);
    MaskImage m_c = geom::overlap_mask(prev_pose, cur_pose, feat_grid);
    int c = prev_feature.dim(0);
    Tensor mask(prev_feature.shape());
    int64_t hw = static_cast<int64_t>(prev_feature.dim(1)) * prev_feature.dim(2);
    for (int ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < hw; ++i) mask[ch * hw + i] = m_c.data[static_cast<size_t>(i)];
    ad::Var diff = ad::sub(ad::constant(aligned), cur_pre);
    return ad::mean(ad::abs_op(ad::mul(diff, ad::constant(mask))));
}

}  // namespace nrseg::net
