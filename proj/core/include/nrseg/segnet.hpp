#ifndef NRSEG_SEGNET_HPP
#define NRSEG_SEGNET_HPP

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nrseg/autodiff.hpp"
#include "nrseg/camera_geometry.hpp"
#include "nrseg/hlse.hpp"

namespace nrseg::net {

struct ModelConfig {
    int image_h = 128;
    int image_w = 352;
    int num_cams = 6;
    geom::BevGrid grid = geom::BevGrid::make(-50, 50, -50, 50, 0.5);
    int k = 6;
    int c1 = 16;  // encoder stage-1 width
    int c2 = 24;  // feature width (perspective and BEV)
    hlse::ClusterPartition partition;
    uint64_t seed = 0;

    uint64_t content_hash() const;
};

// Streaming recurrent state: the previous fused BEV feature, detached.
struct ModelState {
    Tensor prev_feature;
    geom::EgoPose prev_pose;
    bool valid = false;
};

struct ForwardOutput {
    std::vector<ad::Var> p_v;  // per-view class probabilities at feature stride
    ad::Var d_m;               // [k, Hb, Wb] multinomial logits
    ad::Var d_d;               // [k+z, Hb, Wb] evidential logits
    ad::Var bev_pre;           // pre-fusion BEV feature (alignment loss target)
    ad::Var bev_fused;         // fused BEV feature
    ModelState state;
};

// Per-view conv encoder with an auxiliary perspective head, ground-plane
// (IPM) lift to BEV, gated streaming fusion, shared BEV encoder, two heads.
class SegNet {
public:
    explicit SegNet(ModelConfig cfg);

    ForwardOutput forward(const std::vector<Tensor>& images,
                          const std::vector<geom::CameraCalib>& calib, const geom::EgoPose& pose,
                          const ModelState& state);

    // Gated blend g.cur + (1-g).prev_aligned with a learned per-cell gate.
    ad::Var temporal_fuse(const ad::Var& prev_aligned, const ad::Var& cur);

    std::vector<ad::Var>& parameters() { return params_; }
    const std::vector<std::string>& parameter_names() const { return param_names_; }
    void zero_grad();
    void copy_parameters_from(const SegNet& other);
    uint64_t parameter_hash() const;

    const ModelConfig& config() const { return cfg_; }
    geom::BevGrid feature_grid() const { return feat_grid_; }
    int feature_stride_image() const { return 4; }

    void save_checkpoint(const std::string& path, const std::string& role, int64_t step,
                         const std::string& config_hash) const;
    // Restores weights; validates parameter count. Returns the sidecar
    // config hash for mismatch warnings.
    std::string load_checkpoint(const std::string& path);
    static ModelConfig read_checkpoint_config(const std::string& path);

private:
    ModelConfig cfg_;
    geom::BevGrid feat_grid_;
    std::vector<ad::Var> params_;
    std::vector<std::string> param_names_;
    std::map<std::string, ad::Var> by_name_;

    std::map<uint64_t, std::vector<std::shared_ptr<const ad::SparseLinear>>> ipm_cache_;
    std::shared_ptr<const ad::SparseLinear> upsample_k_;
    std::shared_ptr<const ad::SparseLinear> upsample_kz_;

    ad::Var param(const std::string& name, Tensor init);
    // one fixed lift per camera for `channels`-deep maps at feature stride
    const std::vector<std::shared_ptr<const ad::SparseLinear>>& ipm_maps(
        const std::vector<geom::CameraCalib>& calib, int channels);
};

// DICE segmentation loss over the concatenated per-view predictions.
ad::Var perspective_loss(const std::vector<ad::Var>& p_v, const std::vector<Tensor>& targets,
                         double sigma);

// Mean absolute difference between the aligned previous feature and the
// current pre-fusion feature, restricted to the overlap mask.
ad::Var temporal_alignment_loss(const Tensor& prev_feature, const geom::EgoPose& prev_pose,
                                const ad::Var& cur_pre, const geom::EgoPose& cur_pose,
                                const geom::BevGrid& feat_grid);

}  // namespace nrseg::net

#endif  // NRSEG_SEGNET_HPP
