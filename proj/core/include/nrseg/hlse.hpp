#ifndef NRSEG_HLSE_HPP
#define NRSEG_HLSE_HPP

#include <string>
#include <vector>

#include "nrseg/autodiff.hpp"
#include "nrseg/camera_geometry.hpp"
#include "nrseg/tensor.hpp"

namespace nrseg::hlse {

// Grouping of class indices into internally mutually exclusive clusters.
// Clusters with `complement` get an extra learned channel representing
// "none of the members"; its logits live at channel k + ordinal.
struct ClusterPartition {
    std::vector<std::vector<int>> clusters;
    std::vector<bool> complement;
    int num_classes = 0;

    int complement_channels() const;
    int head_channels() const { return num_classes + complement_channels(); }
    int complement_channel_of(size_t m) const;  // -1 when cluster m has none

    // Channel indices (into the k+z evidential head) for cluster m, members
    // first, complement last.
    std::vector<int> cluster_channels(size_t m) const;

    void validate_structure() const;

    static ClusterPartition one_vs_rest(int k);
    static ClusterPartition load(const std::string& path, int k);
    void save(const std::string& path) const;
};

struct ExclusivityReport {
    struct Cluster {
        std::vector<int> classes;
        int64_t overlapping_cells = 0;
        int64_t total_cells = 0;
        double overlap_fraction = 0.0;
        bool pass = true;
    };
    std::vector<Cluster> clusters;
    double tolerance = 1e-3;
    bool pass = true;
};

// Fraction of cells carrying >= 2 positive labels among each cluster's
// classes, over a label sample.
ExclusivityReport validate_partition(const ClusterPartition& partition,
                                     const std::vector<const geom::BevLabel*>& labels,
                                     double tolerance = 1e-3);

struct HlseLossResult {
    ad::Var loss;
    double nll_value = 0.0;
    double kl_value = 0.0;
    double lambda_k = 0.0;
    int64_t multi_positive_cells = 0;
};

// Per-cluster evidential loss + ramped KL regularizer, summed over clusters.
HlseLossResult hlse_loss(const ad::Var& logits, const geom::BevLabel& label,
                         const ClusterPartition& partition, int64_t it, int64_t total_iterations);

// Cluster labels for cluster m as a [c_m,H,W] tensor (complement channel
// appended when configured).
Tensor cluster_labels(const geom::BevLabel& label, const ClusterPartition& partition, size_t m);

// Expected probabilities and uncertainties scattered back to the k-channel
// layout; classes outside every cluster get probability 0 and uncertainty 1.
void cluster_predictions(const Tensor& logits, const ClusterPartition& partition, Tensor& probs,
                         Tensor& uncertainty);

// Differentiable k-channel expected probabilities (for pseudo-probability
// supervision of the evidential head).
ad::Var cluster_probabilities(const ad::Var& logits, const ClusterPartition& partition);

}  // namespace nrseg::hlse

#endif  // NRSEG_HLSE_HPP
