#include "nrseg/hlse.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "nrseg/evidential.hpp"

namespace nrseg::hlse {

using json = nlohmann::json;

int ClusterPartition::complement_channels() const {
    int z = 0;
    for (bool c : complement) z += c ? 1 : 0;
    return z;
}

int ClusterPartition::complement_channel_of(size_t m) const {
    if (!complement[m]) return -1;
    int ord = 0;
    for (size_t i = 0; i < m; ++i) ord += complement[i] ? 1 : 0;
    return num_classes + ord;
}

std::vector<int> ClusterPartition::cluster_channels(size_t m) const {
    std::vector<int> ch = clusters[m];
    int comp = complement_channel_of(m);
    if (comp >= 0) ch.push_back(comp);
    return ch;
}

void ClusterPartition::validate_structure() const {
    if (clusters.size() != complement.size())
        throw ValidationError("partition: complement flags must match cluster count");
    std::set<int> seen;
    for (size_t m = 0; m < clusters.size(); ++m) {
        std::set<int> in_cluster;
        for (int c : clusters[m]) {
            if (c < 0 || c >= num_classes)
                throw ValidationError("partition: class index out of range");
            if (!in_cluster.insert(c).second)
                throw ValidationError("partition: duplicate class inside a cluster");
            if (!seen.insert(c).second)
                throw ValidationError("partition: class assigned to more than one cluster");
        }
        size_t effective = clusters[m].size() + (complement[m] ? 1 : 0);
        if (effective < 2)
            throw ValidationError("partition: cluster needs >= 2 channels after complement");
    }
}

ClusterPartition ClusterPartition::one_vs_rest(int k) {
    ClusterPartition p;
    p.num_classes = k;
    for (int c = 0; c < k; ++c) {
        p.clusters.push_back({c});
        p.complement.push_back(true);
    }
    p.validate_structure();
    return p;
}

ClusterPartition ClusterPartition::load(const std::string& path, int k) {
    std::ifstream in(path);
    if (!in) throw IoError("partition: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("partition: malformed json in " + path + ": " + e.what());
    }
    ClusterPartition p;
    p.num_classes = k;
    if (!j.contains("clusters") || !j["clusters"].is_array())
        throw ValidationError("partition: missing clusters array");
    for (const auto& c : j["clusters"]) p.clusters.push_back(c.get<std::vector<int>>());
    if (j.contains("complement")) {
        if (j["complement"].is_boolean()) {
            p.complement.assign(p.clusters.size(), j["complement"].get<bool>());
        } else {
            p.complement = j["complement"].get<std::vector<bool>>();
        }
    } else {
        p.complement.assign(p.clusters.size(), true);
    }
    p.validate_structure();
    return p;
}

void ClusterPartition::save(const std::string& path) const {
    json j;
    j["clusters"] = clusters;
    j["complement"] = complement;
    std::ofstream out(path);
    if (!out) throw IoError("partition: cannot write " + path);
    out << j.dump(2) << "\n";
}

ExclusivityReport validate_partition(const ClusterPartition& partition,
                                     const std::vector<const geom::BevLabel*>& labels,
                                     double tolerance) {
    partition.validate_structure();
    ExclusivityReport report;
    report.tolerance = tolerance;
    for (size_t m = 0; m < partition.clusters.size(); ++m) {
        ExclusivityReport::Cluster rc;
        rc.classes = partition.clusters[m];
        for (const geom::BevLabel* label : labels) {
            int rows = label->grid.rows(), cols = label->grid.cols();
            rc.total_cells += static_cast<int64_t>(rows) * cols;
            for (int i = 0; i < rows; ++i) {
                for (int j = 0; j < cols; ++j) {
                    int pos = 0;
                    for (int c : rc.classes) pos += label->at(c, i, j) ? 1 : 0;
                    if (pos >= 2) ++rc.overlapping_cells;
                }
            }
        }
        rc.overlap_fraction = rc.total_cells
                                  ? static_cast<double>(rc.overlapping_cells) / rc.total_cells
                                  : 0.0;
        rc.pass = rc.overlap_fraction <= tolerance;
        report.pass = report.pass && rc.pass;
        report.clusters.push_back(std::move(rc));
    }
    return report;
}

Tensor cluster_labels(const geom::BevLabel& label, const ClusterPartition& partition, size_t m) {
    int rows = label.grid.rows(), cols = label.grid.cols();
    int64_t hw = static_cast<int64_t>(rows) * cols;
    const auto& members = partition.clusters[m];
    bool comp = partition.complement[m];
    int cm = static_cast<int>(members.size()) + (comp ? 1 : 0);
    Tensor out({cm, rows, cols});
    for (size_t ci = 0; ci < members.size(); ++ci) {
        const uint8_t* src = label.data.data() + static_cast<int64_t>(members[ci]) * hw;
        double* dst = out.data() + static_cast<int64_t>(ci) * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] = src[i];
    }
    if (comp) {
        double* dst = out.data() + static_cast<int64_t>(members.size()) * hw;
        for (int64_t i = 0; i < hw; ++i) {
            double any = 0.0;
            for (size_t ci = 0; ci < members.size(); ++ci)
                any = std::max(any, out[static_cast<int64_t>(ci) * hw + i]);
            dst[i] = 1.0 - any;
        }
    }
    return out;
}

HlseLossResult hlse_loss(const ad::Var& logits, const geom::BevLabel& label,
                         const ClusterPartition& partition, int64_t it,
                         int64_t total_iterations) {
    partition.validate_structure();
    if (logits->value.dim(0) != partition.head_channels())
        throw DimensionError("hlse_loss: logits must have k+z channels");
    if (logits->value.dim(1) != label.grid.rows() || logits->value.dim(2) != label.grid.cols())
        throw DimensionError("hlse_loss: logits spatial dims must match label grid");

    HlseLossResult result;
    result.lambda_k = edl::kl_weight(it, total_iterations);
    ad::Var total = ad::constant(Tensor::scalar(0.0));
    int64_t hw = static_cast<int64_t>(label.grid.rows()) * label.grid.cols();

    for (size_t m = 0; m < partition.clusters.size(); ++m) {
        Tensor lab = cluster_labels(label, partition, m);
        // Multi-positive cells violate the cluster's exclusivity premise;
        // Eq-style label sums still apply, the counter records the breach.
        int members = static_cast<int>(partition.clusters[m].size());
        for (int64_t i = 0; i < hw; ++i) {
            int pos = 0;
            for (int ci = 0; ci < members; ++ci) pos += lab[ci * hw + i] != 0.0 ? 1 : 0;
            if (pos >= 2) ++result.multi_positive_cells;
        }
        ad::Var cluster_logits = ad::gather_channels(logits, partition.cluster_channels(m));
        ad::Var alpha = edl::dirichlet_alpha(cluster_logits);
        ad::Var nll = edl::edl_nll_loss(alpha, lab);
        ad::Var kl = edl::kl_to_uniform(alpha, lab);
        result.nll_value += ad::scalar_value(nll);
        result.kl_value += ad::scalar_value(kl);
        total = ad::add(total, ad::add(nll, ad::mul_scalar(kl, result.lambda_k)));
    }
    result.loss = total;
    return result;
}

void cluster_predictions(const Tensor& logits, const ClusterPartition& partition, Tensor& probs,
                         Tensor& uncertainty) {
    partition.validate_structure();
    if (logits.ndim() != 3 || logits.dim(0) != partition.head_channels())
        throw DimensionError("cluster_predictions: logits must be [k+z,H,W]");
    int rows = logits.dim(1), cols = logits.dim(2);
    int64_t hw = static_cast<int64_t>(rows) * cols;
    probs = Tensor({partition.num_classes, rows, cols}, 0.0);
    uncertainty = Tensor({partition.num_classes, rows, cols}, 1.0);

    for (size_t m = 0; m < partition.clusters.size(); ++m) {
        std::vector<int> channels = partition.cluster_channels(m);
        int cm = static_cast<int>(channels.size());
        for (int64_t i = 0; i < hw; ++i) {
            double s = 0.0;
            for (int ch : channels)
                s += std::max(logits[static_cast<int64_t>(ch) * hw + i], 0.0) + 1.0;
            double u = static_cast<double>(cm) / s;
            for (size_t ci = 0; ci < partition.clusters[m].size(); ++ci) {
                int cls = partition.clusters[m][ci];
                double a = std::max(logits[static_cast<int64_t>(channels[ci]) * hw + i], 0.0) + 1.0;
                probs[static_cast<int64_t>(cls) * hw + i] = a / s;
                uncertainty[static_cast<int64_t>(cls) * hw + i] = u;
            }
        }
    }
}

ad::Var cluster_probabilities(const ad::Var& logits, const ClusterPartition& partition) {
    partition.validate_structure();
    int rows = logits->value.dim(1), cols = logits->value.dim(2);
    int64_t hw = static_cast<int64_t>(rows) * cols;

    // Scatter per-cluster expected probabilities into the k-channel layout
    // through a fixed permutation map.
    std::vector<ad::Var> cluster_probs;
    std::vector<std::vector<int>> member_rows(partition.clusters.size());
    for (size_t m = 0; m < partition.clusters.size(); ++m) {
        ad::Var alpha = edl::dirichlet_alpha(
            ad::gather_channels(logits, partition.cluster_channels(m)));
        cluster_probs.push_back(edl::expected_probability(alpha));
    }
    auto map = std::make_shared<ad::SparseLinear>();
    // Input to the map: concatenation of all cluster probability tensors.
    ad::Var cat;
    std::vector<int64_t> cluster_offset(partition.clusters.size(), 0);
    int64_t off = 0;
    for (size_t m = 0; m < partition.clusters.size(); ++m) {
        cluster_offset[m] = off;
        off += cluster_probs[m]->value.numel();
        cat = m == 0 ? cluster_probs[m] : ad::concat_channels(cat, cluster_probs[m]);
    }
    map->in_numel = off;
    map->out_shape = {partition.num_classes, rows, cols};
    int64_t out_n = static_cast<int64_t>(partition.num_classes) * hw;
    map->row_offsets.assign(out_n + 1, 0);
    std::vector<std::pair<int64_t, int64_t>> entries;  // (out_row, in_col)
    for (size_t m = 0; m < partition.clusters.size(); ++m) {
        for (size_t ci = 0; ci < partition.clusters[m].size(); ++ci) {
            int cls = partition.clusters[m][ci];
            for (int64_t i = 0; i < hw; ++i)
                entries.push_back({static_cast<int64_t>(cls) * hw + i,
                                   cluster_offset[m] + static_cast<int64_t>(ci) * hw + i});
        }
    }
    for (auto& e : entries) map->row_offsets[e.first + 1]++;
    for (int64_t r = 0; r < out_n; ++r) map->row_offsets[r + 1] += map->row_offsets[r];
    map->col_idx.resize(entries.size());
    map->weights.assign(entries.size(), 1.0);
    {
        std::vector<int64_t> cursor(map->row_offsets.begin(), map->row_offsets.end() - 1);
        for (auto& e : entries) map->col_idx[cursor[e.first]++] = e.second;
    }
    return ad::linear_map(cat, map);
}

}  // namespace nrseg::hlse
