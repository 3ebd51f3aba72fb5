#ifndef NRSEG_DATASET_IO_HPP
#define NRSEG_DATASET_IO_HPP

#include <map>
#include <string>
#include <vector>

#include "nrseg/camera_geometry.hpp"
#include "nrseg/datasynth.hpp"
#include "nrseg/pgcm.hpp"

namespace nrseg::io {

constexpr int kDatasetVersion = 1;

struct DatasetManifest {
    int version = kDatasetVersion;
    int k = 6;
    std::vector<std::string> class_names;
    geom::BevGrid grid;
    std::vector<std::string> frames;
    std::map<std::string, std::vector<std::string>> splits;  // labeled/unlabeled/synthetic/val
    std::map<std::string, std::string> frame_noise;          // optional per-frame spec id
};

struct FrameData {
    std::string id;
    std::vector<geom::CameraCalib> calib;
    geom::EgoPose pose;
    std::vector<synth::ImageU8> images;
    std::vector<std::vector<MaskImage>> masks;  // [camera][class]
    geom::BevLabel label;
    std::vector<geom::Box3D> boxes;
};

// Raster primitives (exposed for tests).
void write_ppm(const std::string& path, const synth::ImageU8& img);
synth::ImageU8 read_ppm(const std::string& path);
void write_pgm(const std::string& path, const MaskImage& mask);
MaskImage read_pgm(const std::string& path);
void write_bev_label(const std::string& path, const geom::BevLabel& label);
geom::BevLabel read_bev_label(const std::string& path, const geom::BevGrid& grid);

class Dataset {
public:
    // Validates manifest integrity: version, frame-directory agreement, and
    // split membership. Throws IoError / ValidationError.
    static Dataset open(const std::string& dir);

    const DatasetManifest& manifest() const { return manifest_; }
    const std::string& dir() const { return dir_; }

    const std::vector<std::string>& split(const std::string& name) const;
    FrameData load_frame(const std::string& id) const;

    // Frame ids are "s<scene>_f<frame>"; grouping keeps file order.
    static std::vector<std::vector<std::string>> group_scenes(
        const std::vector<std::string>& ids);

private:
    std::string dir_;
    DatasetManifest manifest_;
};

struct SceneBundle {
    synth::Scene scene;
    std::string split = "labeled";        // labeled | unlabeled | synthetic | val
    std::vector<std::string> frame_noise; // per-frame spec id; empty when clean
};

void write_dataset(const std::vector<SceneBundle>& scenes, const std::string& dir,
                   double quality_noise = 0.0);

void write_scores(const std::string& path,
                  const std::map<std::string, pgcm::ConsistencyScore>& scores);
std::map<std::string, pgcm::ConsistencyScore> read_scores(const std::string& path);

// Deterministic content hash over manifest + frame payloads (run manifests
// and scores excluded).
uint64_t dataset_content_hash(const std::string& dir);

struct RunManifest {
    std::string command;
    std::string config_hash;
    uint64_t seed = 0;
    std::string version;
    int64_t started_unix = 0;
    int64_t finished_unix = 0;
    std::map<std::string, std::string> flags;
};
void write_run_manifest(const std::string& dir, const RunManifest& manifest);

}  // namespace nrseg::io

#endif  // NRSEG_DATASET_IO_HPP
