#include "nrseg/dataset_io.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace nrseg::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string frame_id(int scene_index, int frame_index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%03d_f%03d", scene_index, frame_index);
    return buf;
}

json calib_to_json(const std::vector<geom::CameraCalib>& calib, const geom::EgoPose& pose) {
    json cams = json::array();
    for (const auto& c : calib) {
        json cam;
        cam["intrinsics"] = c.intrinsics;
        cam["extrinsics"] = c.extrinsics;
        cam["width"] = c.width;
        cam["height"] = c.height;
        cams.push_back(cam);
    }
    return json{{"cameras", cams}, {"pose", {{"x", pose.x}, {"y", pose.y}, {"yaw", pose.yaw}}}};
}

void calib_from_json(const json& j, std::vector<geom::CameraCalib>& calib, geom::EgoPose& pose) {
    calib.clear();
    for (const auto& cam : j.at("cameras")) {
        geom::CameraCalib c;
        auto ki = cam.at("intrinsics").get<std::vector<double>>();
        auto ke = cam.at("extrinsics").get<std::vector<double>>();
        if (ki.size() != 9 || ke.size() != 16)
            throw IoError("calib.json: intrinsics/extrinsics must have 9/16 entries");
        std::copy(ki.begin(), ki.end(), c.intrinsics.begin());
        std::copy(ke.begin(), ke.end(), c.extrinsics.begin());
        c.width = cam.at("width").get<int>();
        c.height = cam.at("height").get<int>();
        c.validate();
        calib.push_back(c);
    }
    pose = geom::EgoPose::make(j.at("pose").at("x").get<double>(),
                               j.at("pose").at("y").get<double>(),
                               j.at("pose").at("yaw").get<double>());
}

json read_json_file(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw IoError(std::string(what) + ": cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError(std::string(what) + ": malformed json in " + path + ": " + e.what());
    }
    return j;
}

void hash_file(const std::string& path, uint64_t& h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("hash: cannot open " + path);
    char buf[1 << 14];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    }
}

}  // namespace

void write_ppm(const std::string& path, const synth::ImageU8& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("ppm: cannot write " + path);
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size()));
}

synth::ImageU8 read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("ppm: cannot open " + path);
    std::string magic;
    int w, h, maxv;
    in >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255) throw IoError("ppm: unsupported format in " + path);
    in.get();
    synth::ImageU8 img(h, w);
    in.read(reinterpret_cast<char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.data.size()))
        throw IoError("ppm: truncated payload in " + path);
    return img;
}

void write_pgm(const std::string& path, const MaskImage& mask) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("pgm: cannot write " + path);
    out << "P5\n" << mask.w << " " << mask.h << "\n255\n";
    std::vector<uint8_t> bytes(mask.data.size());
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

MaskImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("pgm: cannot open " + path);
    std::string magic;
    int w, h, maxv;
    in >> magic >> w >> h >> maxv;
    if (magic != "P5" || maxv != 255) throw IoError("pgm: unsupported format in " + path);
    in.get();
    std::vector<uint8_t> bytes(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw IoError("pgm: truncated payload in " + path);
    MaskImage mask(h, w);
    for (size_t i = 0; i < bytes.size(); ++i) mask.data[i] = bytes[i] >= 128 ? 1 : 0;
    return mask;
}

void write_bev_label(const std::string& path, const geom::BevLabel& label) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("bev_label: cannot write " + path);
    const char magic[4] = {'N', 'R', 'B', 'L'};
    uint32_t k = static_cast<uint32_t>(label.k);
    uint32_t rows = static_cast<uint32_t>(label.grid.rows());
    uint32_t cols = static_cast<uint32_t>(label.grid.cols());
    out.write(magic, 4);
    out.write(reinterpret_cast<const char*>(&k), 4);
    out.write(reinterpret_cast<const char*>(&rows), 4);
    out.write(reinterpret_cast<const char*>(&cols), 4);
    out.write(reinterpret_cast<const char*>(label.data.data()),
              static_cast<std::streamsize>(label.data.size()));
}

geom::BevLabel read_bev_label(const std::string& path, const geom::BevGrid& grid) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("bev_label: cannot open " + path);
    char magic[4];
    uint32_t k, rows, cols;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&k), 4);
    in.read(reinterpret_cast<char*>(&rows), 4);
    in.read(reinterpret_cast<char*>(&cols), 4);
    if (!in || std::memcmp(magic, "NRBL", 4) != 0)
        throw IoError("bev_label: bad magic in " + path);
    if (rows != static_cast<uint32_t>(grid.rows()) || cols != static_cast<uint32_t>(grid.cols()))
        throw IoError("bev_label: grid shape mismatch in " + path);
    geom::BevLabel label(grid, static_cast<int>(k));
    in.read(reinterpret_cast<char*>(label.data.data()),
            static_cast<std::streamsize>(label.data.size()));
    if (in.gcount() != static_cast<std::streamsize>(label.data.size()))
        throw IoError("bev_label: truncated payload in " + path);
    return label;
}

Dataset Dataset::open(const std::string& dir) {
    Dataset ds;
    ds.dir_ = dir;
    json j = read_json_file(dir + "/manifest.json", "manifest");
    DatasetManifest& m = ds.manifest_;
    m.version = j.at("version").get<int>();
    if (m.version != kDatasetVersion)
        throw IoError("manifest: version mismatch (got " + std::to_string(m.version) +
                      ", reader supports " + std::to_string(kDatasetVersion) + ")");
    m.k = j.at("k").get<int>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    const auto& g = j.at("grid");
    m.grid = geom::BevGrid::make(g.at("x_min").get<double>(), g.at("x_max").get<double>(),
                                 g.at("y_min").get<double>(), g.at("y_max").get<double>(),
                                 g.at("resolution").get<double>());
    m.frames = j.at("frames").get<std::vector<std::string>>();
    for (const auto& [name, ids] : j.at("splits").items())
        m.splits[name] = ids.get<std::vector<std::string>>();
    if (j.contains("noise"))
        for (const auto& [id, spec] : j.at("noise").items())
            m.frame_noise[id] = spec.get<std::string>();

    // integrity: listed frames must exist, and the directory must not carry
    // extra frame dirs
    size_t found = 0;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory() && entry.path().filename().string().rfind("frame_", 0) == 0)
            ++found;
    if (found != m.frames.size())
        throw IoError("manifest: frame count disagrees with directory contents");
    for (const auto& id : m.frames)
        if (!fs::exists(dir + "/frame_" + id + "/calib.json"))
            throw IoError("manifest: missing frame dir for " + id);
    for (const auto& [name, ids] : m.splits)
        for (const auto& id : ids)
            if (std::find(m.frames.begin(), m.frames.end(), id) == m.frames.end())
                throw IoError("manifest: split " + name + " references unknown frame " + id);
    return ds;
}

const std::vector<std::string>& Dataset::split(const std::string& name) const {
    static const std::vector<std::string> empty;
    auto it = manifest_.splits.find(name);
    return it == manifest_.splits.end() ? empty : it->second;
}

FrameData Dataset::load_frame(const std::string& id) const {
    std::string base = dir_ + "/frame_" + id;
    FrameData f;
    f.id = id;
    calib_from_json(read_json_file(base + "/calib.json", "calib"), f.calib, f.pose);
    f.label = read_bev_label(base + "/bev_label.bin", manifest_.grid);
    json boxes = read_json_file(base + "/boxes.json", "boxes");
    for (const auto& b : boxes.at("boxes")) {
        geom::Box3D box;
        auto c = b.at("center").get<std::vector<double>>();
        auto s = b.at("size").get<std::vector<double>>();
        box.cx = c[0];
        box.cy = c[1];
        box.cz = c[2];
        box.l = s[0];
        box.w = s[1];
        box.h = s[2];
        box.yaw = b.at("yaw").get<double>();
        f.boxes.push_back(box);
    }
    for (size_t cam = 0; cam < f.calib.size(); ++cam) {
        f.images.push_back(read_ppm(base + "/cam" + std::to_string(cam) + ".ppm"));
        std::vector<MaskImage> class_masks;
        for (int c = 0; c < manifest_.k; ++c)
            class_masks.push_back(read_pgm(base + "/mask_cam" + std::to_string(cam) + "_class" +
                                           std::to_string(c) + ".pgm"));
        f.masks.push_back(std::move(class_masks));
    }
    return f;
}

std::vector<std::vector<std::string>> Dataset::group_scenes(const std::vector<std::string>& ids) {
    std::vector<std::vector<std::string>> scenes;
    std::string current;
    for (const auto& id : ids) {
        std::string prefix = id.substr(0, id.find("_f"));
        if (scenes.empty() || prefix != current) {
            scenes.push_back({});
            current = prefix;
        }
        scenes.back().push_back(id);
    }
    return scenes;
}

void write_dataset(const std::vector<SceneBundle>& scenes, const std::string& dir,
                   double quality_noise) {
    if (scenes.empty()) throw ValidationError("write_dataset: no scenes");
    fs::create_directories(dir);

    DatasetManifest m;
    m.k = scenes.front().scene.k;
    m.class_names = synth::class_names();
    m.grid = scenes.front().scene.grid;
    m.splits["labeled"] = {};
    m.splits["unlabeled"] = {};
    m.splits["synthetic"] = {};
    m.splits["val"] = {};

    for (size_t si = 0; si < scenes.size(); ++si) {
        const SceneBundle& bundle = scenes[si];
        const synth::Scene& scene = bundle.scene;
        if (m.splits.find(bundle.split) == m.splits.end())
            throw ValidationError("write_dataset: unknown split " + bundle.split);
        for (int t = 0; t < scene.frames; ++t) {
            std::string id = frame_id(static_cast<int>(si), t);
            std::string base = dir + "/frame_" + id;
            fs::create_directories(base);

            synth::RenderedFrame rendered = synth::render_frame(scene, t, quality_noise);
            for (size_t cam = 0; cam < rendered.views.size(); ++cam) {
                write_ppm(base + "/cam" + std::to_string(cam) + ".ppm", rendered.views[cam]);
                for (int c = 0; c < scene.k; ++c)
                    write_pgm(base + "/mask_cam" + std::to_string(cam) + "_class" +
                                  std::to_string(c) + ".pgm",
                              rendered.masks[cam][static_cast<size_t>(c)]);
            }
            write_bev_label(base + "/bev_label.bin", scene.bev_labels[static_cast<size_t>(t)]);

            // stored calib is the annotation rig, never the jittered render rig
            std::ofstream calib_out(base + "/calib.json");
            calib_out << calib_to_json(scene.rig, scene.trajectory[static_cast<size_t>(t)]).dump(2)
                      << "\n";

            json boxes = json::array();
            for (const auto& b : scene.boxes[static_cast<size_t>(t)])
                boxes.push_back(json{{"center", {b.cx, b.cy, b.cz}},
                                     {"size", {b.l, b.w, b.h}},
                                     {"yaw", b.yaw}});
            std::ofstream boxes_out(base + "/boxes.json");
            boxes_out << json{{"boxes", boxes}}.dump(2) << "\n";

            m.frames.push_back(id);
            m.splits[bundle.split].push_back(id);
            if (!bundle.frame_noise.empty())
                m.frame_noise[id] = bundle.frame_noise[static_cast<size_t>(t) %
                                                       bundle.frame_noise.size()];
        }
    }

    json j;
    j["version"] = m.version;
    j["k"] = m.k;
    j["class_names"] = m.class_names;
    j["grid"] = {{"x_min", m.grid.x_min}, {"x_max", m.grid.x_max}, {"y_min", m.grid.y_min},
                 {"y_max", m.grid.y_max}, {"resolution", m.grid.resolution}};
    j["frames"] = m.frames;
    j["splits"] = m.splits;
    if (!m.frame_noise.empty()) j["noise"] = m.frame_noise;
    std::ofstream out(dir + "/manifest.json");
    if (!out) throw IoError("manifest: cannot write " + dir + "/manifest.json");
    out << j.dump(2) << "\n";
}

void write_scores(const std::string& path,
                  const std::map<std::string, pgcm::ConsistencyScore>& scores) {
    json j = json::object();
    for (const auto& [id, score] : scores)
        j[id] = json{{"R", score.value}, {"per_view", score.per_view}};
    std::ofstream out(path);
    if (!out) throw IoError("scores: cannot write " + path);
    out << j.dump(2) << "\n";
}

std::map<std::string, pgcm::ConsistencyScore> read_scores(const std::string& path) {
    json j = read_json_file(path, "scores");
    std::map<std::string, pgcm::ConsistencyScore> scores;
    for (const auto& [id, s] : j.items()) {
        pgcm::ConsistencyScore score;
        score.value = s.at("R").get<double>();
        score.per_view = s.at("per_view").get<std::vector<double>>();
        scores[id] = score;
    }
    return scores;
}

uint64_t dataset_content_hash(const std::string& dir) {
    std::vector<std::string> rel{"manifest.json"};
    Dataset ds = Dataset::open(dir);
    for (const auto& id : ds.manifest().frames) {
        for (const auto& entry : fs::directory_iterator(dir + "/frame_" + id))
            rel.push_back("frame_" + id + "/" + entry.path().filename().string());
    }
    std::sort(rel.begin(), rel.end());
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& f : rel) {
        h = fnv1a64(f.data(), f.size(), h);
        hash_file(dir + "/" + f, h);
    }
    return h;
}

void write_run_manifest(const std::string& dir, const RunManifest& manifest) {
    fs::create_directories(dir);
    json j;
    j["command"] = manifest.command;
    j["config_hash"] = manifest.config_hash;
    j["seed"] = manifest.seed;
    j["version"] = manifest.version.empty() ? version_string() : manifest.version;
    j["started_unix"] = manifest.started_unix;
    j["finished_unix"] = manifest.finished_unix;
    j["flags"] = manifest.flags;
    std::ofstream out(dir + "/run_manifest.json");
    if (!out) throw IoError("run manifest: cannot write in " + dir);
    out << j.dump(2) << "\n";
}

}  // namespace nrseg::io
