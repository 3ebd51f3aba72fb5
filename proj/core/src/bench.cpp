#include "nrseg/bench.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "nrseg/camera_geometry.hpp"
#include "nrseg/datasynth.hpp"
#include "nrseg/evalkit.hpp"
#include "nrseg/evidential.hpp"
#include "nrseg/gradcheck.hpp"
#include "nrseg/hlse.hpp"
#include "nrseg/trainer.hpp"

namespace nrseg::bench {

namespace fs = std::filesystem;

std::map<std::string, pgcm::ConsistencyScore> score_frames(const io::Dataset& dataset,
                                                           const std::vector<std::string>& ids,
                                                           const std::vector<int>& road_classes,
                                                           double floor) {
    std::map<std::string, pgcm::ConsistencyScore> scores;
    for (const auto& id : ids) {
        io::FrameData frame = dataset.load_frame(id);
        std::vector<MaskImage> refs, syns;
        for (size_t cam = 0; cam < frame.calib.size(); ++cam) {
            MaskImage m_o, m_c;
            geom::render_projected_masks(frame.label, frame.boxes, frame.calib[cam], road_classes,
                                         m_o, m_c);
            refs.push_back(geom::compose_reference_mask(m_o, m_c));
            MaskImage syn(frame.calib[cam].height, frame.calib[cam].width);
            for (int c : road_classes) syn = mask_union(syn, frame.masks[cam][static_cast<size_t>(c)]);
            syns.push_back(std::move(syn));
        }
        scores[id] = pgcm::frame_consistency_score(refs, syns, floor);
    }
    return scores;
}

namespace {

synth::SceneParams toy_params(const ToyDataOptions& opt, bool diverse) {
    synth::SceneParams p;
    p.frames = opt.frames_per_scene;
    p.num_cams = opt.num_cams;
    p.image_w = opt.image_w;
    p.image_h = opt.image_h;
    p.grid = geom::BevGrid::make(-opt.grid_half, opt.grid_half, -opt.grid_half, opt.grid_half,
                                 opt.resolution);
    if (diverse) {
        p.curvature_max = 0.014;
        p.carpark_prob = 1.0;
        p.crossing_rate = 0.05;
        p.lanes_min = 2;
        p.lanes_max = 3;
    } else {
        p.curvature_max = 0.002;
        p.carpark_prob = 0.0;
        p.crossing_rate = 0.02;
        p.lanes_min = 2;
        p.lanes_max = 2;
    }
    return p;
}

}  // namespace

void make_toy_dataset(const ToyDataOptions& opt) {
    std::vector<io::SceneBundle> bundles;
    uint64_t s = opt.seed * 1000;

    for (int i = 0; i < opt.labeled_scenes; ++i) {
        io::SceneBundle b;
        b.scene = synth::generate_scene(s + static_cast<uint64_t>(i), toy_params(opt, false));
        b.split = "labeled";
        bundles.push_back(std::move(b));
    }
    for (int i = 0; i < opt.synthetic_scenes; ++i) {
        io::SceneBundle b;
        synth::Scene clean =
            synth::generate_scene(s + 100 + static_cast<uint64_t>(i), toy_params(opt, true));
        synth::NoiseSpec spec = synth::noise_preset(opt.noise_level, s + 200 + i);
        b.scene = synth::inject_drift(clean, spec);
        b.split = "synthetic";
        b.frame_noise.assign(static_cast<size_t>(b.scene.frames), opt.noise_level);
        bundles.push_back(std::move(b));
    }
    for (int i = 0; i < opt.val_scenes; ++i) {
        io::SceneBundle b;
        b.scene = synth::generate_scene(s + 300 + static_cast<uint64_t>(i), toy_params(opt, true));
        b.split = "val";
        bundles.push_back(std::move(b));
    }
    // a small unlabeled pool for the mean-teacher modes
    for (int i = 0; i < 2; ++i) {
        io::SceneBundle b;
        b.scene = synth::generate_scene(s + 400 + static_cast<uint64_t>(i), toy_params(opt, true));
        b.split = "unlabeled";
        bundles.push_back(std::move(b));
    }
    io::write_dataset(bundles, opt.dir);

    io::Dataset ds = io::Dataset::open(opt.dir);
    auto scores = score_frames(ds, ds.split("synthetic"), {synth::kDrivable}, 0.05);
    io::write_scores(opt.dir + "/scores.json", scores);
}

std::vector<NoiseCell> bench_noise_resilience(const BenchOptions& opt) {
    fs::create_directories(opt.out_dir);

    for (const auto& cond : opt.conditions) {
        ToyDataOptions data;
        data.dir = opt.out_dir + "/data_" + cond;
        data.seed = opt.seed;
        data.noise_level = cond == "clean" ? "none" : cond;
        data.labeled_scenes = opt.labeled_scenes;
        data.synthetic_scenes = opt.synthetic_scenes;
        data.val_scenes = opt.val_scenes;
        data.frames_per_scene = opt.frames_per_scene;
        data.num_cams = opt.num_cams;
        data.image_w = opt.image_w;
        data.image_h = opt.image_h;
        data.grid_half = opt.grid_half;
        data.resolution = opt.resolution;
        make_toy_dataset(data);
    }

    std::vector<NoiseCell> cells;
    for (const auto& cond : opt.conditions) {
        for (const auto& loss : opt.losses) {
            NoiseCell cell;
            cell.loss = loss;
            cell.condition = cond;
            for (uint64_t seed : opt.train_seeds) {
                train::TrainConfig cfg;
                cfg.mode = "supervised";
                cfg.dataset_labeled = opt.out_dir + "/data_" + cond;
                cfg.dataset_synthetic = cfg.dataset_labeled;
                cfg.loss_variant = loss;
                cfg.seed = seed;
                cfg.epochs = opt.epochs;
                cfg.lr = opt.lr;
                cfg.name = cond + "_" + loss + "_s" + std::to_string(seed);
                cfg.run_dir = opt.out_dir + "/runs/" + cfg.name;
                train::TrainResult res = train::train(cfg);
                cell.mious.push_back(res.final_miou);
            }
            double mean = 0.0;
            for (double v : cell.mious) mean += v;
            mean /= cell.mious.size();
            double var = 0.0;
            for (double v : cell.mious) var += (v - mean) * (v - mean);
            cell.mean = mean;
            cell.stddev = cell.mious.size() > 1 ? std::sqrt(var / (cell.mious.size() - 1)) : 0.0;
            cells.push_back(std::move(cell));
        }
    }

    std::ofstream csv(opt.out_dir + "/bench_summary.csv");
    csv << "condition,loss,mean_miou,std_miou,seeds\n";
    std::ofstream md(opt.out_dir + "/bench_summary.md");
    md << "# Noise-resilience benchmark\n\n";
    md << "Final validation mIoU, mean +/- std over " << opt.train_seeds.size() << " seeds.\n\n";
    md << "| condition | loss | mIoU |\n|---|---|---|\n";
    char buf[128];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof(buf), "%.4f,%.4f", c.mean, c.stddev);
        csv << c.condition << "," << c.loss << "," << buf << "," << c.mious.size() << "\n";
        std::snprintf(buf, sizeof(buf), "%.4f +/- %.4f", c.mean, c.stddev);
        md << "| " << c.condition << " | " << c.loss << " | " << buf << " |\n";
    }
    return cells;
}

std::vector<HlseCell> bench_hlse(const BenchOptions& opt) {
    fs::create_directories(opt.out_dir);

    ToyDataOptions data;
    data.dir = opt.out_dir + "/data_hlse";
    data.seed = opt.seed + 7;
    data.noise_level = "none";
    data.labeled_scenes = opt.labeled_scenes;
    data.synthetic_scenes = 0;
    data.val_scenes = opt.val_scenes;
    data.frames_per_scene = opt.frames_per_scene;
    data.num_cams = opt.num_cams;
    data.image_w = opt.image_w;
    data.image_h = opt.image_h;
    data.grid_half = opt.grid_half;
    data.resolution = opt.resolution;
    // divider-on-drivable co-occurrence needs labeled diversity, not noise
    {
        std::vector<io::SceneBundle> bundles;
        uint64_t s = data.seed * 1000;
        for (int i = 0; i < data.labeled_scenes; ++i) {
            io::SceneBundle b;
            b.scene = synth::generate_scene(s + static_cast<uint64_t>(i), toy_params(data, true));
            b.split = "labeled";
            bundles.push_back(std::move(b));
        }
        for (int i = 0; i < data.val_scenes; ++i) {
            io::SceneBundle b;
            b.scene =
                synth::generate_scene(s + 300 + static_cast<uint64_t>(i), toy_params(data, true));
            b.split = "val";
            bundles.push_back(std::move(b));
        }
        io::write_dataset(bundles, data.dir);
    }

    // global: one cluster holding all six classes (plus complement);
    // violates exclusivity wherever divider/crossing/stop sit on drivable
    hlse::ClusterPartition global;
    global.num_classes = 6;
    global.clusters = {{0, 1, 2, 3, 4, 5}};
    global.complement = {true};
    global.save(opt.out_dir + "/partition_global.json");
    hlse::ClusterPartition::one_vs_rest(6).save(opt.out_dir + "/partition_hlse.json");

    std::vector<HlseCell> cells;
    for (const std::string& kind : {std::string("global"), std::string("hlse")}) {
        for (uint64_t seed : opt.train_seeds) {
            train::TrainConfig cfg;
            cfg.mode = "supervised";
            cfg.dataset_labeled = data.dir;
            cfg.partition_path = opt.out_dir + "/partition_" + kind + ".json";
            cfg.seed = seed;
            cfg.epochs = opt.epochs;
            cfg.lr = opt.lr;
            cfg.name = "hlse_" + kind + "_s" + std::to_string(seed);
            cfg.run_dir = opt.out_dir + "/runs/" + cfg.name;
            train::train(cfg);

            net::ModelConfig mc = net::SegNet::read_checkpoint_config(cfg.run_dir +
                                                                      "/ckpt_student.bin");
            net::SegNet model(mc);
            model.load_checkpoint(cfg.run_dir + "/ckpt_student.bin");
            io::Dataset ds = io::Dataset::open(data.dir);
            evalkit::EvalReport ev = evalkit::run_eval(model, ds, "val", "evidential", 0.45);
            evalkit::EvalReport mu = evalkit::run_eval(model, ds, "val", "multinomial", 0.45);

            HlseCell cell;
            cell.partition = kind;
            cell.seed = seed;
            cell.evidential_iou = ev.per_class_iou;
            cell.multinomial_iou = mu.per_class_iou;
            cell.coverage = ev.filtered_coverage;
            cell.evidential_miou = ev.miou;
            cells.push_back(std::move(cell));
        }
    }

    std::ofstream csv(opt.out_dir + "/hlse_summary.csv");
    csv << "partition,seed,evidential_miou,coverage";
    for (const auto& n : synth::class_names()) csv << ",ev_iou_" << n;
    csv << "\n";
    std::ofstream md(opt.out_dir + "/hlse_summary.md");
    md << "# Cluster-partition benchmark\n\n| partition | seed | evidential mIoU | coverage |\n"
       << "|---|---|---|---|\n";
    char buf[64];
    for (const auto& c : cells) {
        csv << c.partition << "," << c.seed;
        std::snprintf(buf, sizeof(buf), ",%.4f,%.4f", c.evidential_miou, c.coverage);
        csv << buf;
        for (double v : c.evidential_iou) {
            std::snprintf(buf, sizeof(buf), ",%.4f", v);
            csv << buf;
        }
        csv << "\n";
        std::snprintf(buf, sizeof(buf), "%.4f | %.4f", c.evidential_miou, c.coverage);
        md << "| " << c.partition << " | " << c.seed << " | " << buf << " |\n";
    }
    return cells;
}

std::vector<std::pair<std::string, double>> gradcheck_suites(uint64_t seed, int trials) {
    Rng rng(seed);
    std::vector<std::pair<std::string, double>> out = {{"weighted_dice_loss", 0.0},
                                                       {"variant_m1", 0.0},
                                                       {"variant_m2", 0.0},
                                                       {"edl_nll_loss", 0.0},
                                                       {"kl_to_uniform", 0.0},
                                                       {"hlse_loss", 0.0}};
    auto probs = [&](int k, int h, int w) {
        Tensor t({k, h, w});
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(0.1, 0.9);
        return t;
    };
    auto labels = [&](int k, int h, int w) {
        Tensor t({k, h, w});
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.bernoulli(0.35) ? 1.0 : 0.0;
        return t;
    };
    auto logits = [&](int c, int h, int w) {
        Tensor t({c, h, w});
        for (int64_t i = 0; i < t.numel(); ++i) {
            double v = rng.uniform(-3.0, 7.0);
            if (std::fabs(v) < 0.1) v += 0.2;  // stay off the ReLU kink
            t[i] = v;
        }
        return t;
    };

    for (int trial = 0; trial < trials; ++trial) {
        double r = rng.uniform(0.15, 1.0);
        {
            ad::Var p = ad::parameter(probs(2, 3, 4));
            Tensor l = labels(2, 3, 4);
            out[0].second = std::max(
                out[0].second,
                gradcheck::check([&]() { return pgcm::weighted_dice_loss(p, l, r, 1.0); }, {p})
                    .max_rel_err);
            out[1].second = std::max(
                out[1].second,
                gradcheck::check(
                    [&]() { return pgcm::variant_loss(p, l, r, 1.0, pgcm::VariantMode::M1); }, {p})
                    .max_rel_err);
            out[2].second = std::max(
                out[2].second,
                gradcheck::check(
                    [&]() { return pgcm::variant_loss(p, l, r, 1.0, pgcm::VariantMode::M2); }, {p})
                    .max_rel_err);
        }
        {
            ad::Var lg = ad::parameter(logits(3, 2, 2));
            Tensor l = labels(3, 2, 2);
            out[3].second = std::max(
                out[3].second,
                gradcheck::check(
                    [&]() { return edl::edl_nll_loss(edl::dirichlet_alpha(lg), l); }, {lg})
                    .max_rel_err);
            out[4].second = std::max(
                out[4].second,
                gradcheck::check(
                    [&]() { return edl::kl_to_uniform(edl::dirichlet_alpha(lg), l); }, {lg})
                    .max_rel_err);
        }
        {
            hlse::ClusterPartition p2 = hlse::ClusterPartition::one_vs_rest(2);
            geom::BevLabel lab(geom::BevGrid::make(-2, 2, -2, 2, 1.0), 2);
            for (size_t i = 0; i < lab.data.size(); ++i)
                lab.data[i] = rng.bernoulli(0.4) ? 1 : 0;
            ad::Var lg = ad::parameter(logits(p2.head_channels(), 4, 4));
            out[5].second = std::max(
                out[5].second,
                gradcheck::check(
                    [&]() { return hlse::hlse_loss(lg, lab, p2, 37, 100).loss; }, {lg})
                    .max_rel_err);
        }
    }
    return out;
}

}  // namespace nrseg::bench
