#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include <nrseg/bench.hpp>
#include <nrseg/datasynth.hpp>
#include <nrseg/evalkit.hpp>
#include <nrseg/trainer.hpp>

namespace fs = std::filesystem;
using namespace nrseg;

namespace {

// exit codes: 0 ok, 1 usage, 2 validation/integrity, 3 numerical
constexpr int kUsageError = 1;
constexpr int kValidationErrorCode = 2;
constexpr int kNumericalErrorCode = 3;

int64_t unix_now() {
    return std::chrono::duration_cast<std::chrono::seconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

std::string resolve_dataset(const std::string& path) {
    if (path.empty() || fs::path(path).is_absolute()) return path;
    const char* root = std::getenv("NRSEG_DATA_ROOT");
    if (!root || !*root) return path;
    return (fs::path(root) / path).string();
}

std::vector<int> parse_road_classes(const std::string& arg) {
    std::vector<int> out;
    const auto& names = synth::class_names();
    std::stringstream ss(arg);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        auto it = std::find(names.begin(), names.end(), tok);
        if (it != names.end()) {
            out.push_back(static_cast<int>(it - names.begin()));
        } else {
            try {
                out.push_back(std::stoi(tok));
            } catch (...) {
                throw ValidationError("unknown road class: " + tok);
            }
        }
    }
    return out;
}

io::RunManifest start_manifest(const std::string& command, uint64_t seed,
                               const std::map<std::string, std::string>& flags) {
    io::RunManifest m;
    m.command = command;
    m.seed = seed;
    m.version = version_string();
    m.flags = flags;
    m.started_unix = unix_now();
    return m;
}

int cmd_generate(uint64_t seed, int scenes, int frames, const std::string& noise_level,
                 const std::string& mix, const std::string& out_dir, bool force, double val_frac,
                 double unlabeled_frac, int cams, int image_w, int image_h, double grid_half,
                 double resolution, bool diverse) {
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
        throw ValidationError("output dir " + out_dir + " is not empty (use --force)");
    fs::create_directories(out_dir);

    std::vector<std::string> mix_levels;
    if (!mix.empty()) {
        std::stringstream ss(mix);
        std::string tok;
        while (std::getline(ss, tok, ',')) mix_levels.push_back(tok);
    } else if (noise_level != "none") {
        mix_levels.push_back(noise_level);
    }

    synth::SceneParams params;
    params.frames = frames;
    params.num_cams = cams;
    params.image_w = image_w;
    params.image_h = image_h;
    params.grid = geom::BevGrid::make(-grid_half, grid_half, -grid_half, grid_half, resolution);
    if (diverse) {
        params.curvature_max = 0.014;
        params.carpark_prob = 1.0;
        params.crossing_rate = 0.05;
        params.lanes_max = 3;
    }

    bool synthetic = !mix_levels.empty();
    int val_scenes = synthetic ? 0 : static_cast<int>(std::lround(scenes * val_frac));
    int unlabeled_scenes = synthetic ? 0 : static_cast<int>(std::lround(scenes * unlabeled_frac));

    Rng mix_rng(seed ^ 0x6a09e667f3bcc908ull);
    std::vector<io::SceneBundle> bundles;
    for (int s = 0; s < scenes; ++s) {
        io::SceneBundle b;
        synth::Scene scene = synth::generate_scene(seed + static_cast<uint64_t>(s), params);
        if (synthetic) {
            b.split = "synthetic";
            // mixed sources: each frame drawn from one of the configured specs
            std::vector<synth::Scene> drifted;
            for (size_t m = 0; m < mix_levels.size(); ++m)
                drifted.push_back(synth::inject_drift(
                    scene, synth::noise_preset(mix_levels[m],
                                               seed + 900 + static_cast<uint64_t>(s) * 31 + m)));
            b.scene = drifted.front();
            b.frame_noise.resize(static_cast<size_t>(scene.frames));
            for (int t = 0; t < scene.frames; ++t) {
                size_t pick = static_cast<size_t>(
                    mix_rng.uniform_int(0, static_cast<int64_t>(mix_levels.size()) - 1));
                b.scene.render_labels[static_cast<size_t>(t)] =
                    drifted[pick].render_labels[static_cast<size_t>(t)];
                b.scene.render_rig[static_cast<size_t>(t)] =
                    drifted[pick].render_rig[static_cast<size_t>(t)];
                b.frame_noise[static_cast<size_t>(t)] = mix_levels[pick];
            }
        } else {
            b.scene = scene;
            if (s < val_scenes)
                b.split = "val";
            else if (s < val_scenes + unlabeled_scenes)
                b.split = "unlabeled";
            else
                b.split = "labeled";
        }
        bundles.push_back(std::move(b));
    }
    io::write_dataset(bundles, out_dir);

    io::RunManifest m = start_manifest("generate", seed,
                                       {{"scenes", std::to_string(scenes)},
                                        {"frames", std::to_string(frames)},
                                        {"noise_level", noise_level},
                                        {"mix", mix},
                                        {"out", out_dir}});
    m.finished_unix = unix_now();
    io::write_run_manifest(out_dir, m);
    std::cout << "wrote " << bundles.size() << " scenes to " << out_dir << "\n";
    return 0;
}

int cmd_score(const std::string& dataset_dir, const std::string& road_classes_arg, double floor,
              const std::string& out_path) {
    io::Dataset ds = io::Dataset::open(dataset_dir);
    std::vector<int> road_classes = parse_road_classes(road_classes_arg);
    std::vector<std::string> ids = ds.split("synthetic");
    if (ids.empty()) ids = ds.manifest().frames;
    auto scores = bench::score_frames(ds, ids, road_classes, floor);
    io::write_scores(out_path, scores);
    double mean = 0.0;
    for (const auto& [id, s] : scores) mean += s.value;
    std::cout << "scored " << scores.size() << " frames, mean R "
              << (scores.empty() ? 0.0 : mean / scores.size()) << " -> " << out_path << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& run_dir_override,
              int64_t seed_override) {
    train::TrainConfig cfg = train::TrainConfig::load(config_path);
    if (!run_dir_override.empty()) cfg.run_dir = run_dir_override;
    if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
    cfg.dataset_labeled = resolve_dataset(cfg.dataset_labeled);
    cfg.dataset_synthetic = resolve_dataset(cfg.dataset_synthetic);
    cfg.dataset_target = resolve_dataset(cfg.dataset_target);
    cfg.validate();

    io::RunManifest m = start_manifest("train", cfg.seed,
                                       {{"config", config_path}, {"run_dir", cfg.run_dir}});
    m.config_hash = cfg.config_hash();
    train::TrainResult res = train::train(cfg);
    m.finished_unix = unix_now();
    io::write_run_manifest(cfg.run_dir, m);
    std::cout << "final miou " << res.final_miou << " after " << res.steps << " steps -> "
              << res.run_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& dataset_dir, const std::string& split,
             double tau, const std::string& head, const std::string& out_dir, bool per_frame) {
    net::ModelConfig mc = net::SegNet::read_checkpoint_config(ckpt);
    net::SegNet model(mc);
    std::string ckpt_hash = model.load_checkpoint(ckpt);

    io::Dataset ds = io::Dataset::open(resolve_dataset(dataset_dir));
    evalkit::EvalReport report =
        evalkit::run_eval(model, ds, split, head, tau, per_frame ? out_dir : "");
    evalkit::emit_report(report, out_dir);

    io::RunManifest m = start_manifest("eval", 0,
                                       {{"ckpt", ckpt},
                                        {"dataset", dataset_dir},
                                        {"split", split},
                                        {"head", head}});
    m.config_hash = ckpt_hash;
    m.finished_unix = unix_now();
    io::write_run_manifest(out_dir, m);

    std::cout << "miou " << report.miou;
    if (head == "evidential") std::cout << " coverage " << report.filtered_coverage;
    std::cout << " -> " << out_dir << "/report.json\n";
    return 0;
}

int cmd_gradcheck(uint64_t seed, int trials) {
    auto results = bench::gradcheck_suites(seed, trials);
    bool ok = true;
    for (const auto& [name, err] : results) {
        bool pass = err < 1e-3;
        ok = ok && pass;
        std::printf("%-22s max_rel_err %.3e  %s\n", name.c_str(), err, pass ? "ok" : "FAIL");
    }
    if (!ok) throw NumericalError("gradcheck: finite-difference mismatch");
    return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_path) {
    std::ostringstream table;
    table << "| run | final mIoU | per-class |\n|---|---|---|\n";
    for (const auto& dir : run_dirs) {
        std::ifstream metrics(dir + "/metrics.csv");
        if (!metrics) throw IoError("report: cannot open " + dir + "/metrics.csv");
        std::string line, last, header;
        std::getline(metrics, header);
        while (std::getline(metrics, line))
            if (!line.empty()) last = line;
        if (last.empty()) throw ValidationError("report: no epochs recorded in " + dir);
        // miou is column 9, per-class IoUs follow
        std::vector<std::string> cols;
        std::stringstream ss(last);
        std::string tok;
        while (std::getline(ss, tok, ',')) cols.push_back(tok);
        if (cols.size() < 9) throw ValidationError("report: malformed metrics.csv in " + dir);
        table << "| " << fs::path(dir).filename().string() << " | " << cols[8] << " | ";
        for (size_t i = 9; i < cols.size(); ++i)
            table << cols[i] << (i + 1 < cols.size() ? " " : "");
        table << " |\n";
    }
    std::cout << table.str();
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        out << table.str();
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"noise-resilient BEV semantic segmentation training kit"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "procedurally generate a multi-camera dataset");
    uint64_t gen_seed = 1;
    int gen_scenes = 8, gen_frames = 8, gen_cams = 3, gen_w = 160, gen_h = 96;
    double gen_val = 0.25, gen_unlabeled = 0.0, gen_half = 24.0, gen_res = 0.5;
    std::string gen_noise = "none", gen_mix, gen_out;
    bool gen_force = false, gen_diverse = false;
    gen->add_option("--seed", gen_seed);
    gen->add_option("--scenes", gen_scenes);
    gen->add_option("--frames", gen_frames, "frames per scene");
    gen->add_option("--noise-level", gen_noise)
        ->check(CLI::IsMember({"none", "low", "mid", "high"}));
    gen->add_option("--mix", gen_mix, "comma-separated noise specs assigned per frame");
    gen->add_option("--out", gen_out)->required();
    gen->add_flag("--force", gen_force, "overwrite a non-empty output dir");
    gen->add_option("--val-frac", gen_val);
    gen->add_option("--unlabeled-frac", gen_unlabeled);
    gen->add_option("--cams", gen_cams);
    gen->add_option("--image-w", gen_w);
    gen->add_option("--image-h", gen_h);
    gen->add_option("--grid-half", gen_half, "window half-extent in metres");
    gen->add_option("--resolution", gen_res);
    gen->add_flag("--diverse", gen_diverse, "curves, carparks and dense crossings");

    auto* score = app.add_subcommand("score", "consistency scores for synthetic frames");
    std::string score_dataset, score_classes = "drivable", score_out = "scores.json";
    double score_floor = 0.05;
    score->add_option("--dataset", score_dataset)->required();
    score->add_option("--road-classes", score_classes);
    score->add_option("--floor", score_floor);
    score->add_option("--out", score_out);

    auto* tr = app.add_subcommand("train", "run a training experiment from cfg.json");
    std::string train_cfg, train_run_dir;
    int64_t train_seed = -1;
    tr->add_option("--config", train_cfg)->required();
    tr->add_option("--run-dir", train_run_dir, "override run directory");
    tr->add_option("--seed", train_seed, "override seed");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    std::string eval_ckpt, eval_dataset, eval_split = "val", eval_head = "multinomial",
                eval_out = "eval_out";
    double eval_tau = 0.45;
    bool eval_per_frame = false;
    ev->add_option("--ckpt", eval_ckpt)->required();
    ev->add_option("--dataset", eval_dataset)->required();
    ev->add_option("--split", eval_split);
    ev->add_option("--tau", eval_tau);
    ev->add_option("--head", eval_head)->check(CLI::IsMember({"multinomial", "evidential"}));
    ev->add_option("--out", eval_out);
    ev->add_flag("--per-frame", eval_per_frame, "write per-frame ascii summaries");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites");
    uint64_t gc_seed = 7;
    int gc_trials = 20;
    gc->add_option("--seed", gc_seed);
    gc->add_option("--trials", gc_trials);

    auto* rep = app.add_subcommand("report", "aggregate metrics.csv files");
    std::vector<std::string> rep_runs;
    std::string rep_out;
    rep->add_option("--runs", rep_runs, "run directories")->required()->expected(-1);
    rep->add_option("--out", rep_out);

    auto* bn = app.add_subcommand("bench-noise", "loss-variant x noise matrix");
    std::string bn_out = "bench_out";
    int bn_seeds = 3, bn_epochs = 12;
    bool bn_quick = false;
    bn->add_option("--out", bn_out);
    bn->add_option("--seeds", bn_seeds);
    bn->add_option("--epochs", bn_epochs);
    bn->add_flag("--quick", bn_quick, "smaller matrix for smoke runs");

    auto* bh = app.add_subcommand("bench-hlse", "global cluster vs one-vs-rest evidential heads");
    std::string bh_out = "bench_hlse_out";
    int bh_seeds = 3, bh_epochs = 10;
    bool bh_quick = false;
    bh->add_option("--out", bh_out);
    bh->add_option("--seeds", bh_seeds);
    bh->add_option("--epochs", bh_epochs);
    bh->add_flag("--quick", bh_quick);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kUsageError;
    }

    try {
        if (*gen)
            return cmd_generate(gen_seed, gen_scenes, gen_frames, gen_noise, gen_mix,
                                resolve_dataset(gen_out), gen_force, gen_val, gen_unlabeled,
                                gen_cams, gen_w, gen_h, gen_half, gen_res, gen_diverse);
        if (*score)
            return cmd_score(resolve_dataset(score_dataset), score_classes, score_floor,
                             score_out);
        if (*tr) return cmd_train(train_cfg, train_run_dir, train_seed);
        if (*ev)
            return cmd_eval(eval_ckpt, eval_dataset, eval_split, eval_tau, eval_head, eval_out,
                            eval_per_frame);
        if (*gc) return cmd_gradcheck(gc_seed, gc_trials);
        if (*rep) return cmd_report(rep_runs, rep_out);
        if (*bn) {
            bench::BenchOptions opt;
            opt.out_dir = bn_out;
            opt.epochs = bn_epochs;
            opt.train_seeds.clear();
            for (int s = 0; s < bn_seeds; ++s) opt.train_seeds.push_back(11 + s);
            if (bn_quick) {
                opt.labeled_scenes = 3;
                opt.synthetic_scenes = 2;
                opt.val_scenes = 2;
                opt.epochs = std::min(bn_epochs, 3);
                opt.losses = {"dice", "pgcm"};
                opt.conditions = {"mid"};
            }
            bench::bench_noise_resilience(opt);
            std::cout << "summary in " << bn_out << "/bench_summary.md\n";
            return 0;
        }
        if (*bh) {
            bench::BenchOptions opt;
            opt.out_dir = bh_out;
            opt.epochs = bh_epochs;
            opt.train_seeds.clear();
            for (int s = 0; s < bh_seeds; ++s) opt.train_seeds.push_back(21 + s);
            if (bh_quick) {
                opt.labeled_scenes = 3;
                opt.val_scenes = 2;
                opt.epochs = std::min(bh_epochs, 3);
            }
            bench::bench_hlse(opt);
            std::cout << "summary in " << bh_out << "/hlse_summary.md\n";
            return 0;
        }
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kNumericalErrorCode;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kValidationErrorCode;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kValidationErrorCode;
    } catch (const DimensionError& e) {
        std::cerr << "dimension error: " << e.what() << "\n";
        return kValidationErrorCode;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidationErrorCode;
    }
    return 0;
}
