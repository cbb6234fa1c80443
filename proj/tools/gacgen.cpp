// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0
//
// gacgen: scene rendering, the classical reconstruction baseline, model
// training, rollouts, ablations, and gradient checks behind one binary.
// Every subcommand derives all randomness from --seed via named sub-streams,
// so (config, seed) fully determines the output tree byte-for-byte.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gac/evalkit.hpp"
#include "gac/gacmodel.hpp"
#include "gac/reconpipe.hpp"

namespace fs = std::filesystem;
using namespace gac;

namespace {

// ---- Shared plumbing -----------------------------------------------------------

struct SceneArgs {
    uint64_t seed = 7;
    int boxes = 3;
    double room = 2.0;
    double texture = 0.75;
    int image_size = 64;

    void attach(CLI::App* cmd) {
        cmd->add_option("--seed", seed, "root seed; sub-streams branch off it");
        cmd->add_option("--boxes", boxes, "interior boxes in the room");
        cmd->add_option("--room", room, "room half extent (meters)");
        cmd->add_option("--texture-scale", texture, "checker cell size (meters)");
        cmd->add_option("--image-size", image_size, "square frame resolution");
    }
    Scene scene(int index = 0) const {
        SceneSpec spec;
        spec.seed = index == 0 ? substream_seed(seed, "scene")
                               : substream_seed(seed, "scene", uint64_t(index));
        spec.num_boxes = boxes;
        spec.room_half_extent = room;
        spec.texture_scale = texture;
        return build_scene(spec);
    }
    Intrinsics intrinsics() const {
        ModelConfig c;
        c.image_size = image_size;
        return model_intrinsics(c);
    }
    void describe(std::map<std::string, std::string>& kv) const {
        kv["seed"] = std::to_string(seed);
        kv["boxes"] = std::to_string(boxes);
        kv["room"] = std::to_string(room);
        kv["texture_scale"] = std::to_string(texture);
        kv["image_size"] = std::to_string(image_size);
    }
};

struct TrajArgs {
    std::string kind = "walk";  // walk | orbit | dolly
    int frames = 8;
    double orbit_radius_frac = 0.3;   // of the room half extent
    double orbit_span = 1.5707963267948966;
    double height = 0.0;
    double dolly_step_frac = 0.03;
    double walk_step = 0.12;

    void attach(CLI::App* cmd) {
        cmd->add_option("--traj", kind, "trajectory kind: walk, orbit, dolly")
            ->check(CLI::IsMember({"walk", "orbit", "dolly"}));
        cmd->add_option("--frames", frames, "trajectory length in poses");
        cmd->add_option("--orbit-radius", orbit_radius_frac, "orbit radius / room half extent");
        cmd->add_option("--orbit-span", orbit_span, "orbit arc length (radians)");
        cmd->add_option("--height", height, "camera height (meters)");
        cmd->add_option("--dolly-step", dolly_step_frac, "dolly step / room half extent");
        cmd->add_option("--walk-step", walk_step, "random-walk step length (meters)");
    }
    Trajectory build(const Scene& scene, uint64_t root, const char* stream) const {
        require(frames >= 2, "trajectory needs at least two poses");
        double h = scene.spec.room_half_extent;
        if (kind == "orbit")
            return make_orbit_trajectory(orbit_radius_frac * h, frames, height, orbit_span);
        if (kind == "dolly") {
            Pose start = look_at(Vec3(0, height, -0.3 * h), Vec3(0, height, 0));
            return make_dolly_trajectory(start, frames, dolly_step_frac * h);
        }
        Rng rng(substream_seed(root, stream));
        return make_random_walk_trajectory(scene, frames, rng, walk_step, height);
    }
    void describe(std::map<std::string, std::string>& kv) const {
        kv["traj"] = kind;
        kv["frames"] = std::to_string(frames);
        kv["orbit_radius"] = std::to_string(orbit_radius_frac);
        kv["orbit_span"] = std::to_string(orbit_span);
        kv["height"] = std::to_string(height);
        kv["dolly_step"] = std::to_string(dolly_step_frac);
        kv["walk_step"] = std::to_string(walk_step);
    }
};

VariantMode parse_mode(const std::string& s) {
    if (s == "v1") return VariantMode::GeometryContext;
    if (s == "v2") return VariantMode::WarpedContext;
    if (s == "v3") return VariantMode::NoContext;
    throw CLI::ValidationError("--mode", "expected v1, v2, or v3");
}

void write_manifest(const fs::path& dir, const std::string& subcommand, uint64_t seed,
                    const std::map<std::string, std::string>& kv) {
    std::string dump;
    for (const auto& [k, v] : kv) dump += k + "=" + v + "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, hash_str(dump.c_str()));
    std::ofstream os(dir / "manifest.txt");
    if (!os) throw IoError("cannot write manifest in " + dir.string());
    os << "tool=gacgen 0.1.0\n"
       << "subcommand=" << subcommand << "\n"
       << "config_hash=" << buf << "\n"
       << "seed=" << seed << "\n"
       << "format.ppm=P6/255\n"
       << "format.depth=f32le-v1\n"
       << "format.ckpt=gacckpt-v1\n";
    if (!os) throw IoError("cannot write manifest in " + dir.string());
}

// Expands a flat key=value config file into --key=value tokens. Blank lines
// and #-comments are skipped; unknown keys surface as normal parse errors.
std::vector<std::string> config_tokens(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file: " + path);
    auto trim = [](const std::string& s) {
        size_t b = s.find_first_not_of(" \t\r");
        size_t e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::string entry = trim(line);
        if (entry.empty()) continue;
        size_t eq = entry.find('=');
        require(eq != std::string::npos, "config line is not key=value: " + line);
        std::string key = trim(entry.substr(0, eq));
        require(!key.empty(), "config line has an empty key: " + line);
        if (key == "config") continue;  // a config file cannot chain-load another
        tokens.push_back("--" + key + "=" + trim(entry.substr(eq + 1)));
    }
    return tokens;
}

fs::path prepare_out(const std::string& out) {
    fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory: " + out);
    return dir;
}

std::string frame_name(const char* stem, int index, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%03d.%s", stem, index, ext);
    return buf;
}

// ---- scene ----------------------------------------------------------------------

int run_scene(const SceneArgs& sa, const TrajArgs& ta, const std::string& out) {
    fs::path dir = prepare_out(out);
    Scene scene = sa.scene();
    Trajectory traj = ta.build(scene, sa.seed, "traj");
    auto frames = make_dataset(scene, traj, sa.intrinsics());

    fs::create_directories(dir / "frames");
    fs::create_directories(dir / "depth");
    for (size_t i = 0; i < frames.size(); ++i) {
        write_ppm((dir / "frames" / frame_name("frame", int(i), "ppm")).string(),
                  frames[i].image);
        write_depth_raw((dir / "depth" / frame_name("depth", int(i), "raw")).string(),
                        frames[i].depth);
    }
    save_trajectory((dir / "traj.csv").string(), traj);

    std::map<std::string, std::string> kv;
    sa.describe(kv);
    ta.describe(kv);
    write_manifest(dir, "scene", sa.seed, kv);
    std::printf("scene: %zu frames -> %s\n", frames.size(), dir.string().c_str());
    return 0;
}

// ---- baseline ---------------------------------------------------------------------

int run_baseline_cmd(const SceneArgs& sa, const TrajArgs& ta, const std::string& out,
                     double noise_sigma, double bias_sigma, bool rebuild, bool dump) {
    fs::path dir = prepare_out(out);
    Scene scene = sa.scene();
    Trajectory traj = ta.build(scene, sa.seed, "traj");

    BaselineOptions opt;
    opt.noise.mult_sigma = noise_sigma;
    opt.noise.bias_sigma = bias_sigma;
    opt.noise_seed = substream_seed(sa.seed, "noise");
    opt.rebuild_each_step = rebuild;
    std::vector<RgbImage> rendered, inpainted;
    if (dump) {
        opt.dump_rendered = &rendered;
        opt.dump_inpainted = &inpainted;
    }
    DriftReport report = run_baseline(scene, traj, sa.intrinsics(), opt);
    save_drift_report((dir / "drift.csv").string(), report);
    if (dump) {
        fs::create_directories(dir / "frames");
        for (size_t i = 0; i < rendered.size(); ++i) {
            write_ppm((dir / "frames" / frame_name("splat", int(i) + 1, "ppm")).string(),
                      rendered[i]);
            write_ppm((dir / "frames" / frame_name("inpaint", int(i) + 1, "ppm")).string(),
                      inpainted[i]);
        }
    }

    std::map<std::string, std::string> kv;
    sa.describe(kv);
    ta.describe(kv);
    kv["noise_sigma"] = std::to_string(noise_sigma);
    kv["bias_sigma"] = std::to_string(bias_sigma);
    kv["rebuild"] = rebuild ? "1" : "0";
    write_manifest(dir, "baseline", sa.seed, kv);
    if (!report.records.empty())
        std::printf("baseline: %zu steps, psnr %.2f -> %.2f dB\n", report.records.size(),
                    report.records.front().psnr_db, report.records.back().psnr_db);
    return 0;
}

// ---- train ------------------------------------------------------------------------

struct TrainArgs {
    int steps = 2000;
    std::string mode = "v1";
    std::string cga = "on";
    double dropout = 0.5;
    int clips = 8;
    int clip_frames = 5;
    int scenes = 1;  // scenes of the same family the clips are drawn from
    double walk_step = 0.12;  // step length of the training-clip walks
    bool timing = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("--steps", steps, "optimizer steps");
        cmd->add_option("--mode", mode, "context variant: v1 geometry, v2 warped, v3 none")
            ->check(CLI::IsMember({"v1", "v2", "v3"}));
        cmd->add_option("--cga", cga, "camera-gated attention on, or additive conditioning off")
            ->check(CLI::IsMember({"on", "off"}));
        cmd->add_option("--dropout", dropout, "geometry slot dropout rate");
        cmd->add_option("--clips", clips, "training clips rendered per scene");
        cmd->add_option("--clip-frames", clip_frames, "frames per training clip");
        cmd->add_option("--scenes", scenes, "scenes sampled from the family (seed, seed+stream)")
            ->check(CLI::PositiveNumber);
        cmd->add_flag("--timing", timing, "record wall-clock seconds in report.csv");
    }
    ModelConfig config(const SceneArgs& sa) const {
        ModelConfig cfg;
        cfg.image_size = sa.image_size;
        cfg.dropout_r = dropout;
        cfg.seed = substream_seed(sa.seed, "init");
        cfg.conditioning = cga == "on" ? Conditioning::CameraGated : Conditioning::Additive;
        return cfg;
    }
    void describe(std::map<std::string, std::string>& kv) const {
        kv["steps"] = std::to_string(steps);
        kv["mode"] = mode;
        kv["cga"] = cga;
        kv["dropout"] = std::to_string(dropout);
        kv["clips"] = std::to_string(clips);
        kv["clip_frames"] = std::to_string(clip_frames);
        kv["scenes"] = std::to_string(scenes);
        kv["clip_walk_step"] = std::to_string(walk_step);
    }
};

int run_train(const SceneArgs& sa, const TrainArgs& tr, const std::string& out) {
    fs::path dir = prepare_out(out);
    ModelConfig cfg = tr.config(sa);
    std::vector<std::vector<FrameSample>> clips;
    if (tr.scenes == 1) {
        clips = make_training_clips(sa.scene(), tr.clips, tr.clip_frames,
                                    substream_seed(sa.seed, "clips"), cfg, tr.walk_step);
    } else {
        for (int i = 0; i < tr.scenes; ++i) {
            auto part =
                make_training_clips(sa.scene(i), tr.clips, tr.clip_frames,
                                    substream_seed(sa.seed, "clips", uint64_t(i)), cfg,
                                    tr.walk_step);
            for (auto& c : part) clips.push_back(std::move(c));
        }
    }
    GacModel model = make_model(cfg);
    TrainOptions opts;
    opts.steps = tr.steps;
    opts.mode = parse_mode(tr.mode);
    opts.data_seed = substream_seed(sa.seed, "data");
    TrainReport report = train(model, clips, opts);

    save_model(model, (dir / "model.ckpt").string());
    save_train_report((dir / "report.csv").string(), report, tr.timing);

    std::map<std::string, std::string> kv;
    sa.describe(kv);
    tr.describe(kv);
    write_manifest(dir, "train", sa.seed, kv);
    std::printf("train: %d steps, loss %.6f -> %.6f\n", tr.steps, report.steps.front().loss,
                report.steps.back().loss);
    return 0;
}

// ---- rollout ----------------------------------------------------------------------

int run_rollout(const SceneArgs& sa, const TrajArgs& ta, const std::string& ckpt,
                const std::string& out, const std::string& mode_str, int context_k,
                bool forth_back, bool no_geometry, bool dump_geometry) {
    fs::path dir = prepare_out(out);
    GacModel model = load_model(ckpt);
    require(model.cfg.image_size == sa.image_size,
            "rollout: checkpoint resolution differs from --image-size");
    Scene scene = sa.scene();
    Trajectory traj = ta.build(scene, sa.seed, "rollout.traj");
    if (forth_back) traj = forth_and_back(traj);
    auto gt = make_dataset(scene, traj, model_intrinsics(model.cfg));

    RolloutOptions opts;
    opts.context_k = context_k;
    opts.mode = parse_mode(mode_str);
    opts.emit_geometry = !no_geometry;
    std::vector<DepthMap> oracle;
    if (opts.mode == VariantMode::WarpedContext) {
        for (const auto& f : gt) oracle.push_back(f.depth);
        opts.oracle_depths = &oracle;
    }
    RolloutResult result = rollout(model, gt[0].image, traj, opts);

    fs::create_directories(dir / "frames");
    for (size_t i = 0; i < result.frames.size(); ++i)
        write_ppm((dir / "frames" / frame_name("pred", int(i) + 1, "ppm")).string(),
                  result.frames[i]);
    if (dump_geometry && !result.geometries.empty()) {
        fs::create_directories(dir / "geo");
        for (size_t i = 0; i < result.geometries.size(); ++i)
            write_depth_raw((dir / "geo" / frame_name("geo", int(i), "raw")).string(),
                            result.geometries[i]);
    }
    save_trajectory((dir / "traj.csv").string(), traj);

    std::vector<RgbImage> reference;
    for (size_t i = 1; i < gt.size(); ++i) reference.push_back(gt[i].image);
    MetricReport metrics = compare_frames(result.frames, reference);
    save_metric_report((dir / "metrics.csv").string(), metrics);

    std::map<std::string, std::string> kv;
    sa.describe(kv);
    ta.describe(kv);
    kv["ckpt"] = ckpt;
    kv["mode"] = mode_str;
    kv["context_k"] = std::to_string(context_k);
    kv["forth_and_back"] = forth_back ? "1" : "0";
    kv["emit_geometry"] = no_geometry ? "0" : "1";
    write_manifest(dir, "rollout", sa.seed, kv);
    std::printf("rollout: %zu poses, %zu frames, mean psnr %.2f dB\n", traj.size(),
                result.frames.size(), metrics.mean_psnr_db);
    return 0;
}

// ---- ablate -----------------------------------------------------------------------

struct ArmOutcome {
    std::string arm;
    uint64_t seed = 0;
    double mean_psnr = 0, mean_ssim = 0, final_psnr = 0;
    double mean_step_seconds = 0;
    double mean_tokens = 0;
    double pose_sens = 0;
};

ArmOutcome run_arm(const std::string& arm, const SceneArgs& base, const TrajArgs& ta,
                   TrainArgs tr, uint64_t seed, const fs::path& dir) {
    SceneArgs sa = base;
    sa.seed = seed;
    tr.walk_step = ta.walk_step;  // training clips follow the eval protocol's motion scale
    if (arm == "v1" || arm == "v2" || arm == "v3") tr.mode = arm;
    if (arm == "cga-on") tr.cga = "on";
    if (arm == "cga-off") tr.cga = "off";
    if (arm == "dropout0") tr.dropout = 0.0;
    if (arm == "dropout1") tr.dropout = 1.0;

    fs::path arm_dir = dir / ("arm_" + arm + "_seed" + std::to_string(seed));
    run_train(sa, tr, arm_dir.string());
    GacModel model = load_model((arm_dir / "model.ckpt").string());

    // Held-out evaluation: one fresh trajectory per training scene, frames pooled.
    std::vector<RgbImage> predicted, reference;
    double final_sum = 0;
    double sens = 0;
    for (int i = 0; i < tr.scenes; ++i) {
        Scene scene = sa.scene(i);
        std::string stream = i == 0 ? "rollout.traj" : "rollout.traj." + std::to_string(i);
        Trajectory traj = ta.build(scene, sa.seed, stream.c_str());
        auto gt = make_dataset(scene, traj, model_intrinsics(model.cfg));
        RolloutOptions opts;
        opts.mode = parse_mode(tr.mode);
        std::vector<DepthMap> oracle;
        if (opts.mode == VariantMode::WarpedContext) {
            for (const auto& f : gt) oracle.push_back(f.depth);
            opts.oracle_depths = &oracle;
        }
        RolloutResult result = rollout(model, gt[0].image, traj, opts);
        final_sum += psnr(result.frames.back(), gt.back().image);
        for (size_t t = 0; t < result.frames.size(); ++t) {
            predicted.push_back(std::move(result.frames[t]));
            reference.push_back(gt[t + 1].image);
        }
        if (i == 0) {
            // Pose sensitivity: the same one-image prefix queried at two held-out poses.
            InterleavedSequence prefix;
            prefix.mode = opts.mode;
            SeqElement ref;
            ref.kind = ElemKind::ImageFrame;
            ref.image = gt[0].image;
            ref.pose = traj[0];
            ref.frame_index = 0;
            prefix.elems.push_back(std::move(ref));
            sens = pose_sensitivity(model, prefix, traj[1], traj.back());
        }
    }
    MetricReport metrics = compare_frames(predicted, reference);
    save_metric_report((arm_dir / "metrics.csv").string(), metrics);

    // Re-read the stored report for timing and token means.
    std::ifstream is(arm_dir / "report.csv");
    std::string line;
    std::getline(is, line);
    double sec_sum = 0, tok_sum = 0;
    int rows = 0;
    while (std::getline(is, line)) {
        int step_i = 0;
        double loss_v = 0, sec_v = 0;
        long long tok_v = 0;
        if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lld", &step_i, &loss_v, &sec_v, &tok_v) == 4) {
            sec_sum += sec_v;
            tok_sum += double(tok_v);
            ++rows;
        }
    }

    ArmOutcome o;
    o.arm = arm;
    o.seed = seed;
    o.mean_psnr = metrics.mean_psnr_db;
    o.mean_ssim = metrics.mean_ssim;
    o.final_psnr = final_sum / tr.scenes;  // final-frame PSNR averaged over eval scenes
    o.mean_step_seconds = rows ? sec_sum / rows : 0;
    o.mean_tokens = rows ? tok_sum / rows : 0;
    o.pose_sens = sens;
    return o;
}

int run_ablate(const SceneArgs& sa, const TrajArgs& ta, const TrainArgs& tr,
               const std::string& out, std::string what, const std::string& cga_flag,
               int num_seeds) {
    fs::path dir = prepare_out(out);
    if (cga_flag == "off") what = "cga";
    std::vector<std::string> arms;
    if (what == "variant")
        arms = {"v1", "v3"};
    else if (what == "cga")
        arms = {"cga-on", "cga-off"};
    else if (what == "dropout")
        arms = {"dropout0", "dropout1"};
    else
        throw CLI::ValidationError("--what", "expected variant, cga, or dropout");

    TrainArgs tr_arm = tr;
    if (what == "dropout") tr_arm.timing = true;

    std::vector<ArmOutcome> outcomes;
    for (int s = 0; s < num_seeds; ++s)
        for (const std::string& arm : arms)
            outcomes.push_back(run_arm(arm, sa, ta, tr_arm, sa.seed + uint64_t(s), dir));

    std::ofstream os(dir / "summary.csv");
    if (!os) throw IoError("cannot write summary.csv");
    os << "arm,seed,mean_psnr_db,mean_ssim,final_psnr_db,step_seconds,tokens,pose_sensitivity\n";
    char buf[256];
    for (const ArmOutcome& o : outcomes) {
        std::snprintf(buf, sizeof(buf), "%s,%llu,%.6f,%.6f,%.6f,%.6f,%.1f,%.8f\n", o.arm.c_str(),
                      (unsigned long long)o.seed, o.mean_psnr, o.mean_ssim, o.final_psnr,
                      o.mean_step_seconds, o.mean_tokens, o.pose_sens);
        os << buf;
    }
    std::map<std::string, std::string> kv;
    sa.describe(kv);
    ta.describe(kv);
    kv["what"] = what;
    kv["num_seeds"] = std::to_string(num_seeds);
    kv["steps"] = std::to_string(tr.steps);
    write_manifest(dir, "ablate", sa.seed, kv);
    std::printf("ablate %s: %zu arms x %d seeds -> %s\n", what.c_str(), arms.size(), num_seeds,
                (dir / "summary.csv").string().c_str());
    return 0;
}

// ---- gradcheck ----------------------------------------------------------------------

struct CheckRow {
    std::string name;
    double err = 0;
    double tol = 0;
};

double check_op(const ScalarFn& f, int rows, int cols, uint64_t seed, double h = 1e-6) {
    Rng rng(seed);
    std::vector<double> x0(size_t(rows) * cols);
    for (double& v : x0) v = rng.uniform(-1.0, 1.0);
    return finite_diff_check(f, {rows, cols}, x0, h);
}

// Reduce any tensor to a scalar through a fixed pseudo-random projection so
// every output coordinate contributes to the checked gradient.
DiffTensor project(Graph& g, DiffTensor t, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(size_t(t.numel()));
    for (double& v : w) v = rng.uniform(-1.0, 1.0);
    DiffTensor wt = g.constant({t.rows(), t.cols()}, std::move(w));
    return sum_all(mul(t, wt));
}

int run_gradcheck() {
    std::vector<CheckRow> rows;
    auto add_row = [&](const std::string& name, double err, double tol) {
        rows.push_back({name, err, tol});
    };
    const double kPrimTol = 1e-6;
    uint64_t s = 12345;

    auto with_const = [&](int r, int c, uint64_t seed) {
        Rng rng(seed);
        std::vector<double> v(size_t(r) * c);
        for (double& x : v) x = rng.uniform(-1.0, 1.0);
        return v;
    };

    add_row("add", check_op([&](Graph& g, DiffTensor x) {
                return project(g, add(x, g.constant({4, 5}, with_const(4, 5, 1))), s);
            }, 4, 5, 2), kPrimTol);
    add_row("sub", check_op([&](Graph& g, DiffTensor x) {
                return project(g, sub(g.constant({4, 5}, with_const(4, 5, 3)), x), s);
            }, 4, 5, 4), kPrimTol);
    add_row("mul", check_op([&](Graph& g, DiffTensor x) {
                return project(g, mul(x, g.constant({4, 5}, with_const(4, 5, 5))), s);
            }, 4, 5, 6), kPrimTol);
    add_row("scale", check_op([&](Graph& g, DiffTensor x) {
                return project(g, scale(x, -1.7), s);
            }, 4, 5, 7), kPrimTol);
    add_row("add_rowvec", check_op([&](Graph& g, DiffTensor x) {
                return project(g, add_rowvec(g.constant({6, 5}, with_const(6, 5, 8)), x), s);
            }, 1, 5, 9), kPrimTol);
    add_row("matmul", check_op([&](Graph& g, DiffTensor x) {
                return project(g, matmul(x, g.constant({5, 3}, with_const(5, 3, 10))), s);
            }, 4, 5, 11), kPrimTol);
    add_row("matmul_rhs", check_op([&](Graph& g, DiffTensor x) {
                return project(g, matmul(g.constant({3, 4}, with_const(3, 4, 12)), x), s);
            }, 4, 5, 13), kPrimTol);
    add_row("transpose", check_op([&](Graph& g, DiffTensor x) {
                return project(g, transpose(x), s);
            }, 4, 5, 14), kPrimTol);
    add_row("reshape", check_op([&](Graph& g, DiffTensor x) {
                return project(g, reshape(x, {10, 2}), s);
            }, 4, 5, 15), kPrimTol);
    add_row("concat_rows", check_op([&](Graph& g, DiffTensor x) {
                return project(g, concat_rows({x, g.constant({2, 5}, with_const(2, 5, 16))}), s);
            }, 4, 5, 17), kPrimTol);
    add_row("concat_cols", check_op([&](Graph& g, DiffTensor x) {
                return project(g, concat_cols({x, g.constant({4, 2}, with_const(4, 2, 18))}), s);
            }, 4, 5, 19), kPrimTol);
    add_row("split_rows", check_op([&](Graph& g, DiffTensor x) {
                auto parts = split_rows(x, {1, 3});
                return add(project(g, parts[0], s), project(g, parts[1], s + 1));
            }, 4, 5, 20), kPrimTol);
    add_row("split_cols", check_op([&](Graph& g, DiffTensor x) {
                auto parts = split_cols(x, {2, 3});
                return add(project(g, parts[0], s + 2), project(g, parts[1], s + 3));
            }, 4, 5, 21), kPrimTol);
    add_row("slice_rows", check_op([&](Graph& g, DiffTensor x) {
                return project(g, slice_rows(x, 1, 3), s);
            }, 4, 5, 22), kPrimTol);
    add_row("gather", check_op([&](Graph& g, DiffTensor x) {
                return project(g, gather(x, {3, 0, 3, 1}, Shape{2, 2}), s);
            }, 4, 5, 23), kPrimTol);
    add_row("sigmoid", check_op([&](Graph& g, DiffTensor x) {
                return project(g, sigmoid(x), s);
            }, 4, 5, 24), kPrimTol);
    add_row("gelu", check_op([&](Graph& g, DiffTensor x) {
                return project(g, gelu(x), s);
            }, 4, 5, 25), kPrimTol);
    add_row("row_softmax", check_op([&](Graph& g, DiffTensor x) {
                return project(g, row_softmax(x), s);
            }, 4, 5, 26), kPrimTol);
    add_row("layer_norm", check_op([&](Graph& g, DiffTensor x) {
                DiffTensor gain = g.constant({1, 5}, with_const(1, 5, 27));
                DiffTensor bias = g.constant({1, 5}, with_const(1, 5, 28));
                return project(g, layer_norm(x, gain, bias), s);
            }, 4, 5, 29), kPrimTol);
    add_row("mean_all", check_op([&](Graph& g, DiffTensor x) { (void)g; return mean_all(x); },
                                 4, 5, 30), kPrimTol);
    add_row("sum_squares", check_op([&](Graph& g, DiffTensor x) { (void)g; return sum_squares(x); },
                                    4, 5, 31), kPrimTol);
    {
        AttnPlan plan;
        plan.n = 6;
        plan.spans.push_back({0, 2, {{0, 2}}});
        plan.spans.push_back({2, 4, {{0, 4}}});
        plan.spans.push_back({4, 6, {{0, 2}, {4, 6}}});
        add_row("masked_attention",
                check_op([&](Graph& g, DiffTensor x) {
                    auto parts = split_cols(x, {4, 4, 4});
                    return project(g, masked_attention(parts[0], parts[1], parts[2], 2, plan), s);
                }, 6, 12, 32), kPrimTol);
    }

    // Composite attention blocks at N=4, D=8, h=2, checked through every input.
    const double kBlockTol = 1e-4;
    {
        int n = 4, d = 8, heads = 2;
        AttnPlan plan = AttnPlan::full(n);
        auto make_cga = [&](Graph& g) {
            CgaTensors c;
            c.heads = heads;
            c.w1 = g.constant({d, 3 * d}, with_const(d, 3 * d, 40));
            c.b1 = g.constant({1, 3 * d}, with_const(1, 3 * d, 41));
            c.w2 = g.constant({d, 2 * d}, with_const(d, 2 * d, 42));
            c.b2 = g.constant({1, 2 * d}, with_const(1, 2 * d, 43));
            c.w3 = g.constant({d, d}, with_const(d, d, 44));
            c.b3 = g.constant({1, d}, with_const(1, d, 45));
            return c;
        };
        add_row("cga_attention(features)", check_op([&](Graph& g, DiffTensor x) {
                    DiffTensor rays = g.constant({n, d}, with_const(n, d, 46));
                    return project(g, cga_attention(x, rays, make_cga(g), plan), s);
                }, n, d, 47, 1e-5), kBlockTol);
        add_row("cga_attention(rays)", check_op([&](Graph& g, DiffTensor x) {
                    DiffTensor f = g.constant({n, d}, with_const(n, d, 48));
                    return project(g, cga_attention(f, x, make_cga(g), plan), s);
                }, n, d, 49, 1e-5), kBlockTol);
        auto make_block = [&](Graph& g) {
            BlockTensors b;
            b.attn = make_cga(g);
            b.norm1_g = g.constant({1, d}, std::vector<double>(size_t(d), 1.0));
            b.norm1_b = g.constant({1, d}, with_const(1, d, 50));
            b.norm2_g = g.constant({1, d}, std::vector<double>(size_t(d), 1.0));
            b.norm2_b = g.constant({1, d}, with_const(1, d, 51));
            b.mlp_w1 = g.constant({d, 4 * d}, with_const(d, 4 * d, 52));
            b.mlp_b1 = g.constant({1, 4 * d}, with_const(1, 4 * d, 53));
            b.mlp_w2 = g.constant({4 * d, d}, with_const(4 * d, d, 54));
            b.mlp_b2 = g.constant({1, d}, with_const(1, d, 55));
            return b;
        };
        add_row("cga_block", check_op([&](Graph& g, DiffTensor x) {
                    DiffTensor rays = g.constant({n, d}, with_const(n, d, 56));
                    return project(g, cga_block(x, rays, make_block(g), plan, true), s);
                }, n, d, 57, 1e-5), kBlockTol);
    }

    // End to end: a tiny two-frame interleaved model, loss wrt one parameter
    // from each stage of the pipeline.
    const double kEndTol = 1e-3;
    {
        ModelConfig cfg;
        cfg.image_size = 8;
        cfg.patch = 4;
        cfg.dim = 8;
        cfg.heads = 2;
        cfg.depth = 2;
        cfg.context_max = 1;
        cfg.seed = 99;
        GacModel model = make_model(cfg);

        SceneSpec spec;
        spec.seed = 5;
        Scene scene = build_scene(spec);
        auto clips = make_training_clips(scene, 1, 2, 17, cfg);
        Rng seq_rng(31);
        InterleavedSequence seq = build_sequence(clips[0], VariantMode::GeometryContext, 0.0, 1,
                                                 seq_rng, model_intrinsics(cfg));

        for (const char* pname : {"embed.ray.w", "blk0.attn.w2", "head.rgb.w"}) {
            std::string name = pname;
            Shape shp = model.params.get(name).shape;
            std::vector<double> x0 = model.params.get(name).value;
            auto f = [&model, &seq, name](Graph& g, DiffTensor x) {
                return sequence_loss(g, model, seq, name, x).loss;
            };
            add_row("end_to_end(" + name + ")", finite_diff_check(f, shp, x0, 1e-5), kEndTol);
        }
    }

    bool ok = true;
    std::printf("%-28s %12s %10s  %s\n", "component", "max_rel_err", "tol", "status");
    for (const CheckRow& r : rows) {
        bool pass = r.err <= r.tol;
        ok = ok && pass;
        std::printf("%-28s %12.3e %10.0e  %s\n", r.name.c_str(), r.err, r.tol,
                    pass ? "ok" : "FAIL");
    }
    return ok ? 0 : 3;
}

// ---- eval -------------------------------------------------------------------------

int run_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& out) {
    auto list_ppm = [](const std::string& d) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(d))
            if (e.path().extension() == ".ppm") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        return files;
    };
    auto pred_files = list_ppm(pred_dir);
    auto gt_files = list_ppm(gt_dir);
    require(!pred_files.empty(), "eval: no .ppm files in " + pred_dir);
    require(pred_files.size() == gt_files.size(), "eval: directories differ in frame count");
    std::vector<RgbImage> pred, gt;
    for (size_t i = 0; i < pred_files.size(); ++i) {
        pred.push_back(read_ppm(pred_files[i].string()));
        gt.push_back(read_ppm(gt_files[i].string()));
    }
    MetricReport report = compare_frames(pred, gt);
    if (out.empty()) {
        for (size_t i = 0; i < report.frames.size(); ++i)
            std::printf("%zu,%.6f,%.6f\n", i, report.frames[i].psnr_db, report.frames[i].ssim);
        std::printf("mean,%.6f,%.6f\n", report.mean_psnr_db, report.mean_ssim);
    } else {
        save_metric_report(out, report);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"geometry-as-context scene video toolkit"};
    app.require_subcommand(1);

    SceneArgs sa;
    TrajArgs ta;
    TrainArgs tr;
    std::string out = "out";
    std::string ckpt, mode = "v1", what = "variant", cga_flag = "on";
    std::string pred_dir, gt_dir, eval_out;
    int context_k = 4, num_seeds = 3;
    bool forth_back = false, no_geometry = false, dump_geometry = false;
    double noise_sigma = 0.05, bias_sigma = 0.0;
    bool rebuild = false, dump_frames = false;

    std::string config_path;
    auto add_common = [&](CLI::App* cmd, bool with_traj) {
        cmd->add_option("--config", config_path, "flat key=value config file; flags override");
        sa.attach(cmd);
        if (with_traj) ta.attach(cmd);
        cmd->add_option("--out", out, "output directory");
        return cmd;
    };

    CLI::App* scene_cmd = add_common(app.add_subcommand("scene", "render a ground-truth dataset"),
                                     true);
    (void)scene_cmd;

    CLI::App* base_cmd = add_common(
        app.add_subcommand("baseline", "classical reconstruct-splat-inpaint drift run"), true);
    base_cmd->add_option("--noise-sigma", noise_sigma, "multiplicative depth noise sigma");
    base_cmd->add_option("--bias-sigma", bias_sigma, "additive depth noise sigma (meters)");
    base_cmd->add_flag("--rebuild", rebuild, "rebuild the cloud from only the newest frame");
    base_cmd->add_flag("--dump-frames", dump_frames, "write per-step splat and inpaint images");

    CLI::App* train_cmd = add_common(app.add_subcommand("train", "train a model on one scene"),
                                     false);
    tr.attach(train_cmd);
    train_cmd->add_option("--walk-step", tr.walk_step, "training-clip walk step length (meters)");

    CLI::App* roll_cmd = add_common(
        app.add_subcommand("rollout", "generate frames along a trajectory from one image"), true);
    roll_cmd->add_option("--ckpt", ckpt, "model checkpoint")->required();
    roll_cmd->add_option("--mode", mode, "context variant: v1, v2, v3")
        ->check(CLI::IsMember({"v1", "v2", "v3"}));
    roll_cmd->add_option("--context-k", context_k, "context frames per step");
    roll_cmd->add_flag("--forth-and-back", forth_back, "append the reversed trajectory");
    roll_cmd->add_flag("--no-geometry", no_geometry, "do not interleave generated geometry");
    roll_cmd->add_flag("--dump-geometry", dump_geometry, "write generated depth maps");

    CLI::App* abl_cmd = add_common(app.add_subcommand("ablate", "paired comparison runs"), true);
    tr.attach(abl_cmd);
    abl_cmd->add_option("--what", what, "axis: variant, cga, dropout")
        ->check(CLI::IsMember({"variant", "cga", "dropout"}));
    abl_cmd->add_option("--num-seeds", num_seeds, "paired seeds per arm");
    // --cga off redirects the axis for spec parity with `ablate --cga off`.

    app.add_subcommand("gradcheck", "finite-difference gradient verification");

    CLI::App* eval_cmd = app.add_subcommand("eval", "metrics between two frame directories");
    eval_cmd->add_option("--pred", pred_dir, "predicted frames directory")->required();
    eval_cmd->add_option("--gt", gt_dir, "reference frames directory")->required();
    eval_cmd->add_option("--out", eval_out, "metrics CSV path (default: stdout)");

    // Config-file values must lose to explicit flags, so every option keeps
    // its last occurrence and the config tokens are parsed first.
    std::function<void(CLI::App*)> take_last = [&](CLI::App* a) {
        for (CLI::Option* o : a->get_options()) o->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        for (CLI::App* s : a->get_subcommands(nullptr)) take_last(s);
    };
    take_last(&app);

    try {
        app.parse(argc, argv);
        if (!config_path.empty()) {
            // Re-parse as: subcommand, config-derived tokens, then the original
            // command line (so explicit flags land last and win).
            std::vector<std::string> rebuilt = {argv[0], argv[1]};
            for (std::string& t : config_tokens(config_path)) rebuilt.push_back(std::move(t));
            for (int i = 2; i < argc; ++i) rebuilt.push_back(argv[i]);
            std::vector<const char*> cargv;
            cargv.reserve(rebuilt.size());
            for (const std::string& s : rebuilt) cargv.push_back(s.c_str());
            app.clear();
            app.parse(int(cargv.size()), cargv.data());
        }
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 2;
    } catch (const InvariantError& e) {
        std::fprintf(stderr, "invariant violation: %s\n", e.what());
        return 3;
    }

    try {
        if (app.got_subcommand("scene")) return run_scene(sa, ta, out);
        if (app.got_subcommand("baseline"))
            return run_baseline_cmd(sa, ta, out, noise_sigma, bias_sigma, rebuild, dump_frames);
        if (app.got_subcommand("train")) return run_train(sa, tr, out);
        if (app.got_subcommand("rollout"))
            return run_rollout(sa, ta, ckpt, out, mode, context_k, forth_back, no_geometry,
                               dump_geometry);
        if (app.got_subcommand("ablate"))
            return run_ablate(sa, ta, tr, out, what, tr.cga, num_seeds);
        if (app.got_subcommand("gradcheck")) return run_gradcheck();
        if (app.got_subcommand("eval")) return run_eval(pred_dir, gt_dir, eval_out);
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 2;
    } catch (const InvariantError& e) {
        std::fprintf(stderr, "invariant violation: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 1;
}
