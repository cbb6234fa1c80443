// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#include "gac/gacmodel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "gac/reconpipe.hpp"

namespace gac {

void ModelConfig::validate() const {
    require(image_size > 0 && patch > 0 && image_size % patch == 0,
            "ModelConfig: image_size must be a positive multiple of patch");
    require(dim > 0 && heads > 0 && dim % heads == 0,
            "ModelConfig: dim must be a positive multiple of heads");
    require(depth > 0, "ModelConfig: depth must be positive");
    require(dropout_r >= 0.0 && dropout_r <= 1.0, "ModelConfig: dropout_r must be in [0,1]");
    require(context_min >= 1 && context_max >= context_min,
            "ModelConfig: context range must satisfy 1 <= min <= max");
    require(geo_near > 0 && geo_far > geo_near, "ModelConfig: need 0 < geo_near < geo_far");
    require(lr > 0, "ModelConfig: learning rate must be positive");
}

Intrinsics model_intrinsics(const ModelConfig& cfg) {
    Intrinsics k;
    k.width = cfg.image_size;
    k.height = cfg.image_size;
    k.fx = k.fy = double(cfg.image_size);
    k.cx = k.cy = double(cfg.image_size) / 2.0;
    return k;
}

GacModel make_model(const ModelConfig& cfg) {
    cfg.validate();
    GacModel m;
    m.cfg = cfg;
    int d = cfg.dim, p2 = cfg.patch * cfg.patch, n = cfg.tokens_per_frame();

    auto addu = [&](const std::string& name, Shape s, double bound) {
        Rng r(substream_seed(cfg.seed, "init." + name));
        m.params.add(name, s, uniform_init(r, s.numel(), bound));
    };
    auto addc = [&](const std::string& name, Shape s, double fill) {
        m.params.add(name, s, fill);
    };

    addu("embed.rgb.w", {3 * p2, d}, 1.0 / std::sqrt(3.0 * p2));
    addc("embed.rgb.b", {1, d}, 0.0);
    addu("embed.geo.w", {p2, d}, 1.0 / std::sqrt(double(p2)));
    addc("embed.geo.b", {1, d}, 0.0);
    addu("embed.task", {2, d}, 1.0 / std::sqrt(double(d)));
    addu("embed.ray.w", {6 * p2, d}, 1.0 / std::sqrt(6.0 * p2));  // bias-free: zero rays
                                                                  // must embed to zero
    addu("embed.query", {n, d}, 1.0 / std::sqrt(double(d)));
    for (int b = 0; b < cfg.depth; ++b) {
        std::string pre = "blk" + std::to_string(b) + ".";
        addu(pre + "attn.w1", {d, 3 * d}, 1.0 / std::sqrt(double(d)));
        addc(pre + "attn.b1", {1, 3 * d}, 0.0);
        if (cfg.conditioning == Conditioning::CameraGated) {
            addc(pre + "attn.w2", {d, 2 * d}, 0.0);  // gate path starts closed
            addc(pre + "attn.b2", {1, 2 * d}, 0.0);
        }
        addu(pre + "attn.w3", {d, d}, 1.0 / std::sqrt(double(d)));
        addc(pre + "attn.b3", {1, d}, 0.0);
        addc(pre + "norm1.g", {1, d}, 1.0);
        addc(pre + "norm1.b", {1, d}, 0.0);
        addc(pre + "norm2.g", {1, d}, 1.0);
        addc(pre + "norm2.b", {1, d}, 0.0);
        addu(pre + "mlp.w1", {d, 4 * d}, 1.0 / std::sqrt(double(d)));
        addc(pre + "mlp.b1", {1, 4 * d}, 0.0);
        addu(pre + "mlp.w2", {4 * d, d}, 1.0 / std::sqrt(4.0 * d));
        addc(pre + "mlp.b2", {1, d}, 0.0);
    }
    addc("final_norm.g", {1, d}, 1.0);
    addc("final_norm.b", {1, d}, 0.0);
    addu("head.rgb.w", {d, 3 * p2}, 1.0 / std::sqrt(double(d)));
    addc("head.rgb.b", {1, 3 * p2}, 0.0);
    addu("head.geo.w", {d, p2}, 1.0 / std::sqrt(double(d)));
    addc("head.geo.b", {1, p2}, 0.0);
    return m;
}

// --- Checkpointing --------------------------------------------------------------

namespace {

constexpr const char* kConfigParam = "__config__";

std::vector<double> encode_config(const ModelConfig& c) {
    return {1.0,
            double(c.image_size),
            double(c.patch),
            double(c.dim),
            double(c.heads),
            double(c.depth),
            c.dropout_r,
            double(c.context_min),
            double(c.context_max),
            double(uint32_t(c.seed >> 32)),
            double(uint32_t(c.seed & 0xffffffffull)),
            c.conditioning == Conditioning::Additive ? 1.0 : 0.0,
            c.geo_near,
            c.geo_far,
            c.lr};
}

ModelConfig decode_config(const std::vector<double>& v) {
    require(v.size() == 15 && v[0] == 1.0, "load_model: unsupported config record");
    ModelConfig c;
    c.image_size = int(v[1]);
    c.patch = int(v[2]);
    c.dim = int(v[3]);
    c.heads = int(v[4]);
    c.depth = int(v[5]);
    c.dropout_r = v[6];
    c.context_min = int(v[7]);
    c.context_max = int(v[8]);
    c.seed = (uint64_t(uint32_t(v[9])) << 32) | uint64_t(uint32_t(v[10]));
    c.conditioning = v[11] == 1.0 ? Conditioning::Additive : Conditioning::CameraGated;
    c.geo_near = v[12];
    c.geo_far = v[13];
    c.lr = v[14];
    c.validate();
    return c;
}

}  // namespace

void save_model(const GacModel& model, const std::string& path) {
    ParamStore copy = model.params;
    copy.add(kConfigParam, {1, 15}, encode_config(model.cfg));
    copy.save(path);
}

GacModel load_model(const std::string& path) {
    GacModel m;
    m.params.load(path);
    if (!m.params.has(kConfigParam)) throw IoError("checkpoint has no config record: " + path);
    m.cfg = decode_config(m.params.get(kConfigParam).value);
    m.params.remove(kConfigParam);
    return m;
}

// --- Depth normalization ----------------------------------------------------------

std::vector<double> normalize_depth(const DepthMap& depth, const ModelConfig& cfg) {
    double inv_near = 1.0 / cfg.geo_near, inv_far = 1.0 / cfg.geo_far;
    std::vector<double> out(depth.data.size());
    for (size_t i = 0; i < out.size(); ++i) {
        double d = depth.data[i];
        require(d > 0 && std::isfinite(d), "normalize_depth: depth must be positive");
        out[i] = std::clamp((1.0 / d - inv_far) / (inv_near - inv_far), 0.0, 1.0);
    }
    return out;
}

DepthMap denormalize_depth(const std::vector<double>& plane, int height, int width,
                           const ModelConfig& cfg) {
    require(plane.size() == size_t(height) * width, "denormalize_depth: size mismatch");
    double inv_near = 1.0 / cfg.geo_near, inv_far = 1.0 / cfg.geo_far;
    DepthMap out(height, width);
    for (size_t i = 0; i < plane.size(); ++i) {
        double g = std::clamp(plane[i], 0.0, 1.0);
        out.data[i] = 1.0 / (g * (inv_near - inv_far) + inv_far);
    }
    return out;
}

// --- Trunk construction -------------------------------------------------------------

namespace {

struct GraphParams {
    DiffTensor rgb_w, rgb_b, geo_w, geo_b, task, ray_w, query;
    std::vector<BlockTensors> blocks;
    DiffTensor final_g, final_b;
    DiffTensor head_rgb_w, head_rgb_b, head_geo_w, head_geo_b;
};

GraphParams bind_params(Graph& g, const GacModel& m, const std::string& override_name = {},
                        DiffTensor override_leaf = {}) {
    auto bind = [&](const std::string& name) {
        if (!override_name.empty() && name == override_name) {
            require(override_leaf.g == &g &&
                        override_leaf.shape() == m.params.get(name).shape,
                    "bind_params: override leaf mismatch for " + name);
            return override_leaf;
        }
        return g.param(m.params, name);
    };
    GraphParams P;
    P.rgb_w = bind("embed.rgb.w");
    P.rgb_b = bind("embed.rgb.b");
    P.geo_w = bind("embed.geo.w");
    P.geo_b = bind("embed.geo.b");
    P.task = bind("embed.task");
    P.ray_w = bind("embed.ray.w");
    P.query = bind("embed.query");
    for (int b = 0; b < m.cfg.depth; ++b) {
        std::string pre = "blk" + std::to_string(b) + ".";
        BlockTensors bt;
        bt.attn.heads = m.cfg.heads;
        bt.attn.w1 = bind(pre + "attn.w1");
        bt.attn.b1 = bind(pre + "attn.b1");
        if (m.cfg.conditioning == Conditioning::CameraGated) {
            bt.attn.w2 = bind(pre + "attn.w2");
            bt.attn.b2 = bind(pre + "attn.b2");
        }
        bt.attn.w3 = bind(pre + "attn.w3");
        bt.attn.b3 = bind(pre + "attn.b3");
        bt.norm1_g = bind(pre + "norm1.g");
        bt.norm1_b = bind(pre + "norm1.b");
        bt.norm2_g = bind(pre + "norm2.g");
        bt.norm2_b = bind(pre + "norm2.b");
        bt.mlp_w1 = bind(pre + "mlp.w1");
        bt.mlp_b1 = bind(pre + "mlp.b1");
        bt.mlp_w2 = bind(pre + "mlp.w2");
        bt.mlp_b2 = bind(pre + "mlp.b2");
        P.blocks.push_back(bt);
    }
    P.final_g = bind("final_norm.g");
    P.final_b = bind("final_norm.b");
    P.head_rgb_w = bind("head.rgb.w");
    P.head_rgb_b = bind("head.rgb.b");
    P.head_geo_w = bind("head.geo.w");
    P.head_geo_b = bind("head.geo.b");
    return P;
}

DiffTensor rows_const(Graph& g, const std::vector<std::vector<double>>& rows) {
    int n = int(rows.size()), w = int(rows[0].size());
    std::vector<double> flat;
    flat.reserve(size_t(n) * w);
    for (const auto& r : rows) {
        require(int(r.size()) == w, "rows_const: ragged rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return g.constant({n, w}, std::move(flat));
}

void apply_perm(std::vector<std::vector<double>>& rows, const std::vector<int>& perm) {
    require(perm.size() == rows.size(), "permutation size does not match token count");
    std::vector<char> seen(perm.size(), 0);
    std::vector<std::vector<double>> out(rows.size());
    for (size_t i = 0; i < perm.size(); ++i) {
        int p = perm[i];
        require(p >= 0 && size_t(p) < rows.size() && !seen[size_t(p)],
                "permutation is not a bijection");
        seen[size_t(p)] = 1;
        out[i] = std::move(rows[size_t(p)]);
    }
    rows = std::move(out);
}

struct PhSpec {
    int elem_index = -1;  // -1: placeholder sees the entire prefix
    ElemKind kind = ElemKind::ImageFrame;
    Pose pose;
};

struct TrunkOut {
    DiffTensor out;  // (M, D) after the final norm
    std::vector<int> elem_begin;
    std::vector<int> ph_begin;
    int total_rows = 0;
};

TrunkOut run_trunk(Graph& g, const GacModel& m, const GraphParams& P,
                   const InterleavedSequence& seq, const std::vector<PhSpec>& phs,
                   const ElementPermutation* permute) {
    const ModelConfig& cfg = m.cfg;
    Intrinsics K = model_intrinsics(cfg);
    int n = cfg.tokens_per_frame(), d = cfg.dim, p = cfg.patch;

    std::vector<DiffTensor> toks, rays;
    TrunkOut t;
    int row = 0;
    for (size_t ei = 0; ei < seq.elems.size(); ++ei) {
        const SeqElement& e = seq.elems[ei];
        t.elem_begin.push_back(row);
        if (e.kind == ElemKind::TaskToken) {
            require(e.token_id == kTaskGeometry || e.token_id == kTaskImage,
                    "run_trunk: unknown task token");
            toks.push_back(slice_rows(P.task, e.token_id, e.token_id + 1));
            rays.push_back(g.constant({1, d}, 0.0));
            row += 1;
            continue;
        }
        bool image_payload = e.kind == ElemKind::ImageFrame || e.image.height > 0;
        std::vector<std::vector<double>> content;
        if (image_payload) {
            require(e.image.height == cfg.image_size && e.image.width == cfg.image_size,
                    "run_trunk: frame size does not match the model");
            content = patchify(e.image.data.data(), cfg.image_size, cfg.image_size, 3, p);
        } else {
            require(e.depth.height == cfg.image_size && e.depth.width == cfg.image_size,
                    "run_trunk: depth size does not match the model");
            std::vector<double> plane = normalize_depth(e.depth, cfg);
            content = patchify(plane.data(), cfg.image_size, cfg.image_size, 1, p);
        }
        std::vector<std::vector<double>> ray_rows = ray_token_rows(e.pose, K, p);
        if (permute && permute->elem_index == int(ei)) {
            apply_perm(content, permute->perm);
            apply_perm(ray_rows, permute->perm);
        }
        DiffTensor emb = image_payload
                             ? add_rowvec(matmul(rows_const(g, content), P.rgb_w), P.rgb_b)
                             : add_rowvec(matmul(rows_const(g, content), P.geo_w), P.geo_b);
        toks.push_back(emb);
        rays.push_back(matmul(rows_const(g, ray_rows), P.ray_w));
        row += n;
    }
    int ctx_rows = row;
    for (const PhSpec& ph : phs) {
        std::vector<std::vector<double>> ray_rows = ray_token_rows(ph.pose, K, p);
        DiffTensor ray_tok = matmul(rows_const(g, ray_rows), P.ray_w);
        toks.push_back(add(P.query, ray_tok));
        rays.push_back(ray_tok);
        t.ph_begin.push_back(row);
        row += n;
    }
    t.total_rows = row;

    AttnPlan plan;
    plan.n = row;
    for (size_t ei = 0; ei < seq.elems.size(); ++ei) {
        int begin = t.elem_begin[ei];
        int end = ei + 1 < seq.elems.size() ? t.elem_begin[ei + 1] : ctx_rows;
        plan.spans.push_back({begin, end, {{0, end}}});
    }
    for (size_t pi = 0; pi < phs.size(); ++pi) {
        int begin = t.ph_begin[pi], end = begin + n;
        int limit = phs[pi].elem_index < 0 ? ctx_rows : t.elem_begin[size_t(phs[pi].elem_index)];
        require(limit > 0, "run_trunk: a placeholder has an empty prefix");
        AttnSpan span;
        span.row_begin = begin;
        span.row_end = end;
        if (limit == begin)
            span.cols = {{0, end}};
        else
            span.cols = {{0, limit}, {begin, end}};
        plan.spans.push_back(span);
    }
    plan.validate();

    DiffTensor x = concat_rows(toks);
    DiffTensor r = concat_rows(rays);
    bool gated = cfg.conditioning == Conditioning::CameraGated;
    for (int b = 0; b < cfg.depth; ++b) x = cga_block(x, r, P.blocks[size_t(b)], plan, gated);
    t.out = layer_norm(x, P.final_g, P.final_b);
    return t;
}

void unpatchify(const std::vector<double>& rows, int image_size, int patch, int channels,
                double* out) {
    int grid = image_size / patch;
    for (int py = 0; py < grid; ++py)
        for (int px = 0; px < grid; ++px) {
            const double* src = rows.data() + (size_t(py) * grid + px) * patch * patch * channels;
            for (int dy = 0; dy < patch; ++dy) {
                double* dst =
                    out + (size_t(py * patch + dy) * image_size + size_t(px) * patch) * channels;
                for (int i = 0; i < patch * channels; ++i) dst[i] = src[i];
            }
        }
}

std::vector<std::vector<double>> target_patches(const SeqElement& e, const ModelConfig& cfg) {
    if (e.kind == ElemKind::ImageFrame)
        return patchify(e.image.data.data(), cfg.image_size, cfg.image_size, 3, cfg.patch);
    std::vector<double> plane = normalize_depth(e.depth, cfg);
    return patchify(plane.data(), cfg.image_size, cfg.image_size, 1, cfg.patch);
}

}  // namespace

// --- Queries -----------------------------------------------------------------------

PredictedElement forward_step(const GacModel& model, const InterleavedSequence& prefix,
                              int task_token, const Pose& target_pose,
                              const ElementPermutation* permute) {
    model.cfg.validate();
    require(!prefix.elems.empty(), "forward_step: empty prefix");
    require(prefix.elems.back().kind != ElemKind::TaskToken,
            "forward_step: prefix must end with a frame element");
    require(task_token == kTaskGeometry || task_token == kTaskImage,
            "forward_step: unknown task token");

    InterleavedSequence seq = prefix;
    SeqElement tok;
    tok.kind = ElemKind::TaskToken;
    tok.token_id = task_token;
    tok.pose = target_pose;
    seq.elems.push_back(std::move(tok));

    Graph g;
    GraphParams P = bind_params(g, model);
    PhSpec ph{-1, task_token == kTaskImage ? ElemKind::ImageFrame : ElemKind::GeometryFrame,
              target_pose};
    TrunkOut t = run_trunk(g, model, P, seq, {ph}, permute);
    int n = model.cfg.tokens_per_frame();
    DiffTensor rows = slice_rows(t.out, t.ph_begin[0], t.ph_begin[0] + n);

    PredictedElement out;
    if (task_token == kTaskImage) {
        DiffTensor pred = add_rowvec(matmul(rows, P.head_rgb_w), P.head_rgb_b);
        out.kind = ElemKind::ImageFrame;
        out.image = RgbImage(model.cfg.image_size, model.cfg.image_size);
        unpatchify(pred.val(), model.cfg.image_size, model.cfg.patch, 3, out.image.data.data());
        for (double& v : out.image.data) v = std::clamp(v, 0.0, 1.0);
    } else {
        DiffTensor pred = add_rowvec(matmul(rows, P.head_geo_w), P.head_geo_b);
        out.kind = ElemKind::GeometryFrame;
        out.geometry.assign(size_t(model.cfg.image_size) * model.cfg.image_size, 0.0);
        unpatchify(pred.val(), model.cfg.image_size, model.cfg.patch, 1, out.geometry.data());
        for (double& v : out.geometry) v = std::clamp(v, 0.0, 1.0);
    }
    return out;
}

RgbImage predict_image(const GacModel& model, const InterleavedSequence& prefix,
                       const Pose& target_pose) {
    return forward_step(model, prefix, kTaskImage, target_pose).image;
}

std::vector<double> geometry_query(const GacModel& model, const InterleavedSequence& prefix,
                                   const Pose& target_pose) {
    return forward_step(model, prefix, kTaskGeometry, target_pose).geometry;
}

double pose_sensitivity(const GacModel& model, const InterleavedSequence& prefix, const Pose& a,
                        const Pose& b) {
    RgbImage ia = predict_image(model, prefix, a);
    RgbImage ib = predict_image(model, prefix, b);
    double acc = 0;
    for (size_t i = 0; i < ia.data.size(); ++i) acc += std::abs(ia.data[i] - ib.data[i]);
    return acc / double(ia.data.size());
}

// --- Training -------------------------------------------------------------------------

SequenceLoss sequence_loss(Graph& g, const GacModel& model, const InterleavedSequence& seq,
                           const std::string& override_name, DiffTensor override_leaf) {
    GraphParams P = bind_params(g, model, override_name, override_leaf);
    int n = model.cfg.tokens_per_frame();
    std::vector<PhSpec> phs;
    std::vector<const SeqElement*> target_elems;
    for (size_t ei = 0; ei < seq.elems.size(); ++ei) {
        const SeqElement& e = seq.elems[ei];
        if (!e.is_target) continue;
        phs.push_back({int(ei), e.kind, e.pose});
        target_elems.push_back(&e);
    }
    require(!phs.empty(), "sequence_loss: sequence has no targets");
    TrunkOut t = run_trunk(g, model, P, seq, phs, nullptr);

    SequenceLoss out;
    out.tokens = t.total_rows;
    for (size_t pi = 0; pi < phs.size(); ++pi) {
        DiffTensor rows = slice_rows(t.out, t.ph_begin[pi], t.ph_begin[pi] + n);
        bool is_image = phs[pi].kind == ElemKind::ImageFrame;
        DiffTensor pred = is_image ? add_rowvec(matmul(rows, P.head_rgb_w), P.head_rgb_b)
                                   : add_rowvec(matmul(rows, P.head_geo_w), P.head_geo_b);
        (is_image ? out.image_targets : out.geometry_targets) += 1;
        DiffTensor gt = rows_const(g, target_patches(*target_elems[pi], model.cfg));
        DiffTensor mse = scale(sum_squares(sub(pred, gt)), 1.0 / double(gt.numel()));
        out.loss = pi == 0 ? mse : add(out.loss, mse);
    }
    out.loss = scale(out.loss, 1.0 / double(phs.size()));
    return out;
}

TrainReport train(GacModel& model, const std::vector<std::vector<FrameSample>>& clips,
                  const TrainOptions& opts) {
    model.cfg.validate();
    require(!clips.empty(), "train: no clips");
    require(opts.steps > 0, "train: steps must be positive");
    for (const auto& clip : clips)
        require(clip.size() >= 2, "train: every clip needs at least two frames");
    Intrinsics K = model_intrinsics(model.cfg);
    Adam adam(AdamConfig{model.cfg.lr, 0.9, 0.999, 1e-8});
    TrainReport report;

    for (int step = 0; step < opts.steps; ++step) {
        Rng rng(substream_seed(opts.data_seed, "step", uint64_t(step)));
        const auto& clip = clips[size_t(rng.uniform_int(int(clips.size())))];
        int t_frames = int(clip.size());
        int cmax = std::min(model.cfg.context_max, t_frames - 1);
        int cmin = std::min(model.cfg.context_min, cmax);
        int cc = cmin + rng.uniform_int(cmax - cmin + 1);
        InterleavedSequence seq =
            build_sequence(clip, opts.mode, model.cfg.dropout_r, cc, rng, K);

        auto t0 = std::chrono::steady_clock::now();
        Graph g;
        SequenceLoss sl = sequence_loss(g, model, seq);

        model.params.zero_grad();
        g.backward(sl.loss);
        g.collect_param_grads(model.params);
        adam.step(model.params);
        double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        TrainStepRecord rec;
        rec.step = step;
        rec.loss = sl.loss.scalar();
        rec.seconds = seconds;
        rec.tokens = sl.tokens;
        rec.geometry_targets = sl.geometry_targets;
        rec.image_targets = sl.image_targets;
        report.steps.push_back(rec);
    }
    return report;
}

void save_train_report(const std::string& path, const TrainReport& report, bool timing) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "step,loss,seconds,tokens\n";
    char buf[128];
    for (const TrainStepRecord& r : report.steps) {
        std::snprintf(buf, sizeof(buf), "%d,%.9f,%.6f,%lld\n", r.step, r.loss,
                      timing ? r.seconds : 0.0, (long long)r.tokens);
        os << buf;
    }
    if (!os) throw IoError("write failed: " + path);
}

std::vector<std::vector<FrameSample>> make_training_clips(const Scene& scene, int num_clips,
                                                          int frames_per_clip, uint64_t seed,
                                                          const ModelConfig& cfg,
                                                          double walk_step) {
    require(num_clips > 0 && frames_per_clip >= 2, "make_training_clips: bad sizes");
    Intrinsics K = model_intrinsics(cfg);
    std::vector<std::vector<FrameSample>> clips;
    for (int c = 0; c < num_clips; ++c) {
        Rng rng(substream_seed(seed, "clip", uint64_t(c)));
        Trajectory traj = make_random_walk_trajectory(scene, frames_per_clip, rng, walk_step);
        clips.push_back(make_dataset(scene, traj, K));
    }
    return clips;
}

// --- Rollout -----------------------------------------------------------------------

namespace {

struct HistEntry {
    RgbImage image;
    DepthMap geo;  // predicted (GeometryContext) or oracle (WarpedContext)
    bool has_geo = false;
    Pose pose;
};

InterleavedSequence build_prefix(const std::vector<HistEntry>& hist, const std::vector<int>& sel,
                                 const RolloutOptions& opts, const Pose& target,
                                 const Intrinsics& K, int* geometry_elements) {
    InterleavedSequence seq;
    seq.mode = opts.mode;
    seq.context_count = int(sel.size());
    for (size_t si = 0; si < sel.size(); ++si) {
        const HistEntry& h = hist[size_t(sel[si])];
        int fi = int(si);
        SeqElement img;
        img.kind = ElemKind::ImageFrame;
        img.image = h.image;
        img.pose = h.pose;
        img.frame_index = fi;
        seq.elems.push_back(std::move(img));

        bool want_geo = opts.mode != VariantMode::NoContext && opts.emit_geometry && h.has_geo;
        if (want_geo) {
            SeqElement tok;
            tok.kind = ElemKind::TaskToken;
            tok.token_id = kTaskGeometry;
            tok.frame_index = fi;
            tok.pose = h.pose;
            seq.elems.push_back(std::move(tok));

            SeqElement geo;
            geo.kind = ElemKind::GeometryFrame;
            geo.frame_index = fi;
            if (opts.mode == VariantMode::GeometryContext) {
                geo.depth = h.geo;
                geo.pose = h.pose;
            } else {
                // Warp toward wherever the sequence goes next.
                Pose next = si + 1 < sel.size() ? hist[size_t(sel[si + 1])].pose : target;
                PointCloud cloud = unproject(h.image, h.geo, h.pose, K);
                RenderedView warped = splat_render(cloud, next, K);
                geo.image = std::move(warped.image);
                geo.pose = next;
            }
            seq.elems.push_back(std::move(geo));
            ++*geometry_elements;
        }
        if (si + 1 < sel.size()) {
            SeqElement tok;
            tok.kind = ElemKind::TaskToken;
            tok.token_id = kTaskImage;
            tok.frame_index = fi + 1;
            tok.pose = hist[size_t(sel[si + 1])].pose;
            seq.elems.push_back(std::move(tok));
        }
    }
    return seq;
}

}  // namespace

RolloutResult rollout(const GacModel& model, const RgbImage& reference, const Trajectory& traj,
                      const RolloutOptions& opts) {
    model.cfg.validate();
    require(traj.size() >= 2, "rollout: trajectory needs at least two poses");
    require(reference.height == model.cfg.image_size && reference.width == model.cfg.image_size,
            "rollout: reference size does not match the model");
    require(opts.context_k >= 1, "rollout: context_k must be positive");
    bool emit = opts.emit_geometry && opts.mode != VariantMode::NoContext;
    if (opts.mode == VariantMode::WarpedContext) {
        require(opts.oracle_depths && opts.oracle_depths->size() == traj.size(),
                "rollout: warped context needs a depth map per pose");
    }
    Intrinsics K = model_intrinsics(model.cfg);
    auto t0 = std::chrono::steady_clock::now();

    RolloutResult result;
    std::vector<HistEntry> hist;
    hist.push_back({reference, DepthMap(), false, traj[0]});

    auto attach_geometry = [&](int idx) {
        if (!emit) return;
        if (opts.mode == VariantMode::WarpedContext) {
            hist[size_t(idx)].geo = (*opts.oracle_depths)[size_t(idx)];
            hist[size_t(idx)].has_geo = true;
            return;
        }
        // Query the model for this frame's geometry, conditioned on context
        // that includes the frame itself.
        std::vector<Pose> poses;
        for (const HistEntry& h : hist) poses.push_back(h.pose);
        std::vector<int> sel = select_context(poses, hist[size_t(idx)].pose, opts.context_k);
        InterleavedSequence prefix =
            build_prefix(hist, sel, opts, hist[size_t(idx)].pose, K, &result.geometry_elements);
        std::vector<double> plane = geometry_query(model, prefix, hist[size_t(idx)].pose);
        hist[size_t(idx)].geo =
            denormalize_depth(plane, model.cfg.image_size, model.cfg.image_size, model.cfg);
        hist[size_t(idx)].has_geo = true;
        result.geometries.push_back(hist[size_t(idx)].geo);
    };

    attach_geometry(0);
    for (size_t t = 1; t < traj.size(); ++t) {
        std::vector<Pose> poses;
        for (const HistEntry& h : hist) poses.push_back(h.pose);
        std::vector<int> sel = select_context(poses, traj[t], opts.context_k);
        InterleavedSequence prefix =
            build_prefix(hist, sel, opts, traj[t], K, &result.geometry_elements);
        RgbImage img = predict_image(model, prefix, traj[t]);
        result.frames.push_back(img);
        hist.push_back({std::move(img), DepthMap(), false, traj[t]});
        attach_geometry(int(hist.size()) - 1);
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

}  // namespace gac
