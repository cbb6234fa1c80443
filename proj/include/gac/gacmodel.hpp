// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "gac/cga.hpp"
#include "gac/interleave.hpp"
#include "gac/tensor.hpp"

namespace gac {

enum class Conditioning { CameraGated, Additive };

struct ModelConfig {
    int image_size = 64;  // square frames
    int patch = 8;
    int dim = 64;
    int heads = 4;
    int depth = 4;
    double dropout_r = 0.5;  // geometry slot dropout during training
    int context_min = 1;     // sampled context views per training sequence
    int context_max = 4;
    uint64_t seed = 0;
    Conditioning conditioning = Conditioning::CameraGated;
    double geo_near = 0.25;  // depth range mapped onto [0,1] inverse depth
    double geo_far = 8.0;
    double lr = 1e-3;

    int grid() const { return image_size / patch; }
    int tokens_per_frame() const { return grid() * grid(); }
    void validate() const;
};

// The canonical pinhole for a model: fx = fy = image_size, principal point at
// the image center.
Intrinsics model_intrinsics(const ModelConfig& cfg);

struct GacModel {
    ModelConfig cfg;
    ParamStore params;
};

// Deterministic initialization: every parameter draws from its own named
// sub-stream of cfg.seed, so two configs sharing a parameter initialize it
// identically. The camera-gate layers start at zero.
GacModel make_model(const ModelConfig& cfg);

// Checkpoint = parameter store plus the config encoded alongside it.
void save_model(const GacModel& model, const std::string& path);
GacModel load_model(const std::string& path);

// Depth <-> normalized inverse depth in [0,1] over [geo_near, geo_far].
std::vector<double> normalize_depth(const DepthMap& depth, const ModelConfig& cfg);
DepthMap denormalize_depth(const std::vector<double>& plane, int height, int width,
                           const ModelConfig& cfg);

struct PredictedElement {
    ElemKind kind = ElemKind::ImageFrame;
    RgbImage image;                // for image predictions, clamped to [0,1]
    std::vector<double> geometry;  // for geometry predictions: H*W plane in [0,1]
};

// Verification seam: reorder the tokens (and their rays) of one context
// element before the trunk runs. Predictions must not depend on intra-element
// token order; tests exercise exactly that.
struct ElementPermutation {
    int elem_index = -1;
    std::vector<int> perm;
};

// One autoregressive query: appends the task token and a block of pose-tagged
// placeholder tokens to the encoded prefix, runs the trunk, and decodes the
// placeholder rows. The prefix must end with a frame element.
PredictedElement forward_step(const GacModel& model, const InterleavedSequence& prefix,
                              int task_token, const Pose& target_pose,
                              const ElementPermutation* permute = nullptr);

RgbImage predict_image(const GacModel& model, const InterleavedSequence& prefix,
                       const Pose& target_pose);
// Geometry of an arbitrary viewpoint given the prefix (the <G> query path).
std::vector<double> geometry_query(const GacModel& model, const InterleavedSequence& prefix,
                                   const Pose& target_pose);

// Mean absolute prediction difference between two target poses; nonzero means
// the pose conditioning actually reaches the output.
double pose_sensitivity(const GacModel& model, const InterleavedSequence& prefix, const Pose& a,
                        const Pose& b);

struct TrainStepRecord {
    int step = 0;
    double loss = 0;
    double seconds = 0;
    int64_t tokens = 0;  // trunk rows in this step's combined graph
    int geometry_targets = 0;
    int image_targets = 0;
};

struct TrainReport {
    std::vector<TrainStepRecord> steps;
};

// CSV: header step,loss,seconds,tokens. With timing=false the seconds column
// is written as 0.000000 so equal runs produce byte-identical files.
void save_train_report(const std::string& path, const TrainReport& report, bool timing);

struct TrainOptions {
    int steps = 2000;
    VariantMode mode = VariantMode::GeometryContext;
    uint64_t data_seed = 0;  // clip choice, context count, geometry dropout
};

struct SequenceLoss {
    DiffTensor loss;  // mean over targets of per-target mean squared error
    int64_t tokens = 0;
    int geometry_targets = 0;
    int image_targets = 0;
};

// Teacher-forced loss for one sequence on an existing graph: every target gets
// a placeholder block that attends to exactly the prefix preceding it, so the
// combined graph reproduces per-target queries bit-for-bit while sharing the
// encoder pass. When override_name is non-empty, that parameter is read from
// override_leaf instead of the store (the gradient-check seam).
SequenceLoss sequence_loss(Graph& g, const GacModel& model, const InterleavedSequence& seq,
                           const std::string& override_name = {},
                           DiffTensor override_leaf = {});

// Teacher-forced training. Every step samples a clip and a context count,
// builds one interleaved sequence, and supervises all its targets in a single
// combined graph: each target gets a placeholder block that sees exactly the
// prefix preceding it, which reproduces per-target queries bit-for-bit while
// sharing the encoder pass.
TrainReport train(GacModel& model, const std::vector<std::vector<FrameSample>>& clips,
                  const TrainOptions& opts);

// Random-walk clips rendered at the model's intrinsics.
std::vector<std::vector<FrameSample>> make_training_clips(const Scene& scene, int num_clips,
                                                          int frames_per_clip, uint64_t seed,
                                                          const ModelConfig& cfg,
                                                          double walk_step = 0.12);

struct RolloutOptions {
    int context_k = 4;
    bool emit_geometry = true;  // interleave predicted geometry into the context
    VariantMode mode = VariantMode::GeometryContext;
    // WarpedContext only: true depth maps for the visited poses, used to build
    // the warps (that arm's context comes from the classical pipeline).
    const std::vector<DepthMap>* oracle_depths = nullptr;
};

struct RolloutResult {
    std::vector<RgbImage> frames;      // predictions for traj[1..]
    std::vector<DepthMap> geometries;  // predicted geometry per visited pose, if emitted
    int geometry_elements = 0;         // geometry context slots built overall
    double seconds = 0;
};

// Autoregressive generation along a trajectory from a single reference image
// at traj[0]. Context frames for each step are chosen by select_context.
RolloutResult rollout(const GacModel& model, const RgbImage& reference, const Trajectory& traj,
                      const RolloutOptions& opts);

}  // namespace gac
