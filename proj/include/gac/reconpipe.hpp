// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gac/synthworld.hpp"

namespace gac {

// Classical reconstruct -> splat -> inpaint loop. Deliberately
// non-differentiable: hard z-buffer tests and hole masks make its per-step
// error compound with no gradient path to correct it; run_baseline measures
// that drift.

struct PointXyzRgb {
    Vec3 xyz = Vec3::Zero();
    std::array<double, 3> rgb{0, 0, 0};
};

struct PointCloud {
    std::vector<PointXyzRgb> points;
};

// Lifts every pixel to a world-space point: the pixel ray direction
// ((u+0.5-cx)/fx, (v+0.5-cy)/fy, 1) scaled by its camera-z depth, then taken
// to world coordinates. Pixels are visited row-major, so point order is
// deterministic. Depths must be positive and finite.
PointCloud unproject(const RgbImage& image, const DepthMap& depth, const Pose& pose,
                     const Intrinsics& K);

struct RenderedView {
    RgbImage image;              // holes stay black
    std::vector<uint8_t> mask;   // 1 where a point landed
    std::vector<double> zbuf;    // camera-z of the winning point; +inf at holes
    double hole_fraction = 0;

    bool covered(int y, int x) const { return mask[size_t(y) * image.width + x] != 0; }
};

// Nearest-point splat with a hard z-buffer. Each point projects to the pixel
// containing its continuous image position (floor); a point wins only with a
// strictly smaller depth, so among equal depths the earliest point in cloud
// order keeps the pixel. Points with camera-z <= 1e-6 are discarded.
RenderedView splat_render(const PointCloud& cloud, const Pose& pose, const Intrinsics& K);

// Iterative hole fill: each round, every hole pixel with at least one covered
// 8-neighbor takes the average of its covered neighbors, all updates computed
// from the round-start state. Terminates in at most height+width rounds; an
// all-hole view becomes mid-gray 0.5.
RgbImage inpaint_fill(const RenderedView& view);

struct InpaintResult {
    RgbImage image;
    int rounds = 0;
};
InpaintResult inpaint_fill_ex(const RenderedView& view);

// Simulated depth estimation error: d' = max(d * (1 + m) + b, 1e-3) with
// m ~ N(0, mult_sigma), b ~ N(0, bias_sigma). Noise is counter-based on the
// pixel index, so a given (seed, pixel) pair always gets the same deviate.
DepthMap perturb_depth(const DepthMap& depth, double mult_sigma, double bias_sigma,
                       uint64_t seed);

struct NoiseSpec {
    double mult_sigma = 0.0;
    double bias_sigma = 0.0;
};

struct DriftRecord {
    int step = 0;
    double psnr_db = 0;
    double ssim = 0;
    double hole_fraction = 0;
};

struct DriftReport {
    std::vector<DriftRecord> records;  // steps 1..T-1
};

struct BaselineOptions {
    NoiseSpec noise;
    uint64_t noise_seed = 0;
    bool rebuild_each_step = false;     // drop accumulated points, keep only the newest frame
    size_t cloud_capacity = 2'000'000;  // accumulated points; oldest evicted first
    std::vector<RgbImage>* dump_rendered = nullptr;   // optional per-step raw splats
    std::vector<RgbImage>* dump_inpainted = nullptr;  // optional per-step outputs
};

// Runs the full pipeline along a trajectory: frame 0 is reconstructed from
// ground truth, every later frame is splatted from the accumulated cloud,
// inpainted, scored against the true render, and fed back into the cloud with
// freshly perturbed depth. Returns one record per generated step.
DriftReport run_baseline(const Scene& scene, const Trajectory& traj, const Intrinsics& K,
                         const BaselineOptions& options);

// CSV: header step,psnr_db,ssim,hole_fraction.
void save_drift_report(const std::string& path, const DriftReport& report);

}  // namespace gac
