// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "gac/camgeom.hpp"
#include "gac/image.hpp"

namespace gac {

// Peak signal-to-noise ratio in dB over all channels, peak value 1.0.
// Identical images (MSE 0) report the cap of 99 dB.
double psnr(const RgbImage& a, const RgbImage& b);

// Mean SSIM over valid 11x11 windows (Gaussian weights, sigma 1.5, K1=0.01,
// K2=0.03, dynamic range 1.0), averaged over the three channels. Images must
// be at least 11x11.
double ssim(const RgbImage& a, const RgbImage& b);

// Geodesic rotation distance in radians: arccos((tr(Ra^T Rb) - 1) / 2).
double rotation_error(const Pose& a, const Pose& b);

// Translation residual after similarity alignment: both translation sets are
// mean-centered, the predicted set is scaled by the least-squares factor onto
// the reference, and the mean residual norm is reported relative to the mean
// reference norm. Zero for predictions that differ only by a global shift and
// positive scale. Returns 0 when the reference has no spread.
double translation_error(const std::vector<Vec3>& predicted, const std::vector<Vec3>& reference);

// Ordinary least squares slope of values against their indices 0..n-1,
// e.g. dB per step for a PSNR curve.
double drift_curve(const std::vector<double>& values);

struct FrameMetrics {
    int frame = 0;
    double psnr_db = 0;
    double ssim = 0;
};

struct MetricReport {
    std::vector<FrameMetrics> frames;
    double mean_psnr_db = 0;
    double mean_ssim = 0;
};

MetricReport compare_frames(const std::vector<RgbImage>& predicted,
                            const std::vector<RgbImage>& reference);

// CSV: header frame,psnr_db,ssim; one row per frame; final row "mean,...".
void save_metric_report(const std::string& path, const MetricReport& report);

// CSV: header r_err_rad,t_err; one row per pose pair plus the aggregate
// translation error in the final row's t_err column.
void save_pose_report(const std::string& path, const std::vector<double>& rotation_errors,
                      double translation_err);

}  // namespace gac
