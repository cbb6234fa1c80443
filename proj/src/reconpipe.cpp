// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#include "gac/reconpipe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "gac/evalkit.hpp"

namespace gac {

PointCloud unproject(const RgbImage& image, const DepthMap& depth, const Pose& pose,
                     const Intrinsics& K) {
    K.validate();
    require(image.height == K.height && image.width == K.width, "unproject: image size mismatch");
    require(depth.height == K.height && depth.width == K.width, "unproject: depth size mismatch");
    require(is_rotation(pose.R), "unproject: rotation must be orthonormal");
    PointCloud cloud;
    cloud.points.reserve(size_t(K.height) * K.width);
    for (int v = 0; v < K.height; ++v) {
        for (int u = 0; u < K.width; ++u) {
            double d = depth.at(v, u);
            require(d > 0 && std::isfinite(d), "unproject: depth must be positive and finite");
            Vec3 x_cam = d * pixel_dir_cam(K, u, v);
            PointXyzRgb p;
            p.xyz = pose.R * x_cam + pose.t;
            for (int c = 0; c < 3; ++c) p.rgb[size_t(c)] = image.at(v, u, c);
            cloud.points.push_back(p);
        }
    }
    return cloud;
}

RenderedView splat_render(const PointCloud& cloud, const Pose& pose, const Intrinsics& K) {
    K.validate();
    require(is_rotation(pose.R), "splat_render: rotation must be orthonormal");
    RenderedView view;
    view.image = RgbImage(K.height, K.width, 0.0);
    view.mask.assign(size_t(K.height) * K.width, 0);
    view.zbuf.assign(size_t(K.height) * K.width, std::numeric_limits<double>::infinity());
    Mat3 rt = pose.R.transpose();
    for (const PointXyzRgb& p : cloud.points) {
        Vec3 x_cam = rt * (p.xyz - pose.t);
        double z = x_cam.z();
        if (z <= 1e-6) continue;
        double u = K.fx * x_cam.x() / z + K.cx;
        double v = K.fy * x_cam.y() / z + K.cy;
        int ui = int(std::floor(u));
        int vi = int(std::floor(v));
        if (ui < 0 || ui >= K.width || vi < 0 || vi >= K.height) continue;
        size_t idx = size_t(vi) * K.width + ui;
        if (z < view.zbuf[idx]) {
            view.zbuf[idx] = z;
            view.mask[idx] = 1;
            for (int c = 0; c < 3; ++c) view.image.at(vi, ui, c) = p.rgb[size_t(c)];
        }
    }
    size_t holes = 0;
    for (uint8_t m : view.mask)
        if (!m) ++holes;
    view.hole_fraction = double(holes) / double(view.mask.size());
    return view;
}

InpaintResult inpaint_fill_ex(const RenderedView& view) {
    int h = view.image.height, w = view.image.width;
    InpaintResult result;
    result.image = view.image;
    std::vector<uint8_t> filled = view.mask;

    size_t holes = 0;
    for (uint8_t m : filled)
        if (!m) ++holes;
    if (holes == size_t(h) * w) {
        // Nothing to propagate from: settle on mid-gray.
        std::fill(result.image.data.begin(), result.image.data.end(), 0.5);
        return result;
    }

    std::vector<uint8_t> next_filled(filled.size());
    RgbImage next = result.image;
    int max_rounds = h + w;
    while (holes > 0) {
        require(result.rounds < max_rounds, "inpaint_fill: failed to converge");
        next_filled = filled;
        next = result.image;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (filled[size_t(y) * w + x]) continue;
                double acc[3] = {0, 0, 0};
                int count = 0;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        int ny = y + dy, nx = x + dx;
                        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                        if (!filled[size_t(ny) * w + nx]) continue;
                        for (int c = 0; c < 3; ++c) acc[c] += result.image.at(ny, nx, c);
                        ++count;
                    }
                }
                if (count > 0) {
                    for (int c = 0; c < 3; ++c) next.at(y, x, c) = acc[c] / count;
                    next_filled[size_t(y) * w + x] = 1;
                    --holes;
                }
            }
        }
        filled.swap(next_filled);
        result.image = next;
        ++result.rounds;
    }
    return result;
}

RgbImage inpaint_fill(const RenderedView& view) { return inpaint_fill_ex(view).image; }

DepthMap perturb_depth(const DepthMap& depth, double mult_sigma, double bias_sigma,
                       uint64_t seed) {
    require(mult_sigma >= 0 && bias_sigma >= 0, "perturb_depth: sigmas must be non-negative");
    DepthMap out = depth;
    for (size_t i = 0; i < out.data.size(); ++i) {
        double m = mult_sigma > 0 ? mult_sigma * normal_at(seed, 2 * i) : 0.0;
        double b = bias_sigma > 0 ? bias_sigma * normal_at(seed, 2 * i + 1) : 0.0;
        out.data[i] = std::max(out.data[i] * (1.0 + m) + b, 1e-3);
    }
    return out;
}

DriftReport run_baseline(const Scene& scene, const Trajectory& traj, const Intrinsics& K,
                         const BaselineOptions& options) {
    require(!traj.empty(), "run_baseline: empty trajectory");
    require(options.cloud_capacity > 0, "run_baseline: cloud capacity must be positive");
    DriftReport report;
    if (traj.size() == 1) return report;  // a single frame generates nothing

    auto push_frame = [&](PointCloud& cloud, const RgbImage& image, const DepthMap& gt_depth,
                          const Pose& pose, int frame) {
        DepthMap est = perturb_depth(gt_depth, options.noise.mult_sigma, options.noise.bias_sigma,
                                     substream_seed(options.noise_seed, "depth", uint64_t(frame)));
        PointCloud fresh = unproject(image, est, pose, K);
        if (options.rebuild_each_step) cloud.points.clear();
        cloud.points.insert(cloud.points.end(), fresh.points.begin(), fresh.points.end());
        if (cloud.points.size() > options.cloud_capacity)
            cloud.points.erase(cloud.points.begin(),
                               cloud.points.begin() +
                                   long(cloud.points.size() - options.cloud_capacity));
    };

    RenderResult first = render_view(scene, traj[0], K);
    PointCloud cloud;
    push_frame(cloud, first.image, first.depth, traj[0], 0);

    for (size_t i = 1; i < traj.size(); ++i) {
        RenderedView view = splat_render(cloud, traj[i], K);
        RgbImage generated = inpaint_fill(view);
        RenderResult gt = render_view(scene, traj[i], K);
        DriftRecord rec;
        rec.step = int(i);
        rec.psnr_db = psnr(generated, gt.image);
        rec.ssim = ssim(generated, gt.image);
        rec.hole_fraction = view.hole_fraction;
        report.records.push_back(rec);
        if (options.dump_rendered) options.dump_rendered->push_back(view.image);
        if (options.dump_inpainted) options.dump_inpainted->push_back(generated);
        // The generated content, not the ground truth, feeds the next step.
        push_frame(cloud, generated, gt.depth, traj[i], int(i));
    }
    return report;
}

void save_drift_report(const std::string& path, const DriftReport& report) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "step,psnr_db,ssim,hole_fraction\n";
    char buf[128];
    for (const DriftRecord& r : report.records) {
        std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f\n", r.step, r.psnr_db, r.ssim,
                      r.hole_fraction);
        os << buf;
    }
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace gac
