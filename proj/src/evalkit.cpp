// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#include "gac/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace gac {

namespace {

void check_same_size(const RgbImage& a, const RgbImage& b, const char* op) {
    require(a.height == b.height && a.width == b.width && a.height > 0,
            std::string(op) + ": image size mismatch");
}

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2 with L = 1
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kWin> gaussian_kernel() {
    std::array<double, kWin> g{};
    double sum = 0;
    for (int i = 0; i < kWin; ++i) {
        double d = i - (kWin - 1) / 2.0;
        g[size_t(i)] = std::exp(-d * d / (2.0 * kSigma * kSigma));
        sum += g[size_t(i)];
    }
    for (double& v : g) v /= sum;
    return g;
}

// Valid-region separable Gaussian blur: (H, W) -> (H-10, W-10).
std::vector<double> blur_valid(const std::vector<double>& plane, int h, int w) {
    static const std::array<double, kWin> g = gaussian_kernel();
    int wv = w - kWin + 1, hv = h - kWin + 1;
    std::vector<double> tmp(size_t(h) * wv);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < wv; ++x) {
            double s = 0;
            const double* row = plane.data() + size_t(y) * w + x;
            for (int i = 0; i < kWin; ++i) s += g[size_t(i)] * row[i];
            tmp[size_t(y) * wv + x] = s;
        }
    std::vector<double> out(size_t(hv) * wv);
    for (int y = 0; y < hv; ++y)
        for (int x = 0; x < wv; ++x) {
            double s = 0;
            for (int i = 0; i < kWin; ++i) s += g[size_t(i)] * tmp[size_t(y + i) * wv + x];
            out[size_t(y) * wv + x] = s;
        }
    return out;
}

}  // namespace

double psnr(const RgbImage& a, const RgbImage& b) {
    check_same_size(a, b, "psnr");
    double mse = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= double(a.data.size());
    if (mse <= 0.0) return 99.0;
    double v = 10.0 * std::log10(1.0 / mse);
    return std::min(v, 99.0);
}

double ssim(const RgbImage& a, const RgbImage& b) {
    check_same_size(a, b, "ssim");
    require(a.height >= kWin && a.width >= kWin, "ssim: images smaller than the 11x11 window");
    int h = a.height, w = a.width;
    int hv = h - kWin + 1, wv = w - kWin + 1;
    std::vector<double> pa(size_t(h) * w), pb(size_t(h) * w), paa(size_t(h) * w),
        pbb(size_t(h) * w), pab(size_t(h) * w);
    double total = 0;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double va = a.at(y, x, c), vb = b.at(y, x, c);
                size_t i = size_t(y) * w + x;
                pa[i] = va;
                pb[i] = vb;
                paa[i] = va * va;
                pbb[i] = vb * vb;
                pab[i] = va * vb;
            }
        std::vector<double> mu_a = blur_valid(pa, h, w);
        std::vector<double> mu_b = blur_valid(pb, h, w);
        std::vector<double> e_aa = blur_valid(paa, h, w);
        std::vector<double> e_bb = blur_valid(pbb, h, w);
        std::vector<double> e_ab = blur_valid(pab, h, w);
        double acc = 0;
        for (size_t i = 0; i < mu_a.size(); ++i) {
            double ma = mu_a[i], mb = mu_b[i];
            double va = e_aa[i] - ma * ma;
            double vb = e_bb[i] - mb * mb;
            double cov = e_ab[i] - ma * mb;
            acc += ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
                   ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
        }
        total += acc / double(size_t(hv) * wv);
    }
    return total / 3.0;
}

double rotation_error(const Pose& a, const Pose& b) {
    require(is_rotation(a.R) && is_rotation(b.R), "rotation_error: non-orthonormal rotation");
    if ((a.R - b.R).norm() == 0.0) return 0.0;  // identical rotations: exactly zero
    double tr = (a.R.transpose() * b.R).trace();
    double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
}

double translation_error(const std::vector<Vec3>& predicted, const std::vector<Vec3>& reference) {
    require(predicted.size() == reference.size() && !predicted.empty(),
            "translation_error: size mismatch or empty input");
    size_t n = predicted.size();
    Vec3 pm = Vec3::Zero(), gm = Vec3::Zero();
    for (size_t i = 0; i < n; ++i) {
        pm += predicted[i];
        gm += reference[i];
    }
    pm /= double(n);
    gm /= double(n);
    double dot = 0, pp = 0, gnorm = 0;
    for (size_t i = 0; i < n; ++i) {
        Vec3 p = predicted[i] - pm, g = reference[i] - gm;
        dot += p.dot(g);
        pp += p.squaredNorm();
        gnorm += g.norm();
    }
    gnorm /= double(n);
    if (gnorm < 1e-15) return 0.0;  // reference has no spread: nothing to align against
    double s = pp > 0 ? dot / pp : 0.0;
    double resid = 0;
    for (size_t i = 0; i < n; ++i)
        resid += (s * (predicted[i] - pm) - (reference[i] - gm)).norm();
    resid /= double(n);
    return resid / gnorm;
}

double drift_curve(const std::vector<double>& values) {
    size_t n = values.size();
    require(n >= 2, "drift_curve: need at least two values");
    double xm = double(n - 1) / 2.0;
    double ym = 0;
    for (double v : values) ym += v;
    ym /= double(n);
    double num = 0, den = 0;
    for (size_t i = 0; i < n; ++i) {
        double dx = double(i) - xm;
        num += dx * (values[i] - ym);
        den += dx * dx;
    }
    return num / den;
}

MetricReport compare_frames(const std::vector<RgbImage>& predicted,
                            const std::vector<RgbImage>& reference) {
    require(predicted.size() == reference.size() && !predicted.empty(),
            "compare_frames: size mismatch or empty input");
    MetricReport report;
    for (size_t i = 0; i < predicted.size(); ++i) {
        FrameMetrics m;
        m.frame = int(i);
        m.psnr_db = psnr(predicted[i], reference[i]);
        m.ssim = ssim(predicted[i], reference[i]);
        report.frames.push_back(m);
        report.mean_psnr_db += m.psnr_db;
        report.mean_ssim += m.ssim;
    }
    report.mean_psnr_db /= double(predicted.size());
    report.mean_ssim /= double(predicted.size());
    return report;
}

void save_metric_report(const std::string& path, const MetricReport& report) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "frame,psnr_db,ssim\n";
    char buf[96];
    for (const FrameMetrics& m : report.frames) {
        std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f\n", m.frame, m.psnr_db, m.ssim);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "mean,%.6f,%.6f\n", report.mean_psnr_db, report.mean_ssim);
    os << buf;
    if (!os) throw IoError("write failed: " + path);
}

void save_pose_report(const std::string& path, const std::vector<double>& rotation_errors,
                      double translation_err) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "r_err_rad,t_err\n";
    char buf[96];
    double mean_r = 0;
    for (double r : rotation_errors) {
        std::snprintf(buf, sizeof(buf), "%.9f,\n", r);
        os << buf;
        mean_r += r;
    }
    if (!rotation_errors.empty()) mean_r /= double(rotation_errors.size());
    std::snprintf(buf, sizeof(buf), "%.9f,%.9f\n", mean_r, translation_err);
    os << buf;
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace gac
