// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#include "gac/camgeom.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace gac {

bool is_rotation(const Mat3& R, double tol) {
    Mat3 err = R.transpose() * R - Mat3::Identity();
    return err.cwiseAbs().maxCoeff() <= tol && R.determinant() > 0.0;
}

Pose relative_pose(const Pose& a, const Pose& b) {
    require(is_rotation(a.R) && is_rotation(b.R), "relative_pose: rotations must be orthonormal");
    return compose(inverse_pose(a), b);
}

Mat3 rotation_axis_angle(const Vec3& axis, double angle) {
    double n = axis.norm();
    require(n > 0.0, "rotation_axis_angle: zero axis");
    return Eigen::AngleAxisd(angle, axis / n).toRotationMatrix();
}

PluckerRayMap plucker_ray_map(const Pose& pose, const Intrinsics& K) {
    K.validate();
    require(is_rotation(pose.R), "plucker_ray_map: rotation must be orthonormal");
    PluckerRayMap map;
    map.height = K.height;
    map.width = K.width;
    map.data.resize(size_t(K.height) * K.width * 6);
    for (int v = 0; v < K.height; ++v) {
        for (int u = 0; u < K.width; ++u) {
            Vec3 d = pose.R * pixel_dir_cam(K, u, v);
            d /= d.norm();
            Vec3 m = pose.t.cross(d);
            double* out = &map.data[(size_t(v) * K.width + u) * 6];
            out[0] = d.x();
            out[1] = d.y();
            out[2] = d.z();
            out[3] = m.x();
            out[4] = m.y();
            out[5] = m.z();
        }
    }
    return map;
}

std::vector<std::vector<double>> patchify(const double* data, int height, int width, int channels,
                                          int patch) {
    require(patch > 0 && height % patch == 0 && width % patch == 0,
            "patchify: image size must be divisible by patch size");
    int gy = height / patch, gx = width / patch;
    std::vector<std::vector<double>> rows;
    rows.reserve(size_t(gy) * gx);
    for (int py = 0; py < gy; ++py) {
        for (int px = 0; px < gx; ++px) {
            std::vector<double> row(size_t(patch) * patch * channels);
            size_t k = 0;
            for (int dy = 0; dy < patch; ++dy) {
                const double* src =
                    data + (size_t(py * patch + dy) * width + size_t(px) * patch) * channels;
                for (int i = 0; i < patch * channels; ++i) row[k++] = src[i];
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::vector<std::vector<double>> ray_token_rows(const Pose& pose, const Intrinsics& K, int patch) {
    PluckerRayMap map = plucker_ray_map(pose, K);
    return patchify(map.data.data(), map.height, map.width, 6, patch);
}

Trajectory forth_and_back(const Trajectory& traj) {
    require(!traj.empty(), "forth_and_back: empty trajectory");
    Trajectory out = traj;
    out.insert(out.end(), traj.rbegin(), traj.rend());
    return out;
}

void save_trajectory(const std::string& path, const Trajectory& traj) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n";
    char buf[32];
    for (const Pose& p : traj) {
        double vals[12];
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) vals[r * 3 + c] = p.R(r, c);
        for (int i = 0; i < 3; ++i) vals[9 + i] = p.t(i);
        for (int i = 0; i < 12; ++i) {
            std::snprintf(buf, sizeof(buf), "%.17g", vals[i]);
            os << buf << (i == 11 ? '\n' : ',');
        }
    }
    if (!os) throw IoError("write failed: " + path);
}

Trajectory load_trajectory(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw IoError("empty trajectory file: " + path);
    if (line.rfind("r00,", 0) != 0) throw IoError("bad trajectory header: " + path);
    Trajectory traj;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        double vals[12];
        std::string cell;
        for (int i = 0; i < 12; ++i) {
            if (!std::getline(ss, cell, ','))
                throw IoError("short trajectory row: " + path);
            vals[i] = std::strtod(cell.c_str(), nullptr);
        }
        Pose p;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) p.R(r, c) = vals[r * 3 + c];
        for (int i = 0; i < 3; ++i) p.t(i) = vals[9 + i];
        if (!is_rotation(p.R, 1e-6)) throw IoError("non-orthonormal rotation in: " + path);
        traj.push_back(p);
    }
    return traj;
}

}  // namespace gac
