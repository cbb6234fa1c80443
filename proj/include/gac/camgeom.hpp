// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "gac/common.hpp"

namespace gac {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;

struct Intrinsics {
    int width = 0;
    int height = 0;
    double fx = 0, fy = 0;
    double cx = 0, cy = 0;

    void validate() const {
        require(width > 0 && height > 0, "Intrinsics: image size must be positive");
        require(fx > 0 && fy > 0, "Intrinsics: focal lengths must be positive");
    }
};

// Camera-to-world transform: X_world = R * X_cam + t. The camera looks along
// its local +z axis; pixel x grows with camera x, pixel y with camera y.
struct Pose {
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    static Pose identity() { return {}; }
};

using Trajectory = std::vector<Pose>;

bool is_rotation(const Mat3& R, double tol = 1e-9);

inline Pose compose(const Pose& a, const Pose& b) {
    return {a.R * b.R, a.R * b.t + a.t};
}

inline Pose inverse_pose(const Pose& a) {
    Mat3 rt = a.R.transpose();
    return {rt, -(rt * a.t)};
}

// Pose of b expressed in a's camera frame: compose(a, relative_pose(a, b)) == b.
Pose relative_pose(const Pose& a, const Pose& b);

Mat3 rotation_axis_angle(const Vec3& axis, double angle);

// Unit ray through the center of pixel (u, v), in camera coordinates before
// normalization: ((u+0.5-cx)/fx, (v+0.5-cy)/fy, 1).
inline Vec3 pixel_dir_cam(const Intrinsics& K, int u, int v) {
    return {(u + 0.5 - K.cx) / K.fx, (v + 0.5 - K.cy) / K.fy, 1.0};
}

// Per-pixel ray encoding: 6 channels (unit direction d, moment m = t x d),
// interleaved row-major. For every pixel |d| = 1 and m . d = 0.
struct PluckerRayMap {
    int height = 0;
    int width = 0;
    std::vector<double> data;  // size height * width * 6

    double at(int y, int x, int c) const { return data[(size_t(y) * width + x) * 6 + c]; }
};

PluckerRayMap plucker_ray_map(const Pose& pose, const Intrinsics& K);

// Cuts an H x W x C interleaved buffer into non-overlapping p x p patches and
// flattens each to one row of p*p*C values (pixel-major, channel-fastest).
// Rows are ordered row-major over the patch grid. H and W must be divisible
// by p.
std::vector<std::vector<double>> patchify(const double* data, int height, int width, int channels,
                                          int patch);

// Ray tokens for a pose: patchified Plucker map, one row of 6*p*p values per
// patch.
std::vector<std::vector<double>> ray_token_rows(const Pose& pose, const Intrinsics& K, int patch);

// Palindrome pass over a trajectory: the input followed by its reverse, so a
// length-T input yields 2T poses and the final pose equals the first input
// pose bit-for-bit.
Trajectory forth_and_back(const Trajectory& traj);

// CSV with header r00,...,r22,tx,ty,tz (rotation row-major, then translation),
// one row per pose. Values are written with enough digits to round-trip
// doubles exactly.
void save_trajectory(const std::string& path, const Trajectory& traj);
Trajectory load_trajectory(const std::string& path);

}  // namespace gac
