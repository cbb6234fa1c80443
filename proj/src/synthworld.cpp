// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#include "gac/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gac {

namespace {

bool boxes_overlap(const AxisBox& a, const AxisBox& b, double pad) {
    for (int i = 0; i < 3; ++i)
        if (a.hi(i) + pad < b.lo(i) || b.hi(i) + pad < a.lo(i)) return false;
    return true;
}

double box_min_dist_to_origin(const AxisBox& b) {
    double d2 = 0;
    for (int i = 0; i < 3; ++i) {
        double d = std::max({b.lo(i), -b.hi(i), 0.0});
        d2 += d * d;
    }
    return std::sqrt(d2);
}

// Lattice hash for value noise, keyed by scene seed and object id.
double lattice_value(uint64_t seed, int object, int64_t ix, int64_t iy, int64_t iz) {
    uint64_t s = seed ^ 0x51ed2701a3c59d1bull;
    s = splitmix64(s) ^ uint64_t(object) * 0x9e3779b97f4a7c15ull;
    s ^= uint64_t(ix) * 0xc2b2ae3d27d4eb4full;
    s ^= uint64_t(iy) * 0x165667b19e3779f9ull;
    s ^= uint64_t(iz) * 0x27d4eb2f165667c5ull;
    return double(splitmix64(s) >> 11) * 0x1.0p-53;
}

double smoothstep(double x) { return x * x * (3.0 - 2.0 * x); }

// Trilinear value noise in world space, range [0,1].
double value_noise(uint64_t seed, int object, const Vec3& p, double freq) {
    double sx = p.x() * freq, sy = p.y() * freq, sz = p.z() * freq;
    int64_t ix = int64_t(std::floor(sx)), iy = int64_t(std::floor(sy)), iz = int64_t(std::floor(sz));
    double fx = smoothstep(sx - double(ix));
    double fy = smoothstep(sy - double(iy));
    double fz = smoothstep(sz - double(iz));
    double acc = 0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                acc += w * lattice_value(seed, object, ix + dx, iy + dy, iz + dz);
            }
    return acc;
}

Vec3 face_base_color(uint64_t seed, int object, int face) {
    uint64_t s = seed ^ 0x7c4f1d2e9b8a6653ull;
    s = splitmix64(s) ^ (uint64_t(object) << 32 | uint64_t(uint32_t(face)));
    Vec3 c;
    for (int i = 0; i < 3; ++i) c(i) = 0.25 + 0.65 * (double(splitmix64(s) >> 11) * 0x1.0p-53);
    return c;
}

double quantize255(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return std::round(v * 255.0) / 255.0;
}

}  // namespace

Scene build_scene(const SceneSpec& spec) {
    spec.validate();
    Scene scene;
    scene.spec = spec;
    double h = spec.room_half_extent;
    Rng rng(substream_seed(spec.seed, "scene.boxes"));
    double wall_margin = 0.15 * h;
    int attempts = 0;
    while (int(scene.boxes.size()) < spec.num_boxes) {
        if (++attempts > 2000)
            throw InvariantError("build_scene: could not place " + std::to_string(spec.num_boxes) +
                                 " boxes in a room of half extent " + std::to_string(h));
        Vec3 half;
        for (int i = 0; i < 3; ++i) half(i) = rng.uniform(0.08, 0.22) * h;
        Vec3 center;
        bool fits = true;
        for (int i = 0; i < 3; ++i) {
            double lim = h - wall_margin - half(i);
            if (lim <= 0) {
                fits = false;
                break;
            }
            center(i) = rng.uniform(-lim, lim);
        }
        if (!fits) continue;
        AxisBox box{center - half, center + half};
        if (box_min_dist_to_origin(box) < 0.35 * h) continue;
        bool clash = false;
        for (const AxisBox& other : scene.boxes)
            if (boxes_overlap(box, other, 0.05 * h)) clash = true;
        if (clash) continue;
        scene.boxes.push_back(box);
    }
    return scene;
}

Hit raycast(const Scene& scene, const Vec3& origin, const Vec3& dir) {
    double h = scene.spec.room_half_extent;
    constexpr double kEps = 1e-12;

    // Exit point of the closed room (ray starts inside).
    Hit best;
    best.t = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (dir(a) > kEps) {
            double t = (h - origin(a)) / dir(a);
            if (t < best.t) best = {t, 0, a * 2 + 0, Vec3::Zero()};
        } else if (dir(a) < -kEps) {
            double t = (-h - origin(a)) / dir(a);
            if (t < best.t) best = {t, 0, a * 2 + 1, Vec3::Zero()};
        }
    }
    require(std::isfinite(best.t), "raycast: ray does not leave the room (zero direction?)");

    for (size_t b = 0; b < scene.boxes.size(); ++b) {
        const AxisBox& box = scene.boxes[b];
        double t_near = -std::numeric_limits<double>::infinity();
        double t_far = std::numeric_limits<double>::infinity();
        int near_axis = -1;
        bool miss = false;
        for (int a = 0; a < 3; ++a) {
            if (std::abs(dir(a)) <= kEps) {
                if (origin(a) < box.lo(a) || origin(a) > box.hi(a)) {
                    miss = true;
                    break;
                }
                continue;
            }
            double t0 = (box.lo(a) - origin(a)) / dir(a);
            double t1 = (box.hi(a) - origin(a)) / dir(a);
            if (t0 > t1) std::swap(t0, t1);
            if (t0 > t_near) {
                t_near = t0;
                near_axis = a;
            }
            t_far = std::min(t_far, t1);
        }
        if (miss || t_near > t_far || t_near <= kEps) continue;
        if (t_near < best.t) {
            int side = dir(near_axis) > 0 ? 1 : 0;  // entering from -axis side hits the -face
            best = {t_near, int(b) + 1, near_axis * 2 + side, Vec3::Zero()};
        }
    }
    best.point = origin + best.t * dir;
    return best;
}

Vec3 surface_color(const Scene& scene, const Hit& hit) {
    const SceneSpec& spec = scene.spec;
    Vec3 base = face_base_color(spec.seed, hit.object, hit.face);
    int axis = hit.face / 2;
    int sa = (axis + 1) % 3, ta = (axis + 2) % 3;
    double cell = spec.texture_scale;
    int64_t parity = int64_t(std::floor(hit.point(sa) / cell)) +
                     int64_t(std::floor(hit.point(ta) / cell));
    double checker = (parity & 1) ? 0.55 : 1.0;
    double noise = 0.7 + 0.6 * value_noise(spec.seed, hit.object, hit.point, 2.0 / cell);
    Vec3 out;
    for (int i = 0; i < 3; ++i) out(i) = quantize255(base(i) * checker * noise);
    return out;
}

bool is_camera_valid(const Scene& scene, const Vec3& pos, double wall_margin, double box_margin) {
    double h = scene.spec.room_half_extent;
    for (int i = 0; i < 3; ++i)
        if (std::abs(pos(i)) > h - wall_margin) return false;
    for (const AxisBox& b : scene.boxes) {
        bool inside = true;
        for (int i = 0; i < 3; ++i)
            if (pos(i) < b.lo(i) - box_margin || pos(i) > b.hi(i) + box_margin) inside = false;
        if (inside) return false;
    }
    return true;
}

RenderResult render_view(const Scene& scene, const Pose& pose, const Intrinsics& K) {
    K.validate();
    require(is_rotation(pose.R), "render_view: rotation must be orthonormal");
    require(is_camera_valid(scene, pose.t, 1e-6, 0.0),
            "render_view: camera outside the room or inside a box");
    RenderResult out{RgbImage(K.height, K.width), DepthMap(K.height, K.width)};
    for (int v = 0; v < K.height; ++v) {
        for (int u = 0; u < K.width; ++u) {
            // Camera-space direction with z = 1, so the ray parameter t is the
            // camera-z depth of the hit point.
            Vec3 d_world = pose.R * pixel_dir_cam(K, u, v);
            Hit hit = raycast(scene, pose.t, d_world);
            require(hit.t > 0 && std::isfinite(hit.t), "render_view: non-positive depth");
            Vec3 c = surface_color(scene, hit);
            for (int ch = 0; ch < 3; ++ch) out.image.at(v, u, ch) = c(ch);
            out.depth.at(v, u) = hit.t;
        }
    }
    return out;
}

std::vector<FrameSample> make_dataset(const Scene& scene, const Trajectory& traj,
                                      const Intrinsics& K) {
    std::vector<FrameSample> frames;
    frames.reserve(traj.size());
    for (size_t i = 0; i < traj.size(); ++i) {
        if (!is_camera_valid(scene, traj[i].t, 1e-6, 0.0))
            throw InvariantError("make_dataset: invalid camera at frame " + std::to_string(i));
        RenderResult r = render_view(scene, traj[i], K);
        frames.push_back({std::move(r.image), std::move(r.depth), traj[i]});
    }
    return frames;
}

Trajectory make_dolly_trajectory(const Pose& start, int steps, double step_length,
                                 double yaw_per_step) {
    require(steps > 0, "make_dolly_trajectory: steps must be positive");
    Trajectory traj;
    Vec3 fwd = start.R * Vec3(0, 0, 1);
    for (int i = 0; i < steps; ++i) {
        Pose p;
        p.R = yaw_per_step == 0.0
                  ? start.R
                  : Mat3(rotation_axis_angle(Vec3(0, 1, 0), yaw_per_step * i) * start.R);
        p.t = start.t + step_length * double(i) * fwd;
        traj.push_back(p);
    }
    return traj;
}

Pose look_at(const Vec3& from, const Vec3& to, const Vec3& up) {
    Vec3 z = to - from;
    require(z.norm() > 0, "look_at: coincident points");
    z /= z.norm();
    Vec3 x = up.cross(z);
    require(x.norm() > 1e-12, "look_at: up parallel to view direction");
    x /= x.norm();
    Vec3 y = z.cross(x);
    Pose p;
    p.R.col(0) = x;
    p.R.col(1) = y;
    p.R.col(2) = z;
    p.t = from;
    return p;
}

Trajectory make_orbit_trajectory(double radius, int steps, double height, double span_radians) {
    require(steps > 0 && radius > 0, "make_orbit_trajectory: bad arguments");
    Trajectory traj;
    for (int i = 0; i < steps; ++i) {
        double a = steps == 1 ? 0.0 : span_radians * double(i) / double(steps - 1);
        Vec3 pos(radius * std::sin(a), height, -radius * std::cos(a));
        traj.push_back(look_at(pos, Vec3(0, height, 0)));
    }
    return traj;
}

Trajectory make_random_walk_trajectory(const Scene& scene, int steps, Rng& rng, double step_length,
                                       double height) {
    require(steps > 0, "make_random_walk_trajectory: steps must be positive");
    double h = scene.spec.room_half_extent;
    double wall_margin = 0.2 * h;
    double box_margin = 0.08 * h;

    Vec3 pos;
    int tries = 0;
    do {
        require(++tries <= 1000, "make_random_walk_trajectory: no valid start position");
        pos = Vec3(rng.uniform(-0.5, 0.5) * h, height, rng.uniform(-0.5, 0.5) * h);
    } while (!is_camera_valid(scene, pos, wall_margin, box_margin));

    double heading = rng.uniform(0.0, 2.0 * M_PI);
    Trajectory traj;
    for (int i = 0; i < steps; ++i) {
        Pose p;
        p.R = rotation_axis_angle(Vec3(0, 1, 0), heading);
        p.t = pos;
        traj.push_back(p);
        // Pick the next move; give up on a direction after a few rejections.
        double next_heading = heading;
        Vec3 next_pos = pos;
        bool moved = false;
        for (int attempt = 0; attempt < 8; ++attempt) {
            double cand = heading + rng.uniform(-0.35, 0.35) + (attempt >= 4 ? M_PI : 0.0);
            Vec3 step(std::sin(cand) * step_length, 0.0, std::cos(cand) * step_length);
            Vec3 cand_pos = pos + step;
            if (is_camera_valid(scene, cand_pos, wall_margin, box_margin)) {
                next_heading = cand;
                next_pos = cand_pos;
                moved = true;
                break;
            }
        }
        if (moved) {
            heading = next_heading;
            pos = next_pos;
        } else {
            heading += M_PI;  // stuck in a corner: turn around in place
        }
    }
    return traj;
}

}  // namespace gac
