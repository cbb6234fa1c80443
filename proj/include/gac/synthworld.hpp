// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <vector>

#include "gac/camgeom.hpp"
#include "gac/image.hpp"

namespace gac {

struct SceneSpec {
    uint64_t seed = 0;
    double room_half_extent = 2.0;
    int num_boxes = 3;
    double texture_scale = 0.75;  // checker cell size in world units

    void validate() const {
        require(room_half_extent > 0, "SceneSpec: room_half_extent must be positive");
        require(num_boxes >= 0, "SceneSpec: num_boxes must be non-negative");
        require(texture_scale > 0, "SceneSpec: texture_scale must be positive");
    }
};

struct AxisBox {
    Vec3 lo, hi;
};

// Closed axis-aligned room centered at the origin with disjoint axis-aligned
// boxes inside. Object 0 is the room shell; objects 1..num_boxes are the
// interior boxes. Every face carries a deterministic procedural texture.
struct Scene {
    SceneSpec spec;
    std::vector<AxisBox> boxes;
};

Scene build_scene(const SceneSpec& spec);

struct Hit {
    double t = 0;   // ray parameter; equals camera-z depth for z=1 camera rays
    int object = 0; // 0 = room shell, 1.. = interior boxes
    int face = 0;   // axis * 2 + (0 for +axis face, 1 for -axis face)
    Vec3 point = Vec3::Zero();
};

// Casts a ray from inside the room. The direction need not be normalized; the
// returned t is in units of |dir|. Always hits (the room is closed).
Hit raycast(const Scene& scene, const Vec3& origin, const Vec3& dir);

// Albedo in [0,1]^3 at a surface point, quantized to 8 bits so renders are
// bit-stable under serialization round trips.
Vec3 surface_color(const Scene& scene, const Hit& hit);

// True if a camera at pos sits inside the room and outside every box, with
// clearance margins in world units.
bool is_camera_valid(const Scene& scene, const Vec3& pos, double wall_margin = 0.1,
                     double box_margin = 0.05);

struct RenderResult {
    RgbImage image;
    DepthMap depth;  // camera-z depth, always positive and finite
};

RenderResult render_view(const Scene& scene, const Pose& pose, const Intrinsics& K);

struct FrameSample {
    RgbImage image;
    DepthMap depth;
    Pose pose;
};

// Renders every trajectory pose in order. Throws InvariantError naming the
// frame index if a pose is invalid (outside the room or inside a box).
std::vector<FrameSample> make_dataset(const Scene& scene, const Trajectory& traj,
                                      const Intrinsics& K);

// Straight push along the start pose's forward axis with an optional yaw per
// step (radians around world +y).
Trajectory make_dolly_trajectory(const Pose& start, int steps, double step_length,
                                 double yaw_per_step = 0.0);

// Circle of the given radius in the y = height plane, facing the origin.
Trajectory make_orbit_trajectory(double radius, int steps, double height, double span_radians);

// Seeded wander inside the room at fixed height: heading receives a random
// turn each step and the camera advances along it, rejecting moves that leave
// the valid region. Deterministic given (scene, rng state).
Trajectory make_random_walk_trajectory(const Scene& scene, int steps, Rng& rng,
                                       double step_length = 0.12, double height = 0.0);

Pose look_at(const Vec3& from, const Vec3& to, const Vec3& up = Vec3(0, 1, 0));

}  // namespace gac
