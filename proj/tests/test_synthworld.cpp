// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#include "gac/synthworld.hpp"

#include <cstdio>

#include "doctest.h"

using namespace gac;

namespace {

Intrinsics intr(int n) {
    Intrinsics k;
    k.width = k.height = n;
    k.fx = k.fy = double(n);
    k.cx = k.cy = n / 2.0;
    return k;
}

}  // namespace

TEST_CASE("build_scene is deterministic") {
    SceneSpec spec;
    spec.seed = 21;
    Scene a = build_scene(spec), b = build_scene(spec);
    REQUIRE(a.boxes.size() == b.boxes.size());
    for (size_t i = 0; i < a.boxes.size(); ++i) {
        CHECK(a.boxes[i].lo == b.boxes[i].lo);
        CHECK(a.boxes[i].hi == b.boxes[i].hi);
    }
    RenderResult ra = render_view(a, Pose::identity(), intr(16));
    RenderResult rb = render_view(b, Pose::identity(), intr(16));
    CHECK(ra.image.data == rb.image.data);
    CHECK(ra.depth.data == rb.depth.data);
}

TEST_CASE("empty interior leaves only the room") {
    SceneSpec spec;
    spec.num_boxes = 0;
    Scene s = build_scene(spec);
    CHECK(s.boxes.empty());
    RenderResult r = render_view(s, Pose::identity(), intr(8));
    for (double d : r.depth.data) CHECK(d > 0);
}

TEST_CASE("interior boxes sit strictly inside the room") {
    for (uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
        SceneSpec spec;
        spec.seed = seed;
        spec.num_boxes = 5;
        Scene s = build_scene(spec);
        REQUIRE(s.boxes.size() == 5);
        double h = spec.room_half_extent;
        for (const AxisBox& b : s.boxes)
            for (int a = 0; a < 3; ++a) {
                CHECK(b.lo[a] > -h);
                CHECK(b.hi[a] < h);
                CHECK(b.lo[a] < b.hi[a]);
            }
    }
}

TEST_CASE("principal pixel depth equals the facing wall distance") {
    SceneSpec spec;
    spec.num_boxes = 0;
    spec.room_half_extent = 2.0;
    Scene s = build_scene(spec);
    // 5x5 frame: cx = 2.5, so pixel (2,2) center is exactly the principal ray.
    RenderResult r = render_view(s, Pose::identity(), intr(5));
    CHECK(r.depth.at(2, 2) == 2.0);
}

TEST_CASE("all depths are positive and finite") {
    SceneSpec spec;
    spec.seed = 9;
    Scene s = build_scene(spec);
    Rng rng(77);
    Trajectory walk = make_random_walk_trajectory(s, 12, rng);
    for (const Pose& p : walk) {
        RenderResult r = render_view(s, p, intr(32));
        for (double d : r.depth.data) {
            CHECK(d > 0);
            CHECK(std::isfinite(d));
        }
        for (double v : r.image.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("half-turn roll flips the image exactly") {
    SceneSpec spec;
    spec.seed = 4;
    Scene s = build_scene(spec);
    Intrinsics k = intr(64);

    Pose a = Pose::identity();
    Pose b;
    b.R << -1, 0, 0,
            0, -1, 0,
            0, 0, 1;
    RenderResult ra = render_view(s, a, k);
    RenderResult rb = render_view(s, b, k);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            CHECK(rb.depth.at(y, x) == ra.depth.at(63 - y, 63 - x));
            for (int c = 0; c < 3; ++c) CHECK(rb.image.at(y, x, c) == ra.image.at(63 - y, 63 - x, c));
        }
}

TEST_CASE("make_dataset preserves order and reports bad frames") {
    SceneSpec spec;
    spec.seed = 3;
    Scene s = build_scene(spec);
    Rng rng(5);
    Trajectory walk = make_random_walk_trajectory(s, 8, rng);
    auto samples = make_dataset(s, walk, intr(16));
    REQUIRE(samples.size() == 8);
    for (size_t i = 0; i < samples.size(); ++i) {
        CHECK(samples[i].pose.R == walk[i].R);
        CHECK(samples[i].pose.t == walk[i].t);
    }
    auto again = make_dataset(s, walk, intr(16));
    for (size_t i = 0; i < samples.size(); ++i) {
        CHECK(samples[i].image.data == again[i].image.data);
        CHECK(samples[i].depth.data == again[i].depth.data);
    }

    Trajectory bad = walk;
    bad[5].t = Vec3(50, 0, 0);  // far outside the room
    try {
        make_dataset(s, bad, intr(16));
        FAIL("expected InvariantError");
    } catch (const InvariantError& e) {
        CHECK(std::string(e.what()).find("5") != std::string::npos);
    }
}

TEST_CASE("camera validity rejects solid geometry") {
    SceneSpec spec;
    spec.seed = 6;
    Scene s = build_scene(spec);
    CHECK(is_camera_valid(s, Vec3(0, 0, 0)));
    CHECK(!is_camera_valid(s, Vec3(5, 0, 0)));
    REQUIRE(!s.boxes.empty());
    Vec3 inside = 0.5 * (s.boxes[0].lo + s.boxes[0].hi);
    CHECK(!is_camera_valid(s, inside));
    Pose p;
    p.t = inside;
    CHECK_THROWS_AS(render_view(s, p, intr(8)), InvariantError);
}

TEST_CASE("impossible box packing fails loudly") {
    SceneSpec spec;
    spec.seed = 1;
    spec.num_boxes = 500;
    CHECK_THROWS_AS(build_scene(spec), InvariantError);
}

TEST_CASE("ppm round trip is exact on rendered frames") {
    SceneSpec spec;
    spec.seed = 12;
    Scene s = build_scene(spec);
    RenderResult r = render_view(s, Pose::identity(), intr(32));
    std::string path = "synthworld_roundtrip_test.ppm";
    write_ppm(path, r.image);
    RgbImage back = read_ppm(path);
    std::remove(path.c_str());
    REQUIRE(back.height == 32);
    REQUIRE(back.width == 32);
    // Textures are quantized to 1/255 steps at construction, so the file
    // round-trips bit-exactly.
    CHECK(back.data == r.image.data);
}

TEST_CASE("depth raw round trip matches float32 precision") {
    SceneSpec spec;
    spec.seed = 13;
    Scene s = build_scene(spec);
    RenderResult r = render_view(s, Pose::identity(), intr(16));
    std::string path = "synthworld_depth_test.raw";
    write_depth_raw(path, r.depth);
    DepthMap back = read_depth_raw(path);
    std::remove(path.c_str());
    REQUIRE(back.height == 16);
    REQUIRE(back.width == 16);
    for (size_t i = 0; i < back.data.size(); ++i)
        CHECK(back.data[i] == double(float(r.depth.data[i])));
}

TEST_CASE("trajectory generators stay inside the valid region") {
    SceneSpec spec;
    spec.seed = 15;
    Scene s = build_scene(spec);
    Rng rng(2);
    Trajectory walk = make_random_walk_trajectory(s, 20, rng);
    REQUIRE(walk.size() == 20);
    for (const Pose& p : walk) CHECK(is_camera_valid(s, p.t));
    Trajectory orbit = make_orbit_trajectory(0.3 * s.spec.room_half_extent, 8, 0.0, 1.5);
    for (const Pose& p : orbit) CHECK(is_camera_valid(s, p.t));
}
