// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#include "gac/interleave.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "gac/reconpipe.hpp"
#include "doctest.h"

using namespace gac;

namespace {

Intrinsics tiny_intrinsics(int n) {
    Intrinsics k;
    k.width = k.height = n;
    k.fx = k.fy = double(n);
    k.cx = k.cy = n / 2.0;
    return k;
}

// Real rendered frames from a small scene so warp payloads are meaningful.
std::vector<FrameSample> walk_frames(uint64_t scene_seed, int count, int res) {
    SceneSpec spec;
    spec.seed = scene_seed;
    Scene scene = build_scene(spec);
    Rng rng(substream_seed(scene_seed, "traj"));
    Trajectory traj = make_random_walk_trajectory(scene, count, rng);
    return make_dataset(scene, traj, tiny_intrinsics(res));
}

int count_kind(const InterleavedSequence& seq, ElemKind kind) {
    int n = 0;
    for (const SeqElement& e : seq.elems) n += e.kind == kind ? 1 : 0;
    return n;
}

}  // namespace

TEST_CASE("zero dropout yields the full interleaved pattern") {
    auto frames = walk_frames(2, 3, 8);
    Rng rng(1);
    InterleavedSequence seq = build_sequence(frames, VariantMode::GeometryContext, 0.0, 1, rng,
                                             tiny_intrinsics(8));
    validate_sequence(seq);
    REQUIRE(seq.elems.size() == 9);  // 4T-3 with T=3

    struct Expect {
        ElemKind kind;
        int token_id;
        int frame;
        bool target;
    };
    std::vector<Expect> want = {
        {ElemKind::ImageFrame, -1, 0, false},   {ElemKind::TaskToken, kTaskGeometry, 0, false},
        {ElemKind::GeometryFrame, -1, 0, true}, {ElemKind::TaskToken, kTaskImage, 1, false},
        {ElemKind::ImageFrame, -1, 1, true},    {ElemKind::TaskToken, kTaskGeometry, 1, false},
        {ElemKind::GeometryFrame, -1, 1, true}, {ElemKind::TaskToken, kTaskImage, 2, false},
        {ElemKind::ImageFrame, -1, 2, true},
    };
    for (size_t i = 0; i < want.size(); ++i) {
        CAPTURE(i);
        CHECK(seq.elems[i].kind == want[i].kind);
        CHECK(seq.elems[i].token_id == want[i].token_id);
        CHECK(seq.elems[i].frame_index == want[i].frame);
        CHECK(seq.elems[i].is_target == want[i].target);
    }
    // Geometry payloads are the true depth maps of their frames.
    CHECK(seq.elems[2].depth.data == frames[0].depth.data);
    CHECK(seq.elems[6].depth.data == frames[1].depth.data);
}

TEST_CASE("full dropout leaves only images and image task tokens") {
    auto frames = walk_frames(2, 3, 8);
    Rng rng(1);
    InterleavedSequence seq = build_sequence(frames, VariantMode::GeometryContext, 1.0, 1, rng,
                                             tiny_intrinsics(8));
    validate_sequence(seq);
    REQUIRE(seq.elems.size() == 5);  // 2T-1 with T=3
    CHECK(count_kind(seq, ElemKind::GeometryFrame) == 0);
    for (const SeqElement& e : seq.elems)
        if (e.kind == ElemKind::TaskToken) CHECK(e.token_id == kTaskImage);
}

TEST_CASE("sequence lengths follow the closed forms at both dropout extremes") {
    for (int t = 2; t <= 6; ++t) {
        auto frames = walk_frames(3, t, 8);
        Rng r0(7), r1(7);
        auto all = build_sequence(frames, VariantMode::GeometryContext, 0.0, 1, r0,
                                  tiny_intrinsics(8));
        auto none = build_sequence(frames, VariantMode::GeometryContext, 1.0, 1, r1,
                                   tiny_intrinsics(8));
        CHECK(int(all.elems.size()) == 4 * t - 3);
        CHECK(int(none.elems.size()) == 2 * t - 1);
    }
}

TEST_CASE("removing geometry context consumes the same randomness") {
    auto frames = walk_frames(4, 5, 8);
    Rng r1(99), r2(99);
    auto with_geo = build_sequence(frames, VariantMode::GeometryContext, 0.5, 1, r1,
                                   tiny_intrinsics(8));
    auto no_geo = build_sequence(frames, VariantMode::NoContext, 0.5, 1, r2, tiny_intrinsics(8));
    CHECK(int(no_geo.elems.size()) == 2 * 5 - 1);
    CHECK(count_kind(no_geo, ElemKind::GeometryFrame) == 0);
    // Both modes drew one Bernoulli per slot, so the streams stay aligned.
    for (int i = 0; i < 8; ++i) CHECK(r1.uniform() == r2.uniform());
}

TEST_CASE("kept geometry slots concentrate around the expected count") {
    const int t = 5;
    const double r = 0.5;
    auto frames = walk_frames(5, t, 8);
    const int trials = 3000;
    long long kept = 0;
    for (int i = 0; i < trials; ++i) {
        Rng rng(substream_seed(123, "drop", uint64_t(i)));
        auto seq = build_sequence(frames, VariantMode::GeometryContext, r, 1, rng,
                                  tiny_intrinsics(8));
        kept += count_kind(seq, ElemKind::GeometryFrame);
    }
    double mean = double(kept) / trials;
    double expected = (1.0 - r) * (t - 1);
    CHECK(std::abs(mean - expected) / expected < 0.05);
}

TEST_CASE("context count controls where supervision starts") {
    auto frames = walk_frames(6, 5, 8);
    Rng rng(3);
    auto seq = build_sequence(frames, VariantMode::GeometryContext, 0.0, 3, rng,
                              tiny_intrinsics(8));
    validate_sequence(seq);
    for (const SeqElement& e : seq.elems) {
        if (e.kind == ElemKind::TaskToken) {
            CHECK(!e.is_target);
        } else if (e.kind == ElemKind::ImageFrame) {
            CHECK(e.is_target == (e.frame_index >= 3));
        } else {
            // Geometry of frame i sits after image i, so supervision starts
            // with the geometry of the last pure-context frame.
            CHECK(e.is_target == (e.frame_index >= 2));
        }
    }

    Rng rng2(3);
    auto warped = build_sequence(frames, VariantMode::WarpedContext, 0.0, 3, rng2,
                                 tiny_intrinsics(8));
    for (const SeqElement& e : warped.elems)
        if (e.kind == ElemKind::GeometryFrame) CHECK(!e.is_target);
}

TEST_CASE("warped context carries the previous frame splatted to the next view") {
    auto frames = walk_frames(7, 3, 12);
    Intrinsics k = tiny_intrinsics(12);
    Rng rng(4);
    auto seq = build_sequence(frames, VariantMode::WarpedContext, 0.0, 1, rng, k);
    validate_sequence(seq);

    std::vector<const SeqElement*> geo;
    for (const SeqElement& e : seq.elems)
        if (e.kind == ElemKind::GeometryFrame) geo.push_back(&e);
    REQUIRE(geo.size() == 2);

    for (size_t i = 0; i < geo.size(); ++i) {
        PointCloud cloud = unproject(frames[i].image, frames[i].depth, frames[i].pose, k);
        RenderedView expect = splat_render(cloud, frames[i + 1].pose, k);
        REQUIRE(geo[i]->image.data.size() == expect.image.data.size());
        CHECK(std::memcmp(geo[i]->image.data.data(), expect.image.data.data(),
                          expect.image.data.size() * sizeof(double)) == 0);
        CHECK(geo[i]->depth.data.empty());
        CHECK((geo[i]->pose.t - frames[i + 1].pose.t).norm() == 0.0);
    }
}

TEST_CASE("sequence construction is deterministic given the seed") {
    auto frames = walk_frames(8, 4, 8);
    auto build = [&]() {
        Rng rng(substream_seed(55, "clip"));
        return build_sequence(frames, VariantMode::GeometryContext, 0.5, 2, rng,
                              tiny_intrinsics(8));
    };
    auto a = build();
    auto b = build();
    REQUIRE(a.elems.size() == b.elems.size());
    for (size_t i = 0; i < a.elems.size(); ++i) {
        CHECK(a.elems[i].kind == b.elems[i].kind);
        CHECK(a.elems[i].frame_index == b.elems[i].frame_index);
        CHECK(a.elems[i].is_target == b.elems[i].is_target);
        CHECK(a.elems[i].image.data == b.elems[i].image.data);
        CHECK(a.elems[i].depth.data == b.elems[i].depth.data);
    }
}

TEST_CASE("malformed sequences are rejected") {
    auto frames = walk_frames(9, 3, 8);
    Intrinsics k = tiny_intrinsics(8);
    Rng rng(6);
    auto seq = build_sequence(frames, VariantMode::GeometryContext, 0.0, 1, rng, k);
    validate_sequence(seq);

    auto corrupted = seq;
    std::swap(corrupted.elems[1], corrupted.elems[2]);  // geometry before its token
    CHECK_THROWS_AS(validate_sequence(corrupted), InvariantError);

    corrupted = seq;
    corrupted.elems[1].is_target = true;  // task tokens are never supervised
    CHECK_THROWS_AS(validate_sequence(corrupted), InvariantError);

    corrupted = seq;
    corrupted.elems.erase(corrupted.elems.begin());  // must start with frame 0
    CHECK_THROWS_AS(validate_sequence(corrupted), InvariantError);

    corrupted = seq;
    corrupted.elems.resize(2);  // trailing task token
    CHECK_THROWS_AS(validate_sequence(corrupted), InvariantError);

    // Geometry that references a frame whose image never appeared.
    corrupted = seq;
    corrupted.elems[2].frame_index = 2;
    CHECK_THROWS_AS(validate_sequence(corrupted), InvariantError);

    Rng r2(6);
    CHECK_THROWS_AS(build_sequence({frames[0]}, VariantMode::GeometryContext, 0.0, 1, r2, k),
                    InvariantError);
    CHECK_THROWS_AS(build_sequence(frames, VariantMode::GeometryContext, 0.0, 0, r2, k),
                    InvariantError);
    CHECK_THROWS_AS(build_sequence(frames, VariantMode::GeometryContext, 0.0, 3, r2, k),
                    InvariantError);
    CHECK_THROWS_AS(build_sequence(frames, VariantMode::GeometryContext, 1.5, 1, r2, k),
                    InvariantError);
}

TEST_CASE("context selection matches an independent scoring oracle") {
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        int n = 2 + int(rng.uniform_int(7));
        int k = 1 + int(rng.uniform_int(4));
        std::vector<Pose> history;
        for (int i = 0; i < n; ++i) {
            Vec3 from(rng.uniform(-1, 1), rng.uniform(-0.3, 0.3), rng.uniform(-1, 1));
            Vec3 to(rng.uniform(-1, 1), 0, rng.uniform(-1, 1));
            history.push_back(look_at(from, to + Vec3(0, 0, 2)));
        }
        Vec3 from(rng.uniform(-1, 1), 0, rng.uniform(-1, 1));
        Pose target = look_at(from, Vec3(0, 0, 2));

        std::vector<int> got = select_context(history, target, k);

        // Oracle: sort by distance + angle, recency breaking ties, then force
        // the newest frame in and report chronologically.
        Vec3 tf = target.R * Vec3(0, 0, 1);
        std::vector<double> score(history.size());
        for (int i = 0; i < n; ++i) {
            Vec3 f = history[size_t(i)].R * Vec3(0, 0, 1);
            double c = std::clamp(f.dot(tf), -1.0, 1.0);
            score[size_t(i)] = (history[size_t(i)].t - target.t).norm() + std::acos(c);
        }
        std::vector<int> order(history.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (score[size_t(a)] != score[size_t(b)]) return score[size_t(a)] < score[size_t(b)];
            return a > b;
        });
        std::vector<int> want(order.begin(), order.begin() + std::min(k, n));
        if (std::find(want.begin(), want.end(), n - 1) == want.end()) want.back() = n - 1;
        std::sort(want.begin(), want.end());

        CHECK(got == want);
        CHECK(std::find(got.begin(), got.end(), n - 1) != got.end());
        CHECK(std::is_sorted(got.begin(), got.end()));
        CHECK(int(got.size()) == std::min(k, n));
    }
    CHECK_THROWS_AS(select_context({}, Pose{}, 1), InvariantError);
    CHECK_THROWS_AS(select_context({Pose{}}, Pose{}, 0), InvariantError);
}

TEST_CASE("grid packing round-trips and pads with black") {
    Rng rng(88);
    std::vector<RgbImage> images;
    for (int i = 0; i < 5; ++i) {
        RgbImage im(6, 4);
        for (double& v : im.data) v = rng.uniform();
        images.push_back(std::move(im));
    }
    RgbImage packed = grid_pack(images);
    CHECK(packed.height == 12);  // 2 rows of 6
    CHECK(packed.width == 12);   // 3 cols of 4
    auto back = grid_unpack(packed, 5);
    REQUIRE(back.size() == 5);
    for (int i = 0; i < 5; ++i) CHECK(back[size_t(i)].data == images[size_t(i)].data);
    // The sixth cell never held an image and stays black.
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 3; ++c) CHECK(packed.at(6 + y, 8 + x, c) == 0.0);

    std::vector<RgbImage> mixed = {RgbImage(4, 4), RgbImage(4, 5)};
    CHECK_THROWS_AS(grid_pack(mixed), InvariantError);
    CHECK_THROWS_AS(grid_unpack(RgbImage(7, 12), 5), InvariantError);
    CHECK_THROWS_AS(grid_pack({}), InvariantError);
}

TEST_CASE("sequence manifests serialize every element with exact poses") {
    namespace fs = std::filesystem;
    auto frames = walk_frames(10, 3, 8);
    Rng rng(9);
    auto seq = build_sequence(frames, VariantMode::GeometryContext, 0.0, 1, rng,
                              tiny_intrinsics(8));
    fs::path path = fs::temp_directory_path() / "gac_test_manifest.csv";
    serialize_manifest(path.string(), seq);

    std::ifstream is(path);
    REQUIRE(bool(is));
    std::string line;
    std::getline(is, line);
    CHECK(line == "index,kind,token_id,frame,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz");
    std::vector<std::string> rows;
    while (std::getline(is, line))
        if (!line.empty()) rows.push_back(line);
    REQUIRE(rows.size() == seq.elems.size());

    // Spot-check the first image row: pose doubles survive the %.17g round trip.
    int index = -1, token = 0, frame = -1;
    char kind[16] = {0};
    double m[12] = {0};
    int got = std::sscanf(rows[0].c_str(),
                          "%d,%15[^,],%d,%d,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf,%lf",
                          &index, kind, &token, &frame, &m[0], &m[1], &m[2], &m[3], &m[4], &m[5],
                          &m[6], &m[7], &m[8], &m[9], &m[10], &m[11]);
    REQUIRE(got == 16);
    CHECK(index == 0);
    CHECK(std::string(kind) == "image");
    CHECK(frame == 0);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) CHECK(m[r * 3 + c] == seq.elems[0].pose.R(r, c));
    for (int c = 0; c < 3; ++c) CHECK(m[9 + c] == seq.elems[0].pose.t(c));

    int geometry_rows = 0, token_rows = 0;
    for (const std::string& row : rows) {
        geometry_rows += row.find(",geometry,") != std::string::npos ? 1 : 0;
        token_rows += row.find(",token,") != std::string::npos ? 1 : 0;
    }
    CHECK(geometry_rows == 2);
    CHECK(token_rows == 4);
    fs::remove(path);

    CHECK_THROWS_AS(serialize_manifest("/nonexistent-dir/out.csv", seq), IoError);
}
