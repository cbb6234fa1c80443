// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#include "gac/interleave.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "gac/reconpipe.hpp"

namespace gac {

InterleavedSequence build_sequence(const std::vector<FrameSample>& frames, VariantMode mode,
                                   double dropout_r, int context_count, Rng& rng,
                                   const Intrinsics& K) {
    int t = int(frames.size());
    require(t >= 2, "build_sequence: need at least two frames");
    require(context_count >= 1 && context_count < t,
            "build_sequence: context_count must be in [1, frame count)");
    require(dropout_r >= 0.0 && dropout_r <= 1.0, "build_sequence: dropout_r must be in [0,1]");

    InterleavedSequence seq;
    seq.mode = mode;
    seq.context_count = context_count;
    for (int i = 0; i < t; ++i) {
        SeqElement img;
        img.kind = ElemKind::ImageFrame;
        img.image = frames[size_t(i)].image;
        img.pose = frames[size_t(i)].pose;
        img.frame_index = i;
        seq.elems.push_back(std::move(img));

        if (i == t - 1) break;
        // One draw per slot regardless of rate or mode keeps RNG consumption
        // aligned across ablation arms.
        bool keep = !(rng.uniform() < dropout_r);
        if (keep && mode != VariantMode::NoContext) {
            SeqElement tok;
            tok.kind = ElemKind::TaskToken;
            tok.token_id = kTaskGeometry;
            tok.frame_index = i;
            tok.pose = frames[size_t(i)].pose;
            seq.elems.push_back(std::move(tok));

            SeqElement geo;
            geo.kind = ElemKind::GeometryFrame;
            geo.frame_index = i;
            if (mode == VariantMode::GeometryContext) {
                geo.depth = frames[size_t(i)].depth;
                geo.pose = frames[size_t(i)].pose;
            } else {
                // Oracle warp: the frame's true geometry carries its pixels to
                // the next viewpoint; holes stay black, no inpainting.
                PointCloud cloud = unproject(frames[size_t(i)].image, frames[size_t(i)].depth,
                                             frames[size_t(i)].pose, K);
                RenderedView warped = splat_render(cloud, frames[size_t(i) + 1].pose, K);
                geo.image = std::move(warped.image);
                geo.pose = frames[size_t(i) + 1].pose;
            }
            seq.elems.push_back(std::move(geo));
        }

        SeqElement tok;
        tok.kind = ElemKind::TaskToken;
        tok.token_id = kTaskImage;
        tok.frame_index = i + 1;
        tok.pose = frames[size_t(i) + 1].pose;
        seq.elems.push_back(std::move(tok));
    }

    // Everything after the last pure-context image is supervised, except task
    // tokens and warp slots (warps are derived inputs, not scene content).
    size_t boundary = 0;
    for (size_t i = 0; i < seq.elems.size(); ++i)
        if (seq.elems[i].kind == ElemKind::ImageFrame &&
            seq.elems[i].frame_index == context_count - 1)
            boundary = i;
    for (size_t i = boundary + 1; i < seq.elems.size(); ++i) {
        const SeqElement& e = seq.elems[i];
        if (e.kind == ElemKind::ImageFrame ||
            (e.kind == ElemKind::GeometryFrame && mode == VariantMode::GeometryContext))
            seq.elems[i].is_target = true;
    }
    return seq;
}

void validate_sequence(const InterleavedSequence& seq) {
    require(!seq.elems.empty(), "validate_sequence: empty sequence");
    require(seq.elems[0].kind == ElemKind::ImageFrame && seq.elems[0].frame_index == 0,
            "validate_sequence: sequence must start with frame 0");
    for (size_t i = 0; i < seq.elems.size(); ++i) {
        const SeqElement& e = seq.elems[i];
        if (e.kind == ElemKind::TaskToken) {
            require(!e.is_target, "validate_sequence: task tokens are never targets");
            require(i + 1 < seq.elems.size(), "validate_sequence: trailing task token");
            ElemKind next = seq.elems[i + 1].kind;
            if (e.token_id == kTaskGeometry)
                require(next == ElemKind::GeometryFrame,
                        "validate_sequence: geometry token not followed by geometry");
            else if (e.token_id == kTaskImage)
                require(next == ElemKind::ImageFrame,
                        "validate_sequence: image token not followed by an image");
            else
                throw InvariantError("validate_sequence: unknown task token id");
        } else if (e.kind == ElemKind::GeometryFrame) {
            require(i > 0 && seq.elems[i - 1].kind == ElemKind::TaskToken &&
                        seq.elems[i - 1].token_id == kTaskGeometry,
                    "validate_sequence: geometry frame without its task token");
            bool has_earlier_image = false;
            for (size_t j = 0; j < i; ++j)
                if (seq.elems[j].kind == ElemKind::ImageFrame &&
                    seq.elems[j].frame_index == e.frame_index)
                    has_earlier_image = true;
            require(has_earlier_image, "validate_sequence: geometry precedes its frame");
        } else if (i > 0) {
            require(seq.elems[i - 1].kind == ElemKind::TaskToken &&
                        seq.elems[i - 1].token_id == kTaskImage,
                    "validate_sequence: image frame without its task token");
        }
    }
}

std::vector<int> select_context(const std::vector<Pose>& history, const Pose& target, int k) {
    int n = int(history.size());
    require(n >= 1, "select_context: empty history");
    require(k >= 1, "select_context: k must be positive");
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
        return a > b;  // prefer the more recent frame on ties
    });
    int m = std::min(k, n);
    std::vector<int> picked(order.begin(), order.begin() + m);
    if (std::find(picked.begin(), picked.end(), n - 1) == picked.end())
        picked.back() = n - 1;  // the most recent frame always participates
    std::sort(picked.begin(), picked.end());
    return picked;
}

RgbImage grid_pack(const std::vector<RgbImage>& images) {
    require(!images.empty(), "grid_pack: no images");
    int h = images[0].height, w = images[0].width;
    for (const RgbImage& im : images)
        require(im.height == h && im.width == w, "grid_pack: images must share one size");
    int n = int(images.size());
    int cols = int(std::ceil(std::sqrt(double(n))));
    int rows = (n + cols - 1) / cols;
    RgbImage out(rows * h, cols * w, 0.0);
    for (int i = 0; i < n; ++i) {
        int gy = (i / cols) * h, gx = (i % cols) * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    out.at(gy + y, gx + x, c) = images[size_t(i)].at(y, x, c);
    }
    return out;
}

std::vector<RgbImage> grid_unpack(const RgbImage& packed, int count) {
    require(count >= 1, "grid_unpack: count must be positive");
    int cols = int(std::ceil(std::sqrt(double(count))));
    int rows = (count + cols - 1) / cols;
    require(packed.height % rows == 0 && packed.width % cols == 0,
            "grid_unpack: packed image not divisible by grid");
    int h = packed.height / rows, w = packed.width / cols;
    std::vector<RgbImage> out;
    for (int i = 0; i < count; ++i) {
        int gy = (i / cols) * h, gx = (i % cols) * w;
        RgbImage im(h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) im.at(y, x, c) = packed.at(gy + y, gx + x, c);
        out.push_back(std::move(im));
    }
    return out;
}

void serialize_manifest(const std::string& path, const InterleavedSequence& seq) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "index,kind,token_id,frame,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n";
    char buf[64];
    for (size_t i = 0; i < seq.elems.size(); ++i) {
        const SeqElement& e = seq.elems[i];
        const char* kind = e.kind == ElemKind::ImageFrame      ? "image"
                           : e.kind == ElemKind::GeometryFrame ? "geometry"
                                                               : "token";
        os << i << ',' << kind << ',' << e.token_id << ',' << e.frame_index;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                std::snprintf(buf, sizeof(buf), ",%.17g", e.pose.R(r, c));
                os << buf;
            }
        for (int c = 0; c < 3; ++c) {
            std::snprintf(buf, sizeof(buf), ",%.17g", e.pose.t(c));
            os << buf;
        }
        os << '\n';
    }
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace gac
