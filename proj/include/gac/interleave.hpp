// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "gac/synthworld.hpp"

namespace gac {

// Interleaved RGB-geometry sequences. A clip of frames becomes
//   I_0 [<G> G_0] <M> I_1 [<G> G_1] <M> ... I_{T-1}
// where each bracketed pair (geometry task token + geometry frame) is kept
// i.i.d. with probability 1 - dropout_r. Geometry attaches to frames
// 0..T-2 only. Task tokens announce what the next element is, so the same
// trunk can be queried for either modality at generation time.

enum class ElemKind { ImageFrame, GeometryFrame, TaskToken };

// Task token ids.
inline constexpr int kTaskGeometry = 0;
inline constexpr int kTaskImage = 1;

enum class VariantMode {
    GeometryContext,  // geometry slots carry true depth maps
    WarpedContext,    // geometry slots carry the previous frame splatted to the next view
    NoContext,        // geometry slots removed entirely
};

struct SeqElement {
    ElemKind kind = ElemKind::TaskToken;
    int token_id = -1;   // kTaskGeometry / kTaskImage for TaskToken elements
    RgbImage image;      // ImageFrame payload; warp payload in WarpedContext
    DepthMap depth;      // GeometryFrame payload in GeometryContext
    Pose pose;           // viewpoint the element encodes
    int frame_index = -1;
    bool is_target = false;  // supervised during training
};

struct InterleavedSequence {
    VariantMode mode = VariantMode::GeometryContext;
    int context_count = 1;
    std::vector<SeqElement> elems;
};

// Builds a training sequence from consecutive frames. context_count images
// are pure context; every frame element after the (context_count-1)-th image
// is a target. Requires 2 <= frames.size() and 1 <= context_count < size.
// Dropout draws one Bernoulli per geometry slot whatever the rate, so
// different rates consume the RNG identically.
InterleavedSequence build_sequence(const std::vector<FrameSample>& frames, VariantMode mode,
                                   double dropout_r, int context_count, Rng& rng,
                                   const Intrinsics& K);

// Sanity-checks element ordering: geometry never precedes its frame, task
// tokens announce the right element kinds, poses are consistent.
void validate_sequence(const InterleavedSequence& seq);

// Picks up to k context frames for a target pose, scored by camera distance
// plus forward-axis angle (radians, weight 1.0). The most recent frame is
// always included, replacing the worst pick if necessary. Returns indices in
// chronological order.
std::vector<int> select_context(const std::vector<Pose>& history, const Pose& target, int k);

// Packs same-sized images into a near-square grid (ceil(sqrt(n)) columns),
// row-major, empty cells black. grid_unpack inverts it given the count.
RgbImage grid_pack(const std::vector<RgbImage>& images);
std::vector<RgbImage> grid_unpack(const RgbImage& packed, int count);

// CSV description of a sequence: index,kind,token_id,frame,r00..r22,tx,ty,tz.
void serialize_manifest(const std::string& path, const InterleavedSequence& seq);

}  // namespace gac
