// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "gac/tensor.hpp"

namespace gac {

// Camera-gated attention: a pre-norm transformer block whose attention is
// conditioned on per-token camera rays r through a zero-initialized side
// branch. linear1 produces {Q,K,V}; linear2, fed Q + r, produces a query
// residual and a gate; linear3 projects the gated attention output:
//
//   {Q,K,V}        = linear1(F)
//   {Q_res, Gate}  = linear2(Q + r)
//   O              = attention(Q + Q_res, K, V, mask)
//   out            = linear3(O * sigmoid(Gate))
//
// With linear2 at zero this is exactly plain attention scaled by the 0.5
// sigmoid midpoint, so a fresh block starts pose-agnostic and learns how much
// camera information to admit.

// Dense boolean attention mask; every query row must keep at least one key.
struct AttentionMask {
    int n = 0;
    std::vector<uint8_t> allow;  // n*n row-major, 1 = query row may attend to key column

    static AttentionMask full(int n);
    bool at(int q, int k) const { return allow[size_t(q) * n + k] != 0; }
    void set(int q, int k, bool v) { allow[size_t(q) * n + k] = v ? 1 : 0; }
    void validate() const;
    // Run-length form consumed by the fused attention kernel; rows with
    // identical runs are merged into one span.
    AttnPlan to_plan() const;
};

// Multi-head scaled dot-product attention with masking. Equivalent to adding
// -1e9 to masked scores before the softmax: the masked weights underflow to
// exactly zero, so skipping them (as the kernel does) changes nothing.
DiffTensor sdpa(DiffTensor q, DiffTensor k, DiffTensor v, const AttentionMask& mask,
                int heads = 1);

// Parameters of one attention sub-block, as graph tensors.
struct CgaTensors {
    int heads = 1;
    DiffTensor w1, b1;  // (D, 3D), (1, 3D)
    DiffTensor w2, b2;  // (D, 2D), (1, 2D); ignored by additive_attention
    DiffTensor w3, b3;  // (D, D), (1, D)
};

// f, rays: (N, D). Returns (N, D).
DiffTensor cga_attention(DiffTensor f, DiffTensor rays, const CgaTensors& p, const AttnPlan& plan);

// Ablation arm: rays are simply added to the features before plain attention;
// no query residual, no gate.
DiffTensor additive_attention(DiffTensor f, DiffTensor rays, const CgaTensors& p,
                              const AttnPlan& plan);

// Full pre-norm block: x + attn(norm1(x), rays) followed by a 4x GELU MLP on
// norm2 of the sum. Zeroing linear3 and the MLP output projection makes the
// block an exact identity.
struct BlockTensors {
    CgaTensors attn;
    DiffTensor norm1_g, norm1_b;  // (1, D)
    DiffTensor norm2_g, norm2_b;  // (1, D)
    DiffTensor mlp_w1, mlp_b1;    // (D, 4D), (1, 4D)
    DiffTensor mlp_w2, mlp_b2;    // (4D, D), (1, D)
};

DiffTensor cga_block(DiffTensor x, DiffTensor rays, const BlockTensors& p, const AttnPlan& plan,
                     bool gated = true);

}  // namespace gac
