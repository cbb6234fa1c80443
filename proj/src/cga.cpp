// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#include "gac/cga.hpp"

namespace gac {

AttentionMask AttentionMask::full(int n) {
    AttentionMask m;
    m.n = n;
    m.allow.assign(size_t(n) * n, 1);
    return m;
}

void AttentionMask::validate() const {
    require(n > 0 && allow.size() == size_t(n) * n, "AttentionMask: bad size");
    for (int q = 0; q < n; ++q) {
        bool any = false;
        for (int k = 0; k < n; ++k)
            if (at(q, k)) any = true;
        require(any, "AttentionMask: query row " + std::to_string(q) + " attends to nothing");
    }
}

AttnPlan AttentionMask::to_plan() const {
    validate();
    AttnPlan plan;
    plan.n = n;
    for (int q = 0; q < n; ++q) {
        std::vector<std::array<int, 2>> runs;
        int start = -1;
        for (int k = 0; k <= n; ++k) {
            bool on = k < n && at(q, k);
            if (on && start < 0) start = k;
            if (!on && start >= 0) {
                runs.push_back({start, k});
                start = -1;
            }
        }
        if (!plan.spans.empty() && plan.spans.back().cols == runs)
            plan.spans.back().row_end = q + 1;
        else
            plan.spans.push_back({q, q + 1, std::move(runs)});
    }
    return plan;
}

DiffTensor sdpa(DiffTensor q, DiffTensor k, DiffTensor v, const AttentionMask& mask, int heads) {
    require(mask.n == q.rows(), "sdpa: mask size does not match sequence length");
    return masked_attention(q, k, v, heads, mask.to_plan());
}

DiffTensor cga_attention(DiffTensor f, DiffTensor rays, const CgaTensors& p,
                         const AttnPlan& plan) {
    require(f.shape() == rays.shape(), "cga_attention: rays must match feature shape");
    int d = f.cols();
    auto qkv = split_cols(add_rowvec(matmul(f, p.w1), p.b1), {d, d, d});
    DiffTensor q = qkv[0], k = qkv[1], v = qkv[2];
    auto rg = split_cols(add_rowvec(matmul(add(q, rays), p.w2), p.b2), {d, d});
    DiffTensor q_res = rg[0], gate = rg[1];
    DiffTensor o = masked_attention(add(q, q_res), k, v, p.heads, plan);
    return add_rowvec(matmul(mul(o, sigmoid(gate)), p.w3), p.b3);
}

DiffTensor additive_attention(DiffTensor f, DiffTensor rays, const CgaTensors& p,
                              const AttnPlan& plan) {
    require(f.shape() == rays.shape(), "additive_attention: rays must match feature shape");
    int d = f.cols();
    auto qkv = split_cols(add_rowvec(matmul(add(f, rays), p.w1), p.b1), {d, d, d});
    DiffTensor o = masked_attention(qkv[0], qkv[1], qkv[2], p.heads, plan);
    return add_rowvec(matmul(o, p.w3), p.b3);
}

DiffTensor cga_block(DiffTensor x, DiffTensor rays, const BlockTensors& p, const AttnPlan& plan,
                     bool gated) {
    DiffTensor h = layer_norm(x, p.norm1_g, p.norm1_b);
    DiffTensor a = gated ? cga_attention(h, rays, p.attn, plan)
                         : additive_attention(h, rays, p.attn, plan);
    DiffTensor y = add(x, a);
    DiffTensor h2 = layer_norm(y, p.norm2_g, p.norm2_b);
    DiffTensor m = add_rowvec(
        matmul(gelu(add_rowvec(matmul(h2, p.mlp_w1), p.mlp_b1)), p.mlp_w2), p.mlp_b2);
    return add(y, m);
}

}  // namespace gac
