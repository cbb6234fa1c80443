// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#include "gac/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <fstream>

namespace gac {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;
using MapM = Eigen::Map<RowMat, 0, Stride>;
using MapC = Eigen::Map<const RowMat, 0, Stride>;

const Shape& DiffTensor::shape() const { return g->node(id).shape; }
const std::vector<double>& DiffTensor::val() const { return g->node(id).val; }
bool DiffTensor::has_grad() const { return !g->node(id).grad.empty(); }

const std::vector<double>& DiffTensor::grad() const {
    const Node& n = g->node(id);
    require(!n.grad.empty(), "DiffTensor::grad: node has no gradient (not on a loss path?)");
    return n.grad;
}

double DiffTensor::scalar() const {
    require(numel() == 1, "DiffTensor::scalar: tensor is not (1,1), got " + shape().str());
    return val()[0];
}

AttnPlan AttnPlan::full(int n) {
    AttnPlan p;
    p.n = n;
    p.spans.push_back({0, n, {{0, n}}});
    return p;
}

void AttnPlan::validate() const {
    require(n > 0, "AttnPlan: empty plan");
    int row = 0;
    for (const AttnSpan& s : spans) {
        require(s.row_begin == row && s.row_end > s.row_begin,
                "AttnPlan: spans must tile query rows in order");
        row = s.row_end;
        require(!s.cols.empty(), "AttnPlan: a span has no allowed keys");
        int prev_end = 0;
        for (const auto& run : s.cols) {
            require(run[0] >= prev_end && run[1] > run[0] && run[1] <= n,
                    "AttnPlan: key runs must be ascending, disjoint and in range");
            prev_end = run[1];
        }
    }
    require(row == n, "AttnPlan: spans do not cover all query rows");
}

size_t AttnPlan::pair_count() const {
    size_t total = 0;
    for (const AttnSpan& s : spans) {
        size_t w = 0;
        for (const auto& run : s.cols) w += size_t(run[1] - run[0]);
        total += size_t(s.row_end - s.row_begin) * w;
    }
    return total;
}

// --- Graph core ----------------------------------------------------------------

int Graph::add_node(Node n) {
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

void Graph::accumulate(int id, const double* delta, size_t count) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.empty()) return;
    require(n.grad.size() == count, "Graph::accumulate: size mismatch");
    for (size_t i = 0; i < count; ++i) n.grad[i] += delta[i];
}

DiffTensor Graph::constant(const Shape& s, std::vector<double> values) {
    require(values.size() == s.numel(),
            "Graph::constant: value count does not match shape " + s.str());
    Node n;
    n.shape = s;
    n.val = std::move(values);
    return {this, add_node(std::move(n))};
}

DiffTensor Graph::constant(const Shape& s, double fill) {
    Node n;
    n.shape = s;
    n.val.assign(s.numel(), fill);
    return {this, add_node(std::move(n))};
}

DiffTensor Graph::input(const Shape& s, std::vector<double> values) {
    DiffTensor t = constant(s, std::move(values));
    node(t.id).requires_grad = true;
    return t;
}

DiffTensor Graph::param(const ParamStore& store, const std::string& name) {
    const Param& p = store.get(name);
    DiffTensor t = constant(p.shape, p.value);
    node(t.id).requires_grad = true;
    node(t.id).param_name = name;
    return t;
}

void Graph::backward(const DiffTensor& loss) {
    require(loss.g == this, "Graph::backward: loss from another graph");
    require(loss.numel() == 1, "Graph::backward: loss must be scalar, got " + loss.shape().str());
    require(!backward_run_, "Graph::backward: backward already run on this graph");
    backward_run_ = true;
    if (!node(loss.id).requires_grad) return;  // nothing depends on parameters/inputs

    std::vector<char> live(nodes_.size(), 0);
    std::vector<int> stack{loss.id};
    live[size_t(loss.id)] = 1;
    while (!stack.empty()) {
        int id = stack.back();
        stack.pop_back();
        for (int p : nodes_[size_t(id)].parents)
            if (nodes_[size_t(p)].requires_grad && !live[size_t(p)]) {
                live[size_t(p)] = 1;
                stack.push_back(p);
            }
    }
    for (size_t i = 0; i < nodes_.size(); ++i)
        if (live[i]) nodes_[i].grad.assign(nodes_[i].val.size(), 0.0);
    node(loss.id).grad[0] = 1.0;
    for (int id = loss.id; id >= 0; --id)
        if (live[size_t(id)] && nodes_[size_t(id)].backward) nodes_[size_t(id)].backward(*this);
}

void Graph::collect_param_grads(ParamStore& store) const {
    for (const Node& n : nodes_) {
        if (n.param_name.empty() || n.grad.empty()) continue;
        Param& p = store.get(n.param_name);
        require(p.shape == n.shape, "collect_param_grads: shape drift for " + n.param_name);
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
}

// --- Op helpers ------------------------------------------------------------------

namespace {

DiffTensor fresh(Graph& g, const Shape& s, std::vector<int> parents) {
    Node n;
    n.shape = s;
    n.val.resize(s.numel());
    for (int p : parents)
        if (g.node(p).requires_grad) n.requires_grad = true;
    n.parents = std::move(parents);
    return {&g, g.add_node(std::move(n))};
}

Graph& same_graph(DiffTensor a, DiffTensor b) {
    require(a.g && a.g == b.g, "op: tensors belong to different graphs");
    return *a.g;
}

void check_shape(DiffTensor a, DiffTensor b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + a.shape().str() +
                                        " vs " + b.shape().str());
}

}  // namespace

// --- Elementwise / structural ------------------------------------------------------

DiffTensor add(DiffTensor a, DiffTensor b) {
    Graph& g = same_graph(a, b);
    check_shape(a, b, "add");
    DiffTensor out = fresh(g, a.shape(), {a.id, b.id});
    const auto& av = g.node(a.id).val;
    const auto& bv = g.node(b.id).val;
    auto& ov = g.node(out.id).val;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    int self = out.id, ai = a.id, bi = b.id;
    g.node(self).backward = [self, ai, bi](Graph& gg) {
        const auto& gr = gg.node(self).grad;
        gg.accumulate(ai, gr.data(), gr.size());
        gg.accumulate(bi, gr.data(), gr.size());
    };
    return out;
}

DiffTensor sub(DiffTensor a, DiffTensor b) {
    Graph& g = same_graph(a, b);
    check_shape(a, b, "sub");
    DiffTensor out = fresh(g, a.shape(), {a.id, b.id});
    const auto& av = g.node(a.id).val;
    const auto& bv = g.node(b.id).val;
    auto& ov = g.node(out.id).val;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    int self = out.id, ai = a.id, bi = b.id;
    g.node(self).backward = [self, ai, bi](Graph& gg) {
        const auto& gr = gg.node(self).grad;
        gg.accumulate(ai, gr.data(), gr.size());
        Node& bn = gg.node(bi);
        if (!bn.grad.empty())
            for (size_t i = 0; i < gr.size(); ++i) bn.grad[i] -= gr[i];
    };
    return out;
}

DiffTensor mul(DiffTensor a, DiffTensor b) {
    Graph& g = same_graph(a, b);
    check_shape(a, b, "mul");
    DiffTensor out = fresh(g, a.shape(), {a.id, b.id});
    const auto& av = g.node(a.id).val;
    const auto& bv = g.node(b.id).val;
    auto& ov = g.node(out.id).val;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    int self = out.id, ai = a.id, bi = b.id;
    g.node(self).backward = [self, ai, bi](Graph& gg) {
        const auto& gr = gg.node(self).grad;
        Node& an = gg.node(ai);
        Node& bn = gg.node(bi);
        if (!an.grad.empty())
            for (size_t i = 0; i < gr.size(); ++i) an.grad[i] += gr[i] * bn.val[i];
        if (!bn.grad.empty())
            for (size_t i = 0; i < gr.size(); ++i) bn.grad[i] += gr[i] * an.val[i];
    };
    return out;
}

DiffTensor scale(DiffTensor a, double c) {
    Graph& g = *a.g;
    DiffTensor out = fresh(g, a.shape(), {a.id});
    const auto& av = g.node(a.id).val;
    auto& ov = g.node(out.id).val;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    int self = out.id, ai = a.id;
    g.node(self).backward = [self, ai, c](Graph& gg) {
        const auto& gr = gg.node(self).grad;
        Node& an = gg.node(ai);
        if (!an.grad.empty())
            for (size_t i = 0; i < gr.size(); ++i) an.grad[i] += gr[i] * c;
    };
    return out;
}

DiffTensor add_rowvec(DiffTensor a, DiffTensor b) {
    Graph& g = same_graph(a, b);
    require(b.rows() == 1 && b.cols() == a.cols(),
            "add_rowvec: bias must be (1," + std::to_string(a.cols()) + "), got " +
                b.shape().str());
    DiffTensor out = fresh(g, a.shape(), {a.id, b.id});
    int rows = a.rows(), cols = a.cols();
    const auto& av = g.node(a.id).val;
    const auto& bv = g.node(b.id).val;
    auto& ov = g.node(out.id).val;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            ov[size_t(r) * cols + c] = av[size_t(r) * cols + c] + bv[size_t(c)];
    int self = out.id, ai = a.id, bi = b.id;
    g.node(self).backward = [self, ai, bi, rows, cols](Graph& gg) {
        const auto& gr = gg.node(self).grad;
        gg.accumulate(ai, gr.data(), gr.size());
        Node& bn = gg.node(bi);
        if (!bn.grad.empty())
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) bn.grad[size_t(c)] += gr[size_t(r) * cols + c];
    };
    return out;
}

DiffTensor matmul(DiffTensor a, DiffTensor b) {
    Graph& g = same_graph(a, b);
    require(a.cols() == b.rows(),
            "matmul: inner dimensions differ, " + a.shape().str() + " x " + b.shape().str());
    int n = a.rows(), k = a.cols(), m = b.cols();
    DiffTensor out = fresh(g, {n, m}, {a.id, b.id});
    {
        MapC A(g.node(a.id).val.data(), n, k, Stride(k));
        MapC B(g.node(b.id).val.data(), k, m, Stride(m));
        MapM C(g.node(out.id).val.data(), n, m, Stride(m));
        C.noalias() = A * B;
    }
    int self = out.id, ai = a.id, bi = b.id;
    g.node(self).backward = [self, ai, bi, n, k, m](Graph& gg) {
        MapC dC(gg.node(self).grad.data(), n, m, Stride(m));
        Node& an = gg.node(ai);
        Node& bn = gg.node(bi);
        if (!an.grad.empty()) {
            MapC B(bn.val.data(), k, m, Stride(m));
            MapM dA(an.grad.data(), n, k, Stride(k));
            dA.noalias() += dC * B.transpose();
        }
        if (!bn.grad.empty()) {
            MapC A(an.val.data(), n, k, Stride(k));
            MapM dB(bn.grad.data(), k, m, Stride(m));
            dB.noalias() += A.transpose() * dC;
        }
    };
    return out;
}

DiffTensor transpose(DiffTensor a) {
    Graph& g = *a.g;
    int n = a.rows(), m = a.cols();
    DiffTensor out = fresh(g, {m, n}, {a.id});
    const auto& av = g.node(a.id).val;
    auto& ov = g.node(out.id).val;
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < m; ++c) ov[size_t(c) * n + r] = av[size_t(r) * m + c];
    int self = out.id, ai = a.id;
    g.node(self).backward = [self, ai, n, m](Graph& gg) {
        Node& an = gg.node(ai);
        if (an.grad.empty()) return;
        const auto& gr = gg.node(self).grad;
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < m; ++c) an.grad[size_t(r) * m + c] += gr[size_t(c) * n + r];
    };
    return out;
}

DiffTensor reshape(DiffTensor a, const Shape& s) {
    Graph& g = *a.g;
    require(s.numel() == a.numel(),
            "reshape: element count mismatch " + a.shape().str() + " -> " + s.str());
    DiffTensor out = fresh(g, s, {a.id});
    g.node(out.id).val = g.node(a.id).val;
    int self = out.id, ai = a.id;
    g.node(self).backward = [self, ai](Graph& gg) {
        const auto& gr = gg.node(self).grad;
        gg.accumulate(ai, gr.data(), gr.size());
    };
    return out;
}

DiffTensor concat_rows(const std::vector<DiffTensor>& parts) {
    require(!parts.empty(), "concat_rows: no parts");
    Graph& g = *parts[0].g;
    int cols = parts[0].cols(), rows = 0;
    std::vector<int> ids;
    for (const DiffTensor& p : parts) {
        require(p.g == &g, "concat_rows: tensors from different graphs");
        require(p.cols() == cols, "concat_rows: column mismatch");
        rows += p.rows();
        ids.push_back(p.id);
    }
    DiffTensor out = fresh(g, {rows, cols}, ids);
    auto& ov = g.node(out.id).val;
    size_t off = 0;
    for (const DiffTensor& p : parts) {
        const auto& pv = g.node(p.id).val;
        std::memcpy(ov.data() + off, pv.data(), pv.size() * sizeof(double));
        off += pv.size();
    }
    int self = out.id;
    g.node(self).backward = [self, ids](Graph& gg) {
        const auto& gr = gg.node(self).grad;
        size_t off2 = 0;
        for (int id : ids) {
            size_t count = gg.node(id).val.size();
            gg.accumulate(id, gr.data() + off2, count);
            off2 += count;
        }
    };
    return out;
}

DiffTensor concat_cols(const std::vector<DiffTensor>& parts) {
    require(!parts.empty(), "concat_cols: no parts");
    Graph& g = *parts[0].g;
    int rows = parts[0].rows(), cols = 0;
    std::vector<int> ids;
    std::vector<int> widths;
    for (const DiffTensor& p : parts) {
        require(p.g == &g, "concat_cols: tensors from different graphs");
        require(p.rows() == rows, "concat_cols: row mismatch");
        cols += p.cols();
        ids.push_back(p.id);
        widths.push_back(p.cols());
    }
    DiffTensor out = fresh(g, {rows, cols}, ids);
    auto& ov = g.node(out.id).val;
    int off = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
        const auto& pv = g.node(ids[i]).val;
        for (int r = 0; r < rows; ++r)
            std::memcpy(ov.data() + size_t(r) * cols + off, pv.data() + size_t(r) * widths[i],
                        size_t(widths[i]) * sizeof(double));
        off += widths[i];
    }
    int self = out.id;
    g.node(self).backward = [self, ids, widths, rows, cols](Graph& gg) {
        const auto& gr = gg.node(self).grad;
        int off2 = 0;
        for (size_t i = 0; i < ids.size(); ++i) {
            Node& pn = gg.node(ids[i]);
            if (!pn.grad.empty())
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < widths[i]; ++c)
                        pn.grad[size_t(r) * widths[i] + c] += gr[size_t(r) * cols + off2 + c];
            off2 += widths[i];
        }
    };
    return out;
}

DiffTensor slice_rows(DiffTensor a, int row_begin, int row_end) {
    Graph& g = *a.g;
    require(0 <= row_begin && row_begin < row_end && row_end <= a.rows(),
            "slice_rows: bad range [" + std::to_string(row_begin) + "," +
                std::to_string(row_end) + ") for " + a.shape().str());
    int cols = a.cols(), rows = row_end - row_begin;
    DiffTensor out = fresh(g, {rows, cols}, {a.id});
    const auto& av = g.node(a.id).val;
    auto& ov = g.node(out.id).val;
    std::memcpy(ov.data(), av.data() + size_t(row_begin) * cols, ov.size() * sizeof(double));
    int self = out.id, ai = a.id;
    g.node(self).backward = [self, ai, row_begin, cols](Graph& gg) {
        Node& an = gg.node(ai);
        if (an.grad.empty()) return;
        const auto& gr = gg.node(self).grad;
        double* dst = an.grad.data() + size_t(row_begin) * cols;
        for (size_t i = 0; i < gr.size(); ++i) dst[i] += gr[i];
    };
    return out;
}

std::vector<DiffTensor> split_rows(DiffTensor a, const std::vector<int>& sizes) {
    int total = 0;
    for (int s : sizes) total += s;
    require(total == a.rows(), "split_rows: sizes do not sum to row count");
    std::vector<DiffTensor> parts;
    int r = 0;
    for (int s : sizes) {
        parts.push_back(slice_rows(a, r, r + s));
        r += s;
    }
    return parts;
}

std::vector<DiffTensor> split_cols(DiffTensor a, const std::vector<int>& sizes) {
    Graph& g = *a.g;
    int total = 0;
    for (int s : sizes) total += s;
    require(total == a.cols(), "split_cols: sizes do not sum to column count");
    std::vector<DiffTensor> parts;
    int rows = a.rows(), cols = a.cols(), off = 0;
    for (int s : sizes) {
        DiffTensor out = fresh(g, {rows, s}, {a.id});
        const auto& av = g.node(a.id).val;
        auto& ov = g.node(out.id).val;
        for (int r = 0; r < rows; ++r)
            std::memcpy(ov.data() + size_t(r) * s, av.data() + size_t(r) * cols + off,
                        size_t(s) * sizeof(double));
        int self = out.id, ai = a.id, o = off, w = s;
        g.node(self).backward = [self, ai, o, w, rows, cols](Graph& gg) {
            Node& an = gg.node(ai);
            if (an.grad.empty()) return;
            const auto& gr = gg.node(self).grad;
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < w; ++c)
                    an.grad[size_t(r) * cols + o + c] += gr[size_t(r) * w + c];
        };
        parts.push_back(out);
        off += s;
    }
    return parts;
}

DiffTensor gather(DiffTensor a, const std::vector<int64_t>& indices, const Shape& out_shape) {
    Graph& g = *a.g;
    require(indices.size() == out_shape.numel(), "gather: index count does not match out shape");
    size_t limit = a.numel();
    for (int64_t idx : indices)
        require(idx >= 0 && size_t(idx) < limit, "gather: index out of range");
    DiffTensor out = fresh(g, out_shape, {a.id});
    const auto& av = g.node(a.id).val;
    auto& ov = g.node(out.id).val;
    for (size_t i = 0; i < indices.size(); ++i) ov[i] = av[size_t(indices[i])];
    int self = out.id, ai = a.id;
    g.node(self).backward = [self, ai, indices](Graph& gg) {
        Node& an = gg.node(ai);
        if (an.grad.empty()) return;
        const auto& gr = gg.node(self).grad;
        for (size_t i = 0; i < indices.size(); ++i) an.grad[size_t(indices[i])] += gr[i];
    };
    return out;
}

// --- Nonlinearities and reductions -----------------------------------------------

DiffTensor sigmoid(DiffTensor a) {
    Graph& g = *a.g;
    DiffTensor out = fresh(g, a.shape(), {a.id});
    const auto& av = g.node(a.id).val;
    auto& ov = g.node(out.id).val;
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = 1.0 / (1.0 + std::exp(-av[i]));
    int self = out.id, ai = a.id;
    g.node(self).backward = [self, ai](Graph& gg) {
        Node& an = gg.node(ai);
        if (an.grad.empty()) return;
        const Node& sn = gg.node(self);
        for (size_t i = 0; i < sn.grad.size(); ++i)
            an.grad[i] += sn.grad[i] * sn.val[i] * (1.0 - sn.val[i]);
    };
    return out;
}

DiffTensor gelu(DiffTensor a) {
    Graph& g = *a.g;
    DiffTensor out = fresh(g, a.shape(), {a.id});
    const auto& av = g.node(a.id).val;
    auto& ov = g.node(out.id).val;
    for (size_t i = 0; i < ov.size(); ++i)
        ov[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * M_SQRT1_2));
    int self = out.id, ai = a.id;
    g.node(self).backward = [self, ai](Graph& gg) {
        Node& an = gg.node(ai);
        if (an.grad.empty()) return;
        const auto& gr = gg.node(self).grad;
        const auto& av2 = an.val;
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (size_t i = 0; i < gr.size(); ++i) {
            double x = av2[i];
            double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
            double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            an.grad[i] += gr[i] * (cdf + x * pdf);
        }
    };
    return out;
}

DiffTensor row_softmax(DiffTensor a) {
    Graph& g = *a.g;
    int rows = a.rows(), cols = a.cols();
    DiffTensor out = fresh(g, a.shape(), {a.id});
    const auto& av = g.node(a.id).val;
    auto& ov = g.node(out.id).val;
    for (int r = 0; r < rows; ++r) {
        const double* x = av.data() + size_t(r) * cols;
        double* y = ov.data() + size_t(r) * cols;
        double mx = x[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        double sum = 0;
        for (int c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            sum += y[c];
        }
        for (int c = 0; c < cols; ++c) y[c] /= sum;
    }
    int self = out.id, ai = a.id;
    g.node(self).backward = [self, ai, rows, cols](Graph& gg) {
        Node& an = gg.node(ai);
        if (an.grad.empty()) return;
        const Node& sn = gg.node(self);
        for (int r = 0; r < rows; ++r) {
            const double* y = sn.val.data() + size_t(r) * cols;
            const double* dy = sn.grad.data() + size_t(r) * cols;
            double dot = 0;
            for (int c = 0; c < cols; ++c) dot += y[c] * dy[c];
            double* dx = an.grad.data() + size_t(r) * cols;
            for (int c = 0; c < cols; ++c) dx[c] += y[c] * (dy[c] - dot);
        }
    };
    return out;
}

DiffTensor layer_norm(DiffTensor a, DiffTensor gain, DiffTensor bias, double eps) {
    Graph& g = same_graph(a, gain);
    same_graph(a, bias);
    int rows = a.rows(), cols = a.cols();
    require(gain.rows() == 1 && gain.cols() == cols && bias.rows() == 1 && bias.cols() == cols,
            "layer_norm: gain/bias must be (1," + std::to_string(cols) + ")");
    DiffTensor out = fresh(g, a.shape(), {a.id, gain.id, bias.id});
    Node& on = g.node(out.id);
    on.aux.resize(size_t(rows) * cols + rows);  // xhat, then 1/sigma per row
    const auto& av = g.node(a.id).val;
    const auto& gv = g.node(gain.id).val;
    const auto& bv = g.node(bias.id).val;
    for (int r = 0; r < rows; ++r) {
        const double* x = av.data() + size_t(r) * cols;
        double mean = 0;
        for (int c = 0; c < cols; ++c) mean += x[c];
        mean /= cols;
        double var = 0;
        for (int c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
        var /= cols;
        double inv = 1.0 / std::sqrt(var + eps);
        double* xhat = on.aux.data() + size_t(r) * cols;
        double* y = on.val.data() + size_t(r) * cols;
        for (int c = 0; c < cols; ++c) {
            xhat[c] = (x[c] - mean) * inv;
            y[c] = gv[size_t(c)] * xhat[c] + bv[size_t(c)];
        }
        on.aux[size_t(rows) * cols + r] = inv;
    }
    int self = out.id, ai = a.id, gi = gain.id, bi = bias.id;
    g.node(self).backward = [self, ai, gi, bi, rows, cols](Graph& gg) {
        const Node& sn = gg.node(self);
        Node& an = gg.node(ai);
        Node& gn = gg.node(gi);
        Node& bn = gg.node(bi);
        const double* gv2 = gn.val.data();
        std::vector<double> w(static_cast<size_t>(cols));
        for (int r = 0; r < rows; ++r) {
            const double* dy = sn.grad.data() + size_t(r) * cols;
            const double* xhat = sn.aux.data() + size_t(r) * cols;
            double inv = sn.aux[size_t(rows) * cols + r];
            if (!gn.grad.empty())
                for (int c = 0; c < cols; ++c) gn.grad[size_t(c)] += dy[c] * xhat[c];
            if (!bn.grad.empty())
                for (int c = 0; c < cols; ++c) bn.grad[size_t(c)] += dy[c];
            if (!an.grad.empty()) {
                double mw = 0, mwx = 0;
                for (int c = 0; c < cols; ++c) {
                    w[size_t(c)] = dy[c] * gv2[c];
                    mw += w[size_t(c)];
                    mwx += w[size_t(c)] * xhat[c];
                }
                mw /= cols;
                mwx /= cols;
                double* dx = an.grad.data() + size_t(r) * cols;
                for (int c = 0; c < cols; ++c)
                    dx[c] += inv * (w[size_t(c)] - mw - xhat[c] * mwx);
            }
        }
    };
    return out;
}

namespace {

DiffTensor reduce_all(DiffTensor a, double value,
                      std::function<void(Graph&, int, int)> backward_fn) {
    Graph& g = *a.g;
    DiffTensor out = fresh(g, {1, 1}, {a.id});
    g.node(out.id).val[0] = value;
    int self = out.id, ai = a.id;
    g.node(self).backward = [self, ai, backward_fn](Graph& gg) { backward_fn(gg, self, ai); };
    return out;
}

}  // namespace

DiffTensor mean_all(DiffTensor a) {
    const auto& av = a.val();
    require(!av.empty(), "mean_all: empty tensor");
    double s = 0;
    for (double v : av) s += v;
    double inv = 1.0 / double(av.size());
    return reduce_all(a, s * inv, [inv](Graph& gg, int self, int ai) {
        Node& an = gg.node(ai);
        if (an.grad.empty()) return;
        double gr = gg.node(self).grad[0] * inv;
        for (double& d : an.grad) d += gr;
    });
}

DiffTensor sum_all(DiffTensor a) {
    const auto& av = a.val();
    double s = 0;
    for (double v : av) s += v;
    return reduce_all(a, s, [](Graph& gg, int self, int ai) {
        Node& an = gg.node(ai);
        if (an.grad.empty()) return;
        double gr = gg.node(self).grad[0];
        for (double& d : an.grad) d += gr;
    });
}

DiffTensor sum_squares(DiffTensor a) {
    const auto& av = a.val();
    double s = 0;
    for (double v : av) s += v * v;
    return reduce_all(a, s, [](Graph& gg, int self, int ai) {
        Node& an = gg.node(ai);
        if (an.grad.empty()) return;
        double gr = gg.node(self).grad[0];
        for (size_t i = 0; i < an.grad.size(); ++i) an.grad[i] += 2.0 * gr * an.val[i];
    });
}

// --- Fused masked attention ---------------------------------------------------------

namespace {

int span_width(const AttnSpan& s) {
    int w = 0;
    for (const auto& run : s.cols) w += run[1] - run[0];
    return w;
}

}  // namespace

DiffTensor masked_attention(DiffTensor q, DiffTensor k, DiffTensor v, int heads,
                            const AttnPlan& plan) {
    Graph& g = same_graph(q, k);
    same_graph(q, v);
    check_shape(q, k, "masked_attention");
    check_shape(q, v, "masked_attention");
    int n = q.rows(), d = q.cols();
    require(heads > 0 && d % heads == 0, "masked_attention: dim not divisible by head count");
    plan.validate();
    require(plan.n == n, "masked_attention: plan size does not match sequence length");
    int dh = d / heads;
    double scl = 1.0 / std::sqrt(double(dh));

    DiffTensor out = fresh(g, q.shape(), {q.id, k.id, v.id});
    Node& on = g.node(out.id);
    std::fill(on.val.begin(), on.val.end(), 0.0);
    size_t aux_total = plan.pair_count() * size_t(heads);
    on.aux.resize(aux_total);

    const double* Qd = g.node(q.id).val.data();
    const double* Kd = g.node(k.id).val.data();
    const double* Vd = g.node(v.id).val.data();
    double* Od = on.val.data();
    double* auxd = on.aux.data();

    std::vector<double> sbuf;
    size_t aux_off = 0;
    for (const AttnSpan& s : plan.spans) {
        int rows = s.row_end - s.row_begin, w = span_width(s);
        sbuf.resize(size_t(rows) * w);
        for (int hd = 0; hd < heads; ++hd) {
            MapC Qh(Qd + size_t(s.row_begin) * d + size_t(hd) * dh, rows, dh, Stride(d));
            int off = 0;
            for (const auto& run : s.cols) {
                int wr = run[1] - run[0];
                MapC Kh(Kd + size_t(run[0]) * d + size_t(hd) * dh, wr, dh, Stride(d));
                MapM Sb(sbuf.data() + off, rows, wr, Stride(w));
                Sb.noalias() = Qh * Kh.transpose() * scl;
                off += wr;
            }
            double* A = auxd + aux_off;
            for (int r = 0; r < rows; ++r) {
                const double* srow = sbuf.data() + size_t(r) * w;
                double* arow = A + size_t(r) * w;
                double mx = srow[0];
                for (int c = 1; c < w; ++c) mx = std::max(mx, srow[c]);
                double sum = 0;
                for (int c = 0; c < w; ++c) {
                    arow[c] = std::exp(srow[c] - mx);
                    sum += arow[c];
                }
                for (int c = 0; c < w; ++c) arow[c] /= sum;
            }
            MapM Oh(Od + size_t(s.row_begin) * d + size_t(hd) * dh, rows, dh, Stride(d));
            off = 0;
            for (const auto& run : s.cols) {
                int wr = run[1] - run[0];
                MapC Vh(Vd + size_t(run[0]) * d + size_t(hd) * dh, wr, dh, Stride(d));
                MapC Am(A + off, rows, wr, Stride(w));
                Oh.noalias() += Am * Vh;
                off += wr;
            }
            aux_off += size_t(rows) * w;
        }
    }

    int self = out.id, qi = q.id, ki = k.id, vi = v.id;
    AttnPlan plan_copy = plan;
    g.node(self).backward = [self, qi, ki, vi, heads, dh, d, scl, plan_copy](Graph& gg) {
        const Node& sn = gg.node(self);
        Node& qn = gg.node(qi);
        Node& kn = gg.node(ki);
        Node& vn = gg.node(vi);
        const double* dOd = sn.grad.data();
        const double* auxd2 = sn.aux.data();
        std::vector<double> dabuf;
        size_t aux_off2 = 0;
        for (const AttnSpan& s : plan_copy.spans) {
            int rows = s.row_end - s.row_begin, w = span_width(s);
            dabuf.resize(size_t(rows) * w);
            for (int hd = 0; hd < heads; ++hd) {
                const double* A = auxd2 + aux_off2;
                MapC dOh(dOd + size_t(s.row_begin) * d + size_t(hd) * dh, rows, dh, Stride(d));
                int off = 0;
                for (const auto& run : s.cols) {
                    int wr = run[1] - run[0];
                    if (!vn.grad.empty()) {
                        MapM dVh(vn.grad.data() + size_t(run[0]) * d + size_t(hd) * dh, wr, dh,
                                 Stride(d));
                        MapC Am(A + off, rows, wr, Stride(w));
                        dVh.noalias() += Am.transpose() * dOh;
                    }
                    MapC Vh(vn.val.data() + size_t(run[0]) * d + size_t(hd) * dh, wr, dh,
                            Stride(d));
                    MapM dAb(dabuf.data() + off, rows, wr, Stride(w));
                    dAb.noalias() = dOh * Vh.transpose();
                    off += wr;
                }
                // softmax backward, in place over the compact row
                for (int r = 0; r < rows; ++r) {
                    const double* arow = A + size_t(r) * w;
                    double* darow = dabuf.data() + size_t(r) * w;
                    double dot = 0;
                    for (int c = 0; c < w; ++c) dot += arow[c] * darow[c];
                    for (int c = 0; c < w; ++c) darow[c] = arow[c] * (darow[c] - dot);
                }
                off = 0;
                for (const auto& run : s.cols) {
                    int wr = run[1] - run[0];
                    MapC dSb(dabuf.data() + off, rows, wr, Stride(w));
                    if (!qn.grad.empty()) {
                        MapC Kh(kn.val.data() + size_t(run[0]) * d + size_t(hd) * dh, wr, dh,
                                Stride(d));
                        MapM dQh(qn.grad.data() + size_t(s.row_begin) * d + size_t(hd) * dh, rows,
                                 dh, Stride(d));
                        dQh.noalias() += dSb * Kh * scl;
                    }
                    if (!kn.grad.empty()) {
                        MapC Qh(qn.val.data() + size_t(s.row_begin) * d + size_t(hd) * dh, rows,
                                dh, Stride(d));
                        MapM dKh(kn.grad.data() + size_t(run[0]) * d + size_t(hd) * dh, wr, dh,
                                 Stride(d));
                        dKh.noalias() += dSb.transpose() * Qh * scl;
                    }
                    off += wr;
                }
                aux_off2 += size_t(rows) * w;
            }
        }
    };
    return out;
}

// --- ParamStore -----------------------------------------------------------------------

size_t ParamStore::index(const std::string& name) const {
    for (size_t i = 0; i < params_.size(); ++i)
        if (params_[i].name == name) return i;
    throw InvariantError("ParamStore: unknown parameter '" + name + "'");
}

Param& ParamStore::add(const std::string& name, const Shape& s, std::vector<double> values) {
    require(!name.empty(), "ParamStore::add: empty name");
    for (const Param& p : params_)
        require(p.name != name, "ParamStore::add: duplicate parameter '" + name + "'");
    require(values.size() == s.numel(), "ParamStore::add: value count mismatch for " + name);
    Param p;
    p.name = name;
    p.shape = s;
    p.value = std::move(values);
    p.grad.assign(s.numel(), 0.0);
    p.m.assign(s.numel(), 0.0);
    p.v.assign(s.numel(), 0.0);
    params_.push_back(std::move(p));
    return params_.back();
}

Param& ParamStore::add(const std::string& name, const Shape& s, double fill) {
    return add(name, s, std::vector<double>(s.numel(), fill));
}

Param& ParamStore::get(const std::string& name) { return params_[index(name)]; }
const Param& ParamStore::get(const std::string& name) const { return params_[index(name)]; }

bool ParamStore::has(const std::string& name) const {
    for (const Param& p : params_)
        if (p.name == name) return true;
    return false;
}

void ParamStore::remove(const std::string& name) {
    params_.erase(params_.begin() + long(index(name)));
}

void ParamStore::zero_grad() {
    for (Param& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
}

size_t ParamStore::total_values() const {
    size_t n = 0;
    for (const Param& p : params_) n += p.value.size();
    return n;
}

namespace {

constexpr char kCkptMagic[8] = {'G', 'A', 'C', 'C', 'K', 'P', 'T', '\n'};

void put_u32(std::ofstream& os, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                          (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::ifstream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated checkpoint: " + path);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

void put_f64(std::ofstream& os, double d) {
    uint64_t v;
    std::memcpy(&v, &d, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::ifstream& is, const std::string& path) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("truncated checkpoint: " + path);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

}  // namespace

void ParamStore::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kCkptMagic, 8);
    put_u32(os, 1);  // version
    put_u32(os, uint32_t(params_.size()));
    for (const Param& p : params_) {
        put_u32(os, uint32_t(p.name.size()));
        os.write(p.name.data(), std::streamsize(p.name.size()));
        put_u32(os, uint32_t(p.shape.rows));
        put_u32(os, uint32_t(p.shape.cols));
        for (double d : p.value) put_f64(os, d);
    }
    if (!os) throw IoError("write failed: " + path);
}

void ParamStore::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + path);
    uint32_t version = get_u32(is, path);
    if (version != 1) throw IoError("unsupported checkpoint version in: " + path);
    uint32_t count = get_u32(is, path);
    std::vector<Param> loaded;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = get_u32(is, path);
        if (name_len > 4096) throw IoError("corrupt checkpoint name length: " + path);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw IoError("truncated checkpoint: " + path);
        int rows = int(get_u32(is, path));
        int cols = int(get_u32(is, path));
        if (rows <= 0 || cols <= 0) throw IoError("corrupt checkpoint shape: " + path);
        Param p;
        p.name = name;
        p.shape = {rows, cols};
        p.value.resize(size_t(rows) * cols);
        for (double& d : p.value) d = get_f64(is, path);
        p.grad.assign(p.value.size(), 0.0);
        p.m.assign(p.value.size(), 0.0);
        p.v.assign(p.value.size(), 0.0);
        loaded.push_back(std::move(p));
    }
    params_ = std::move(loaded);
}

std::vector<double> uniform_init(Rng& rng, size_t n, double bound) {
    std::vector<double> v(n);
    for (double& d : v) d = rng.uniform(-bound, bound);
    return v;
}

void Adam::step(ParamStore& store) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (Param& p : store.all()) {
        for (size_t i = 0; i < p.value.size(); ++i) {
            double g = p.grad[i];
            p.m[i] = cfg_.beta1 * p.m[i] + (1.0 - cfg_.beta1) * g;
            p.v[i] = cfg_.beta2 * p.v[i] + (1.0 - cfg_.beta2) * g * g;
            double mhat = p.m[i] / bc1;
            double vhat = p.v[i] / bc2;
            p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

double finite_diff_check(const ScalarFn& f, const Shape& xshape, const std::vector<double>& x0,
                         double h) {
    require(x0.size() == xshape.numel(), "finite_diff_check: x0 does not match shape");
    require(h > 0, "finite_diff_check: h must be positive");

    auto eval = [&](const std::vector<double>& x) {
        Graph g;
        DiffTensor xt = g.input(xshape, x);
        DiffTensor loss = f(g, xt);
        require(loss.numel() == 1, "finite_diff_check: f must return a scalar");
        return loss.scalar();
    };

    Graph g1;
    DiffTensor xt = g1.input(xshape, x0);
    DiffTensor loss = f(g1, xt);
    require(loss.numel() == 1, "finite_diff_check: f must return a scalar");
    double v1 = loss.scalar();
    double v2 = eval(x0);
    require(std::memcmp(&v1, &v2, sizeof(double)) == 0,
            "finite_diff_check: forward pass is nondeterministic");
    g1.backward(loss);

    std::vector<double> analytic(x0.size(), 0.0);
    if (xt.has_grad()) analytic = xt.grad();

    std::vector<double> numeric(x0.size(), 0.0);
    std::vector<double> x = x0;
    for (size_t i = 0; i < x.size(); ++i) {
        double orig = x[i];
        x[i] = orig + h;
        double fp = eval(x);
        x[i] = orig - h;
        double fm = eval(x);
        x[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * h);
    }

    double scale_mag = 0.0;
    for (size_t i = 0; i < x.size(); ++i)
        scale_mag = std::max({scale_mag, std::abs(analytic[i]), std::abs(numeric[i])});
    double denom = std::max(scale_mag, 1e-8);
    double max_err = 0.0;
    for (size_t i = 0; i < x.size(); ++i)
        max_err = std::max(max_err, std::abs(analytic[i] - numeric[i]) / denom);
    return max_err;
}

}  // namespace gac
