// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "gac/common.hpp"

namespace gac {

// Reverse-mode automatic differentiation over dense double-precision
// matrices. Graphs are rebuilt per step (define-by-run): every op evaluates
// eagerly and records a closure that propagates adjoints. All reductions run
// in a fixed order, so results are bit-reproducible for identical inputs.

struct Shape {
    int rows = 0;
    int cols = 0;

    size_t numel() const { return size_t(rows) * size_t(cols); }
    bool operator==(const Shape&) const = default;
    std::string str() const {
        return "(" + std::to_string(rows) + "," + std::to_string(cols) + ")";
    }
};

class Graph;
class ParamStore;

struct DiffTensor {
    Graph* g = nullptr;
    int id = -1;

    const Shape& shape() const;
    int rows() const { return shape().rows; }
    int cols() const { return shape().cols; }
    size_t numel() const { return shape().numel(); }
    const std::vector<double>& val() const;
    // Adjoint after Graph::backward. Throws if this node required no gradient.
    const std::vector<double>& grad() const;
    bool has_grad() const;
    double scalar() const;  // value of a (1,1) tensor
};

struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;  // allocated lazily during backward
    std::vector<double> aux;   // op-specific forward stash (e.g. attention weights)
    std::vector<int> parents;
    std::function<void(Graph&)> backward;
    bool requires_grad = false;
    std::string param_name;  // non-empty for parameter leaves
};

// Sparse attention mask in run-length form: each span owns a contiguous range
// of query rows and lists the key-column runs those rows may attend to. Spans
// must tile [0, n) in ascending order and every span needs at least one
// non-empty run. Masked-out pairs are never computed, which matches an
// additive -1e9 score bias exactly (the softmax weight underflows to zero).
struct AttnSpan {
    int row_begin = 0;
    int row_end = 0;
    std::vector<std::array<int, 2>> cols;  // [begin, end) runs, ascending, disjoint
};

struct AttnPlan {
    int n = 0;
    std::vector<AttnSpan> spans;

    static AttnPlan full(int n);
    void validate() const;
    size_t pair_count() const;  // number of computed (query, key) pairs
};

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Non-differentiable leaf.
    DiffTensor constant(const Shape& s, std::vector<double> values);
    DiffTensor constant(const Shape& s, double fill = 0.0);
    // Differentiable leaf that is not a parameter (e.g. pixels under test).
    DiffTensor input(const Shape& s, std::vector<double> values);
    // Differentiable leaf initialized from a named parameter. Gradients flow
    // back to the store via collect_param_grads; instantiating the same
    // parameter twice in one graph accumulates both contributions.
    DiffTensor param(const ParamStore& store, const std::string& name);

    // Reverse pass from a scalar loss. May be called once per graph.
    // Parameters with no path to the loss keep zero gradients.
    void backward(const DiffTensor& loss);
    void collect_param_grads(ParamStore& store) const;

    size_t size() const { return nodes_.size(); }
    Node& node(int id) { return nodes_[size_t(id)]; }
    const Node& node(int id) const { return nodes_[size_t(id)]; }
    int add_node(Node n);
    // Adds delta into id's gradient if that node participates in backward.
    void accumulate(int id, const double* delta, size_t count);

private:
    std::vector<Node> nodes_;
    bool backward_run_ = false;
};

// --- Elementwise and structural ops -----------------------------------------

DiffTensor add(DiffTensor a, DiffTensor b);
DiffTensor sub(DiffTensor a, DiffTensor b);
DiffTensor mul(DiffTensor a, DiffTensor b);  // elementwise
DiffTensor scale(DiffTensor a, double c);
// (n,m) + (1,m), broadcast over rows.
DiffTensor add_rowvec(DiffTensor a, DiffTensor b);
DiffTensor matmul(DiffTensor a, DiffTensor b);
DiffTensor transpose(DiffTensor a);
DiffTensor reshape(DiffTensor a, const Shape& s);
DiffTensor concat_rows(const std::vector<DiffTensor>& parts);
DiffTensor concat_cols(const std::vector<DiffTensor>& parts);
std::vector<DiffTensor> split_rows(DiffTensor a, const std::vector<int>& sizes);
std::vector<DiffTensor> split_cols(DiffTensor a, const std::vector<int>& sizes);
DiffTensor slice_rows(DiffTensor a, int row_begin, int row_end);
// out.flat[i] = a.flat[indices[i]]; backward scatter-adds in index order.
DiffTensor gather(DiffTensor a, const std::vector<int64_t>& indices, const Shape& out_shape);

// --- Nonlinearities and reductions -------------------------------------------

DiffTensor sigmoid(DiffTensor a);
DiffTensor gelu(DiffTensor a);  // exact erf form
DiffTensor row_softmax(DiffTensor a);
// Per-row normalization over columns with learnable gain/bias of shape (1,m).
DiffTensor layer_norm(DiffTensor a, DiffTensor gain, DiffTensor bias, double eps = 1e-5);
DiffTensor mean_all(DiffTensor a);   // (1,1)
DiffTensor sum_all(DiffTensor a);    // (1,1)
DiffTensor sum_squares(DiffTensor a);  // (1,1)

// Fused multi-head scaled-dot-product attention. q, k, v are (n, d) with d
// divisible by heads; rows are split into heads after the linear maps. Only
// (query, key) pairs allowed by the plan are computed. Scores are scaled by
// 1/sqrt(d/heads); attention weights are stashed for the backward pass.
DiffTensor masked_attention(DiffTensor q, DiffTensor k, DiffTensor v, int heads,
                            const AttnPlan& plan);

// --- Parameters and optimization ---------------------------------------------

struct Param {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<double> m;  // Adam first moment
    std::vector<double> v;  // Adam second moment
};

class ParamStore {
public:
    Param& add(const std::string& name, const Shape& s, std::vector<double> values);
    Param& add(const std::string& name, const Shape& s, double fill = 0.0);
    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;
    bool has(const std::string& name) const;
    void remove(const std::string& name);
    void zero_grad();
    size_t count() const { return params_.size(); }
    size_t total_values() const;
    const std::vector<Param>& all() const { return params_; }
    std::vector<Param>& all() { return params_; }

    // Checkpoint: magic, version, then name/shape/values per parameter in
    // store order. Doubles are written little-endian and round-trip exactly.
    void save(const std::string& path) const;
    void load(const std::string& path);  // replaces current contents

private:
    std::vector<Param> params_;
    size_t index(const std::string& name) const;
};

std::vector<double> uniform_init(Rng& rng, size_t n, double bound);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
    void step(ParamStore& store);
    int64_t steps_taken() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
};

// --- Gradient verification ----------------------------------------------------

// Builds a scalar loss from a differentiable leaf x.
using ScalarFn = std::function<DiffTensor(Graph&, DiffTensor)>;

// Central-difference check of df/dx at x0. Evaluates f twice and throws
// InvariantError if the two forward values differ (nondeterminism guard).
// Returns the max over coordinates of |analytic - numeric| divided by the
// largest gradient magnitude seen (floored at 1e-8), i.e. a relative error
// against the gradient's own scale.
double finite_diff_check(const ScalarFn& f, const Shape& xshape, const std::vector<double>& x0,
                         double h);

}  // namespace gac
