#pragma once

#include "pcdf/common.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pcdf::nn {

/// Dense fp64 tensor, row-major. All training math runs in double so that
/// finite-difference gradient checks are meaningful.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

    static size_t count(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) n *= static_cast<size_t>(d);
        return n;
    }
    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    size_t numel() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }
    double item() const { return data.at(0); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

struct Param;

/// One value in the computation graph. Nodes are created in topological
/// order by the op functions below; Graph::backward walks them in reverse.
struct Node {
    Tensor value;
    Tensor grad;                     // allocated on first use
    bool requires_grad = false;
    Param* origin = nullptr;         // set for parameter leaves
    std::function<void(Node&)> backprop;  // distributes this->grad to parents

    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor::zeros(value.shape);
    }
};

/// Named trainable parameter with persistent gradient/momentum buffers.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor momentum;
    bool trainable = true;
};

/// Tape for one forward pass. Owns every node it allocates.
class Graph {
public:
    Node* alloc(Tensor value, bool requires_grad) {
        nodes_.push_back(std::make_unique<Node>());
        Node* n = nodes_.back().get();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return n;
    }

    /// Backpropagates from a scalar loss node. Parameter gradients are
    /// accumulated into Param::grad (+=, so micro-batches can sum).
    void backward(Node* loss);

    size_t size() const { return nodes_.size(); }

private:
    std::vector<std::unique_ptr<Node>> nodes_;
    std::map<Param*, Node*> param_nodes_;
    friend Node* param(Graph&, Param&);
};

/// Ordered registry of parameters; iteration order is creation order, which
/// makes optimizer sweeps and checkpoint layout deterministic.
class ParamStore {
public:
    Param* create(const std::string& name, std::vector<int> shape);
    Param* find(const std::string& name) const;
    std::span<const std::unique_ptr<Param>> all() const { return params_; }
    size_t total_scalars() const;
    void zero_grad();

private:
    std::vector<std::unique_ptr<Param>> params_;
    std::map<std::string, Param*> by_name_;
};

inline Param& require_param(const ParamStore& store, const std::string& name) {
    Param* p = store.find(name);
    if (!p) throw Error("missing parameter: " + name);
    return *p;
}

struct SgdConfig {
    double lr = 0.01;
    double momentum = 0.937;
    double weight_decay = 0.0005;
};

/// v = mu*v + (g + wd*w); w -= lr*v. Zeroes gradients afterwards.
/// Returns false and leaves parameters untouched if any gradient is non-finite.
bool sgd_step(ParamStore& store, const SgdConfig& cfg);

// ---- initializers ----------------------------------------------------------

void fill_kaiming(Rng& rng, Tensor& t, int fan_in);
void fill_normal(Rng& rng, Tensor& t, double stddev);

// ---- graph ops -------------------------------------------------------------
// Shapes: feature maps are [N,C,H,W]; matrices [N,D]; vectors [D]; scalars [1].

Node* input(Graph& g, Tensor v);
Node* param(Graph& g, Param& p);

Node* conv2d(Graph& g, Node* x, Node* w, Node* b, int stride);  // 3x3, pad 1
Node* relu(Graph& g, Node* x);
Node* sigmoid(Graph& g, Node* x);
Node* add(Graph& g, Node* a, Node* b);
Node* sub(Graph& g, Node* a, Node* b);
Node* mul(Graph& g, Node* a, Node* b);
Node* scale(Graph& g, Node* x, double c);
Node* concat_channels(Graph& g, const std::vector<Node*>& xs);
Node* slice_channels(Graph& g, Node* x, int c0, int c1);
Node* global_avg_pool(Graph& g, Node* x);   // [N,C,H,W] -> [N,C]
Node* global_max_pool(Graph& g, Node* x);   // [N,C,H,W] -> [N,C]
Node* linear(Graph& g, Node* x, Node* w, Node* b);  // [N,Din],[Dout,Din],[Dout]
Node* concat_cols(Graph& g, Node* a, Node* b);      // [N,D1]+[N,D2]
Node* slice_cols(Graph& g, Node* x, int c0, int c1);  // [N,D] -> [N,c1-c0)
Node* slice_batch(Graph& g, Node* x, int n0, int n1);  // rows [n0,n1) along dim 0
Node* concat_rows(Graph& g, const std::vector<Node*>& xs);  // stack along dim 0
Node* softmax_rows(Graph& g, Node* x);              // [N,K]
/// Per-channel two-way softmax over [N,2C]: entry c pairs with entry C+c.
/// Logits are clamped to +-clamp before exponentiation.
Node* pair_softmax(Graph& g, Node* x, double clamp = 30.0);
Node* channel_scale(Graph& g, Node* x, Node* s);    // [N,C,H,W] * [N,C]
Node* channel_bias(Graph& g, Node* x, Node* s);     // [N,C,H,W] + [N,C]
Node* broadcast_spatial(Graph& g, Node* s, int h, int w);  // [N,C] -> [N,C,H,W]
Node* batch_mean(Graph& g, Node* x);                // [N,D] -> [D]
Node* sub_rowbcast(Graph& g, Node* x, Node* m);     // [N,D] - [D]
Node* pow_int(Graph& g, Node* x, int k);
Node* sum_channels(Graph& g, Node* x);              // [N,C,H,W] -> [N,1,H,W]
Node* l2_norm(Graph& g, Node* x);                   // any shape -> [1]
Node* mean_all(Graph& g, Node* x);                  // any shape -> [1]
/// Weighted binary cross-entropy on logits: sum_i w_i * bce(z_i, t_i) divided
/// by max(sum_i w_i, 1). Targets and weights are constants (no gradient).
Node* bce_logits(Graph& g, Node* z, const Tensor& target, const Tensor& weight);
/// Forward: 1[p >= tau] entrywise. Backward: straight-through (identity).
Node* st_hard_gate(Graph& g, Node* probs, double tau);

double scalar_of(const Node* n);

} // namespace pcdf::nn
