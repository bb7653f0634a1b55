#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sarfuse/tensor.hpp"

namespace sarfuse {

// A learnable array. Gradients accumulate into `grad` across a backward pass;
// the optimizer consumes and clears them.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape(), 0.0f) {}

    int64_t numel() const { return value.numel(); }
    void zero_grad() { grad.fill(0.0f); }
};

class Tape;

// Handle to a node on a tape; valid only while its tape is alive.
struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

// Reverse-mode tape. Each forward pass builds a fresh tape; backward() walks
// it once in reverse. Ops reference only earlier nodes, so creation order is
// a topological order.
class Tape {
public:
    // Leaf without gradient tracking (data, targets, noise).
    Var constant(Tensor v);
    // Leaf with gradient tracking (inputs being grad-checked).
    Var input(Tensor v);
    // Leaf wired to a Parameter; backward() accumulates into p.grad.
    // The same Parameter maps to the same node within a tape, so weight
    // sharing across forward calls accumulates correctly.
    Var param(Parameter& p);

    Var conv2d(Var x, Var w, Var b, int stride, int pad);            // b may be {}
    Var conv2d_transpose(Var x, Var w, Var b, int stride, int pad);  // weight [Cin,Cout,k,k]
    Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                   bool training, float eps, float momentum);
    Var relu(Var x);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    // gamma*a + b with a scalar (1-element) gamma
    Var scale_residual(Var gamma, Var a, Var b);
    // batched matmul on [B,M,K] x [B,K,N]; trans flags apply to the stored layout
    Var bmm(Var a, Var b, bool trans_a, bool trans_b);
    Var softmax(Var x, int axis);
    Var reshape(Var x, std::vector<int> shape);
    Var global_avg_pool(Var x);  // [B,C,H,W] -> [B,C]
    Var row_norm(Var x);         // [B,D] -> [B] euclidean norms
    Var roll_rows(Var x, int shift);  // [B,...] -> rows rotated by shift
    Var mse_loss(Var pred, Var target);
    // logits [B,nc,H,W], labels length B*H*W with codes in [0,nc); pixels whose
    // label == ignore_label are excluded. Throws if every pixel is ignored.
    Var cross_entropy_masked(Var logits, const std::vector<uint8_t>& labels, int ignore_label);
    // mean over batch of sum over remaining dims of 0.5*(mu^2 + e^lv - 1 - lv)
    Var kl_diag_gaussian(Var mu, Var logvar);
    // mu + exp(0.5*logvar) * noise
    Var reparameterize(Var mu, Var logvar, Var noise);
    // mean over [B] of max(0, pos - neg + margin)
    Var hinge_mean(Var pos, Var neg, double margin);

    void backward(Var loss);

    const Tensor& value(Var v) const;
    const Tensor& grad(Var v) const;
    // Loss value in double; reduction ops keep a double alongside the float32 node.
    double scalar(Var v) const;
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated during backward for nodes that need it
        double scalar_value = 0.0;
        bool has_scalar = false;
        bool needs_grad = false;
        Parameter* param = nullptr;  // leaf parameter sink
        std::function<void(Tape&, int)> backprop;
    };

    Var make_node(Tensor value, bool needs_grad);
    Node& node(Var v);
    const Node& node(Var v) const;
    bool any_grad(std::initializer_list<Var> vs) const;
    void add_grad(Var v, const float* g, int64_t n);  // accumulate into node grad

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, int> param_nodes_;

    friend struct TapeOps;
};

} // namespace sarfuse
