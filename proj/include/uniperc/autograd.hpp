#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "uniperc/tensor.hpp"

namespace uniperc {

// Reverse-mode autodiff over Tensor. A Var is a handle to a tape node; ops
// build the graph eagerly and backward() walks it in reverse topological
// order. Everything runs in 64-bit so finite-difference checks are tight.
struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;          // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    // Propagates this->grad into parents' grads.
    std::function<void(Node&)> backprop;

    Tensor& ensure_grad() {
        if (grad.shape.empty()) grad = Tensor::zeros(value.shape);
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : node_(std::move(n)) {}

    static Var leaf(Tensor t, bool requires_grad = true) {
        auto n = std::make_shared<Node>();
        n->value = std::move(t);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }
    static Var constant(Tensor t) { return leaf(std::move(t), false); }
    static Var scalar(double v, bool requires_grad = false) {
        return leaf(Tensor::scalar(v), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& value_mut() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    NodePtr node() const { return node_; }

    double item() const { return node_->value.item(); }

    // Runs backprop from this (scalar) node with seed gradient 1.
    void backward() const;
    void zero_grad() const {
        if (node_) node_->grad = Tensor();
    }

private:
    NodePtr node_;
};

namespace ag {

// elementwise, same shape
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var vexp(const Var& a);
Var vlog(const Var& a);  // caller guarantees positivity (clamp with add_scalar)
Var vabs(const Var& a);
Var vsqrt(const Var& a);
Var square(const Var& a);
Var vsin(const Var& a);
Var vcos(const Var& a);
Var relu(const Var& a);
Var elu(const Var& a);
Var sigmoid(const Var& a);
Var clamp_min(const Var& a, double lo);
Var mul_const(const Var& a, const Tensor& w);  // elementwise by a constant

// reductions
Var sum(const Var& a);
Var mean(const Var& a);

// broadcast helpers
Var scale_by(const Var& s, const Var& x);           // s: {1}, x: any shape
Var shift_by(const Var& s, const Var& x);           // x + broadcast s ({1})
Var mul_bcast_ch(const Var& x, const Var& m);       // x: {C,H,W}, m: {1,H,W}
Var broadcast_ch(const Var& s, int c, int h, int w);  // s: {1} or {C} -> {c,h,w}

// structure
Var concat_ch(const std::vector<Var>& xs);          // CHW along C
Var slice_ch(const Var& x, int start, int count);
Var flatten(const Var& x, std::vector<int> new_shape);  // reshape view (copy)

// linear algebra ({r,c} matrices)
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var softmax_rows(const Var& a);
Var add_row_bcast(const Var& a, const Var& row);    // a: {r,c}, row: {c}

// spatial ({C,H,W})
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample2(const Var& x);                         // bilinear x2
Var resize_bilinear(const Var& x, int oh, int ow);
Var avgpool2(const Var& x);                          // 2x2 stride 2
Var boxfilter3(const Var& x);                        // clamped 3x3 mean
Var global_avg(const Var& x);                        // {C,H,W} -> {C}
Var grad_x(const Var& x);                            // {C,H,W} -> {C,H,W-1}
Var grad_y(const Var& x);                            // {C,H,W} -> {C,H-1,W}
// Bilinear sampling of img at pixel coords (border-clamped). coords: {2,Ho,Wo}
// holding (u,v). Differentiable in img and coords.
Var grid_sample(const Var& img, const Var& coords);

// batchnorm over spatial dims of a single sample. Training mode computes the
// statistics from x (gradient flows through them); eval mode uses the given
// running statistics as constants.
Var batchnorm_train(const Var& x, const Var& gamma, const Var& beta, double eps,
                    Tensor* out_mean, Tensor* out_var);
Var batchnorm_eval(const Var& x, const Var& gamma, const Var& beta,
                   const Tensor& mean, const Tensor& var, double eps);

}  // namespace ag
}  // namespace uniperc
