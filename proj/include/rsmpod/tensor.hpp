#pragma once
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rsmpod/errors.hpp"

namespace rsmpod {

// One node of the recorded computation graph. Values are flat row-major f64.
// The grad buffer is allocated lazily during backward().
struct TensorNode {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // pushes this->grad into parents

    size_t size() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

// Value-semantic handle to a graph node. Cheap to copy; the graph is built
// define-by-run and torn down when the last handle goes away.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
    static Tensor from_values(std::vector<int> shape, std::vector<double> vals,
                              bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    size_t size() const { return node_->value.size(); }
    const std::vector<double>& values() const { return node_->value; }
    // Leaf initialization / optimizer updates only; never mutate mid-graph.
    std::vector<double>& mutable_values() { return node_->value; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    double item() const;
    double at(size_t i) const { return node_->value[i]; }

    // Reverse sweep from a scalar ([1]-shaped) tensor; accumulates into the
    // grad buffers of every reachable node with requires_grad.
    void backward() const;

    std::shared_ptr<TensorNode> node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

size_t shape_product(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);
void check_finite(const Tensor& t, const char* what);

// ---- differentiable primitives ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
// x[n,d] + v[d] broadcast over rows.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
// Multiply a tensor by a [1]-shaped scalar tensor.
Tensor scale_t(const Tensor& x, const Tensor& s);

Tensor matmul(const Tensor& a, const Tensor& b);      // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);   // [m,k]x[n,k]^T -> [m,n]

Tensor softmax_rows(const Tensor& x);                 // softmax along last axis of [n,k] or [k]
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp_t(const Tensor& x);
Tensor log_t(const Tensor& x);
Tensor sqrt_t(const Tensor& x);
Tensor abs_t(const Tensor& x);
Tensor min_elem(const Tensor& a, const Tensor& b);    // ties take a's gradient
Tensor max_elem(const Tensor& a, const Tensor& b);    // ties take a's gradient
Tensor clamp_min(const Tensor& x, double lo);

Tensor sum(const Tensor& x);    // -> [1]
Tensor mean(const Tensor& x);   // -> [1]

Tensor reshape(const Tensor& x, std::vector<int> new_shape);
Tensor index(const Tensor& x, size_t i);                       // -> [1]
Tensor build_vector(const std::vector<Tensor>& scalars);       // [1] nodes -> [n]
Tensor concat_rows(const std::vector<Tensor>& parts);          // along axis 0
Tensor slice_rows(const Tensor& x, int start, int count);
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
Tensor concat_cols(const std::vector<Tensor>& parts);          // [n,d_i] -> [n, sum d_i]
Tensor slice_cols(const Tensor& x, int start, int count);

// 3x3-style patch extraction for strided convolution:
// x[h,w,c] -> [oh*ow, k*k*c], zero padding `pad`, stride `stride`.
Tensor im2col(const Tensor& x, int k, int stride, int pad);

// Bilinear interpolation of feat[h,w,d] at normalized p[2]=(px,py) in [0,1]^2,
// align-corners-false, border clamped. Differentiable in feat and p.
Tensor bilinear_sample(const Tensor& feat, const Tensor& p);

}  // namespace rsmpod
