#include "rsmpod/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_set>

namespace rsmpod {

size_t shape_product(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void check_finite(const Tensor& t, const char* what) {
    for (double v : t.values())
        if (!std::isfinite(v)) throw EvalError(std::string(what) + ": non-finite value");
}

namespace {

std::shared_ptr<TensorNode> make_node(std::vector<int> shape,
                                      std::vector<std::shared_ptr<TensorNode>> parents) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.resize(shape_product(n->shape));
    for (const auto& p : parents) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) n->parents = std::move(parents);
    return n;
}

// Returns the parent's grad buffer, or nullptr when it does not need one.
double* grad_of(TensorNode& p) {
    if (!p.requires_grad) return nullptr;
    p.ensure_grad();
    return p.grad.data();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

// C[m,n] += A[m,k] * B[k,n]
void mm_nn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<size_t>(i) * k;
        double* c = C + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = a[p];
            if (av == 0.0) continue;
            const double* b = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
void mm_nt_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<size_t>(i) * k;
        double* c = C + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* b = B + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += a[p] * b[p];
            c[j] += s;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
void mm_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* a = A + static_cast<size_t>(i) * k;
        const double* b = B + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = a[p];
            if (av == 0.0) continue;
            double* c = C + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.assign(shape_product(n->shape), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node()->value.begin(), t.node()->value.end(), v);
    return t;
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> vals, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    if (shape_product(n->shape) != vals.size())
        throw DimensionError("from_values: shape " + shape_str(n->shape) + " does not match " +
                             std::to_string(vals.size()) + " values");
    n->value = std::move(vals);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_values({1}, {v}, requires_grad);
}

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item() on tensor of size " + std::to_string(size()));
    return node_->value[0];
}

void Tensor::backward() const {
    if (!node_) throw EvalError("backward on undefined tensor");
    if (size() != 1) throw DimensionError("backward requires a scalar tensor");
    if (!node_->requires_grad) return;

    // Post-order DFS over grad-requiring ancestry; reversed it runs each
    // node after all of its consumers.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            TensorNode* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

// ---- elementwise ----

namespace {

template <class Fwd, class Bwd>
Tensor binary_elemwise(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
    require_same_shape(a, b, name);
    auto n = make_node(a.shape(), {a.node(), b.node()});
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = fwd(av[i], bv[i]);
    if (n->requires_grad)
        n->backward_fn = [bwd](TensorNode& self) {
            auto& A = *self.parents[0];
            auto& B = *self.parents[1];
            double* ga = grad_of(A);
            double* gb = grad_of(B);
            for (size_t i = 0; i < self.value.size(); ++i) {
                double da = 0.0, db = 0.0;
                bwd(A.value[i], B.value[i], self.grad[i], da, db);
                if (ga) ga[i] += da;
                if (gb) gb[i] += db;
            }
        };
    return Tensor(n);
}

template <class Fwd, class Bwd>
Tensor unary_elemwise(const Tensor& a, Fwd fwd, Bwd bwd) {
    auto n = make_node(a.shape(), {a.node()});
    const auto& av = a.values();
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = fwd(av[i]);
    if (n->requires_grad)
        n->backward_fn = [bwd](TensorNode& self) {
            auto& A = *self.parents[0];
            double* ga = grad_of(A);
            if (!ga) return;
            for (size_t i = 0; i < self.value.size(); ++i)
                ga[i] += self.grad[i] * bwd(A.value[i], self.value[i]);
        };
    return Tensor(n);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elemwise(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elemwise(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double, double g, double& da, double& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elemwise(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_elemwise(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double x, double y, double g, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

Tensor min_elem(const Tensor& a, const Tensor& b) {
    return binary_elemwise(
        a, b, "min_elem", [](double x, double y) { return x <= y ? x : y; },
        [](double x, double y, double g, double& da, double& db) {
            if (x <= y)
                da = g;
            else
                db = g;
        });
}

Tensor max_elem(const Tensor& a, const Tensor& b) {
    return binary_elemwise(
        a, b, "max_elem", [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y, double g, double& da, double& db) {
            if (x >= y)
                da = g;
            else
                db = g;
        });
}

Tensor neg(const Tensor& a) {
    return unary_elemwise(
        a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
    return unary_elemwise(
        a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_elemwise(
        a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor exp_t(const Tensor& a) {
    return unary_elemwise(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_t(const Tensor& a) {
    return unary_elemwise(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt_t(const Tensor& a) {
    return unary_elemwise(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

Tensor abs_t(const Tensor& a) {
    return unary_elemwise(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor clamp_min(const Tensor& a, double lo) {
    return unary_elemwise(
        a, [lo](double x) { return x > lo ? x : lo; },
        [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_elemwise(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    return unary_elemwise(
        a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x, double) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
                   x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    if (x.rank() != 2 || v.rank() != 1 || x.dim(1) != v.dim(0))
        throw DimensionError("add_rowvec: need [n,d] + [d], got " + shape_str(x.shape()) +
                             " + " + shape_str(v.shape()));
    auto n = make_node(x.shape(), {x.node(), v.node()});
    int rows = x.dim(0), d = x.dim(1);
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j)
            n->value[static_cast<size_t>(r) * d + j] = x.at(static_cast<size_t>(r) * d + j) + v.at(j);
    if (n->requires_grad)
        n->backward_fn = [rows, d](TensorNode& self) {
            double* gx = grad_of(*self.parents[0]);
            double* gv = grad_of(*self.parents[1]);
            for (int r = 0; r < rows; ++r)
                for (int j = 0; j < d; ++j) {
                    double g = self.grad[static_cast<size_t>(r) * d + j];
                    if (gx) gx[static_cast<size_t>(r) * d + j] += g;
                    if (gv) gv[j] += g;
                }
        };
    return Tensor(n);
}

Tensor scale_t(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw DimensionError("scale_t: scale must be a [1] tensor");
    auto n = make_node(x.shape(), {x.node(), s.node()});
    double sv = s.at(0);
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = x.at(i) * sv;
    if (n->requires_grad)
        n->backward_fn = [](TensorNode& self) {
            auto& X = *self.parents[0];
            auto& S = *self.parents[1];
            double* gx = grad_of(X);
            double* gs = grad_of(S);
            double sv = S.value[0];
            double acc = 0.0;
            for (size_t i = 0; i < self.value.size(); ++i) {
                if (gx) gx[i] += self.grad[i] * sv;
                acc += self.grad[i] * X.value[i];
            }
            if (gs) gs[0] += acc;
        };
    return Tensor(n);
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n2 = b.dim(1);
    auto n = make_node({m, n2}, {a.node(), b.node()});
    mm_nn_acc(a.values().data(), b.values().data(), n->value.data(), m, k, n2);
    if (n->requires_grad)
        n->backward_fn = [m, k, n2](TensorNode& self) {
            auto& A = *self.parents[0];
            auto& B = *self.parents[1];
            if (double* ga = grad_of(A)) mm_nt_acc(self.grad.data(), B.value.data(), ga, m, n2, k);
            if (double* gb = grad_of(B)) mm_tn_acc(A.value.data(), self.grad.data(), gb, m, k, n2);
        };
    return Tensor(n);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    int m = a.dim(0), k = a.dim(1), n2 = b.dim(0);
    auto n = make_node({m, n2}, {a.node(), b.node()});
    mm_nt_acc(a.values().data(), b.values().data(), n->value.data(), m, k, n2);
    if (n->requires_grad)
        n->backward_fn = [m, k, n2](TensorNode& self) {
            auto& A = *self.parents[0];
            auto& B = *self.parents[1];
            if (double* ga = grad_of(A)) mm_nn_acc(self.grad.data(), B.value.data(), ga, m, n2, k);
            if (double* gb = grad_of(B)) mm_tn_acc(self.grad.data(), A.value.data(), gb, m, n2, k);
        };
    return Tensor(n);
}

// ---- softmax ----

Tensor softmax_rows(const Tensor& x) {
    int k = x.dim(x.rank() - 1);
    if (k < 1) throw DimensionError("softmax over empty axis");
    int rows = static_cast<int>(x.size()) / k;
    auto n = make_node(x.shape(), {x.node()});
    for (int r = 0; r < rows; ++r) {
        const double* in = x.values().data() + static_cast<size_t>(r) * k;
        double* out = n->value.data() + static_cast<size_t>(r) * k;
        double mx = in[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, in[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) {
            out[j] = std::exp(in[j] - mx);
            z += out[j];
        }
        for (int j = 0; j < k; ++j) out[j] /= z;
    }
    if (n->requires_grad)
        n->backward_fn = [rows, k](TensorNode& self) {
            double* gx = grad_of(*self.parents[0]);
            if (!gx) return;
            for (int r = 0; r < rows; ++r) {
                const double* y = self.value.data() + static_cast<size_t>(r) * k;
                const double* gy = self.grad.data() + static_cast<size_t>(r) * k;
                double dot = 0.0;
                for (int j = 0; j < k; ++j) dot += gy[j] * y[j];
                double* g = gx + static_cast<size_t>(r) * k;
                for (int j = 0; j < k; ++j) g[j] += y[j] * (gy[j] - dot);
            }
        };
    return Tensor(n);
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
    auto n = make_node({1}, {x.node()});
    double s = 0.0;
    for (double v : x.values()) s += v;
    n->value[0] = s;
    if (n->requires_grad)
        n->backward_fn = [](TensorNode& self) {
            double* gx = grad_of(*self.parents[0]);
            if (!gx) return;
            double g = self.grad[0];
            for (size_t i = 0; i < self.parents[0]->value.size(); ++i) gx[i] += g;
        };
    return Tensor(n);
}

Tensor mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---- shape ops ----

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
    if (shape_product(new_shape) != x.size())
        throw DimensionError("reshape: size mismatch " + shape_str(x.shape()) + " -> " +
                             shape_str(new_shape));
    auto n = make_node(std::move(new_shape), {x.node()});
    n->value = x.values();
    if (n->requires_grad)
        n->backward_fn = [](TensorNode& self) {
            double* gx = grad_of(*self.parents[0]);
            if (!gx) return;
            for (size_t i = 0; i < self.value.size(); ++i) gx[i] += self.grad[i];
        };
    return Tensor(n);
}

Tensor index(const Tensor& x, size_t i) {
    if (i >= x.size()) throw DimensionError("index out of range");
    auto n = make_node({1}, {x.node()});
    n->value[0] = x.at(i);
    if (n->requires_grad)
        n->backward_fn = [i](TensorNode& self) {
            double* gx = grad_of(*self.parents[0]);
            if (gx) gx[i] += self.grad[0];
        };
    return Tensor(n);
}

Tensor build_vector(const std::vector<Tensor>& scalars) {
    if (scalars.empty()) throw DimensionError("build_vector: empty input");
    std::vector<std::shared_ptr<TensorNode>> parents;
    parents.reserve(scalars.size());
    for (const auto& s : scalars) {
        if (s.size() != 1) throw DimensionError("build_vector: inputs must be scalars");
        parents.push_back(s.node());
    }
    auto n = make_node({static_cast<int>(scalars.size())}, std::move(parents));
    for (size_t i = 0; i < scalars.size(); ++i) n->value[i] = scalars[i].at(0);
    if (n->requires_grad)
        n->backward_fn = [](TensorNode& self) {
            for (size_t i = 0; i < self.parents.size(); ++i)
                if (double* g = grad_of(*self.parents[i])) g[0] += self.grad[i];
        };
    return Tensor(n);
}

namespace {
// Row width = product of trailing dims; 1-D tensors count as width-1 rows.
int row_width(const Tensor& t) {
    int w = 1;
    for (int i = 1; i < t.rank(); ++i) w *= t.dim(i);
    return w;
}
}  // namespace

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: empty input");
    int w = row_width(parts[0]);
    int total_rows = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    for (const auto& p : parts) {
        if (row_width(p) != w)
            throw DimensionError("concat_rows: row width mismatch");
        total_rows += p.dim(0);
        parents.push_back(p.node());
    }
    std::vector<int> shape = parts[0].shape();
    shape[0] = total_rows;
    auto n = make_node(shape, std::move(parents));
    size_t off = 0;
    std::vector<size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(off);
        std::copy(p.values().begin(), p.values().end(), n->value.begin() + off);
        off += p.size();
    }
    if (n->requires_grad)
        n->backward_fn = [offsets](TensorNode& self) {
            for (size_t i = 0; i < self.parents.size(); ++i) {
                auto& P = *self.parents[i];
                double* g = grad_of(P);
                if (!g) continue;
                for (size_t j = 0; j < P.value.size(); ++j) g[j] += self.grad[offsets[i] + j];
            }
        };
    return Tensor(n);
}

Tensor slice_rows(const Tensor& x, int start, int count) {
    if (start < 0 || count < 1 || start + count > x.dim(0))
        throw DimensionError("slice_rows: range out of bounds");
    int w = row_width(x);
    std::vector<int> shape = x.shape();
    shape[0] = count;
    auto n = make_node(shape, {x.node()});
    size_t off = static_cast<size_t>(start) * w;
    std::copy(x.values().begin() + off, x.values().begin() + off + n->value.size(),
              n->value.begin());
    if (n->requires_grad)
        n->backward_fn = [off](TensorNode& self) {
            double* gx = grad_of(*self.parents[0]);
            if (!gx) return;
            for (size_t i = 0; i < self.value.size(); ++i) gx[off + i] += self.grad[i];
        };
    return Tensor(n);
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
    if (idx.empty()) throw DimensionError("gather_rows: empty index list");
    int w = row_width(x);
    for (int i : idx)
        if (i < 0 || i >= x.dim(0)) throw DimensionError("gather_rows: index out of range");
    std::vector<int> shape = x.shape();
    shape[0] = static_cast<int>(idx.size());
    auto n = make_node(shape, {x.node()});
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy(x.values().begin() + static_cast<size_t>(idx[r]) * w,
                  x.values().begin() + static_cast<size_t>(idx[r] + 1) * w,
                  n->value.begin() + r * w);
    if (n->requires_grad)
        n->backward_fn = [idx, w](TensorNode& self) {
            double* gx = grad_of(*self.parents[0]);
            if (!gx) return;
            for (size_t r = 0; r < idx.size(); ++r)
                for (int j = 0; j < w; ++j)
                    gx[static_cast<size_t>(idx[r]) * w + j] += self.grad[r * w + j];
        };
    return Tensor(n);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: empty input");
    int rows = parts[0].dim(0);
    int total = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::vector<int> widths;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows)
            throw DimensionError("concat_cols: need same-row-count 2-D tensors");
        widths.push_back(p.dim(1));
        total += p.dim(1);
        parents.push_back(p.node());
    }
    auto n = make_node({rows, total}, std::move(parents));
    int col0 = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
        const auto& pv = parts[i].values();
        for (int r = 0; r < rows; ++r)
            std::copy(pv.begin() + static_cast<size_t>(r) * widths[i],
                      pv.begin() + static_cast<size_t>(r + 1) * widths[i],
                      n->value.begin() + static_cast<size_t>(r) * total + col0);
        col0 += widths[i];
    }
    if (n->requires_grad)
        n->backward_fn = [rows, total, widths](TensorNode& self) {
            int c0 = 0;
            for (size_t i = 0; i < self.parents.size(); ++i) {
                double* g = grad_of(*self.parents[i]);
                if (g)
                    for (int r = 0; r < rows; ++r)
                        for (int j = 0; j < widths[i]; ++j)
                            g[static_cast<size_t>(r) * widths[i] + j] +=
                                self.grad[static_cast<size_t>(r) * total + c0 + j];
                c0 += widths[i];
            }
        };
    return Tensor(n);
}

Tensor slice_cols(const Tensor& x, int start, int count) {
    if (x.rank() != 2) throw DimensionError("slice_cols: need 2-D tensor");
    if (start < 0 || count < 1 || start + count > x.dim(1))
        throw DimensionError("slice_cols: range out of bounds");
    int rows = x.dim(0), d = x.dim(1);
    auto n = make_node({rows, count}, {x.node()});
    for (int r = 0; r < rows; ++r)
        std::copy(x.values().begin() + static_cast<size_t>(r) * d + start,
                  x.values().begin() + static_cast<size_t>(r) * d + start + count,
                  n->value.begin() + static_cast<size_t>(r) * count);
    if (n->requires_grad)
        n->backward_fn = [rows, d, start, count](TensorNode& self) {
            double* gx = grad_of(*self.parents[0]);
            if (!gx) return;
            for (int r = 0; r < rows; ++r)
                for (int j = 0; j < count; ++j)
                    gx[static_cast<size_t>(r) * d + start + j] +=
                        self.grad[static_cast<size_t>(r) * count + j];
        };
    return Tensor(n);
}

// ---- im2col ----

Tensor im2col(const Tensor& x, int k, int stride, int pad) {
    if (x.rank() != 3) throw DimensionError("im2col: need [h,w,c], got " + shape_str(x.shape()));
    int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    int oh = (h + 2 * pad - k) / stride + 1;
    int ow = (w + 2 * pad - k) / stride + 1;
    if (oh < 1 || ow < 1) throw DimensionError("im2col: kernel larger than padded input");
    auto n = make_node({oh * ow, k * k * c}, {x.node()});
    const double* in = x.values().data();
    double* out = n->value.data();
    size_t col = 0;
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    int iy = oy * stride + ky - pad;
                    int ix = ox * stride + kx - pad;
                    if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                        const double* src = in + (static_cast<size_t>(iy) * w + ix) * c;
                        for (int ch = 0; ch < c; ++ch) out[col++] = src[ch];
                    } else {
                        for (int ch = 0; ch < c; ++ch) out[col++] = 0.0;
                    }
                }
    if (n->requires_grad)
        n->backward_fn = [h, w, c, k, stride, pad, oh, ow](TensorNode& self) {
            double* gx = grad_of(*self.parents[0]);
            if (!gx) return;
            size_t col = 0;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            int iy = oy * stride + ky - pad;
                            int ix = ox * stride + kx - pad;
                            if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                                double* dst = gx + (static_cast<size_t>(iy) * w + ix) * c;
                                for (int ch = 0; ch < c; ++ch) dst[ch] += self.grad[col++];
                            } else {
                                col += c;
                            }
                        }
        };
    return Tensor(n);
}

// ---- bilinear sampling ----

Tensor bilinear_sample(const Tensor& feat, const Tensor& p) {
    if (feat.rank() != 3) throw DimensionError("bilinear_sample: feat must be [h,w,d]");
    if (p.size() != 2) throw DimensionError("bilinear_sample: p must be a [2] tensor");
    int h = feat.dim(0), w = feat.dim(1), d = feat.dim(2);
    double gx = p.at(0) * w - 0.5;
    double gy = p.at(1) * h - 0.5;
    int x0 = static_cast<int>(std::floor(gx));
    int y0 = static_cast<int>(std::floor(gy));
    double tx = gx - x0;
    double ty = gy - y0;
    auto cl = [](int v, int hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); };
    int xa = cl(x0, w), xb = cl(x0 + 1, w), ya = cl(y0, h), yb = cl(y0 + 1, h);

    auto n = make_node({d}, {feat.node(), p.node()});
    const double* F = feat.values().data();
    const double* faa = F + (static_cast<size_t>(ya) * w + xa) * d;
    const double* fab = F + (static_cast<size_t>(ya) * w + xb) * d;
    const double* fba = F + (static_cast<size_t>(yb) * w + xa) * d;
    const double* fbb = F + (static_cast<size_t>(yb) * w + xb) * d;
    for (int ch = 0; ch < d; ++ch)
        n->value[ch] = (1 - ty) * ((1 - tx) * faa[ch] + tx * fab[ch]) +
                       ty * ((1 - tx) * fba[ch] + tx * fbb[ch]);
    if (n->requires_grad)
        n->backward_fn = [=](TensorNode& self) {
            auto& Fn = *self.parents[0];
            auto& Pn = *self.parents[1];
            double* gF = grad_of(Fn);
            double* gP = grad_of(Pn);
            const double* Fv = Fn.value.data();
            const double* aa = Fv + (static_cast<size_t>(ya) * w + xa) * d;
            const double* ab = Fv + (static_cast<size_t>(ya) * w + xb) * d;
            const double* ba = Fv + (static_cast<size_t>(yb) * w + xa) * d;
            const double* bb = Fv + (static_cast<size_t>(yb) * w + xb) * d;
            double dgx = 0.0, dgy = 0.0;
            for (int ch = 0; ch < d; ++ch) {
                double g = self.grad[ch];
                if (gF) {
                    gF[(static_cast<size_t>(ya) * w + xa) * d + ch] += g * (1 - ty) * (1 - tx);
                    gF[(static_cast<size_t>(ya) * w + xb) * d + ch] += g * (1 - ty) * tx;
                    gF[(static_cast<size_t>(yb) * w + xa) * d + ch] += g * ty * (1 - tx);
                    gF[(static_cast<size_t>(yb) * w + xb) * d + ch] += g * ty * tx;
                }
                dgx += g * ((1 - ty) * (ab[ch] - aa[ch]) + ty * (bb[ch] - ba[ch]));
                dgy += g * ((1 - tx) * (ba[ch] - aa[ch]) + tx * (bb[ch] - ab[ch]));
            }
            if (gP) {
                gP[0] += dgx * w;
                gP[1] += dgy * h;
            }
        };
    return Tensor(n);
}

}  // namespace rsmpod
