#include "rsmpod/nn.hpp"

#include <cmath>

#include "rsmpod/rng.hpp"

namespace rsmpod {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0))
        throw DimensionError("linear: x" + shape_str(x.shape()) + " incompatible with w" +
                             shape_str(w.shape()) + " (inner axes " +
                             std::to_string(x.dim(x.rank() - 1)) + " vs " +
                             std::to_string(w.dim(0)) + ")");
    if (b.rank() != 1 || b.dim(0) != w.dim(1))
        throw DimensionError("linear: bias " + shape_str(b.shape()) + " vs out axis " +
                             std::to_string(w.dim(1)));
    return add_rowvec(matmul(x, w), b);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() != 2) throw DimensionError("layer_norm: need [n,d]");
    int rows = x.dim(0), d = x.dim(1);
    if (gamma.size() != static_cast<size_t>(d) || beta.size() != static_cast<size_t>(d))
        throw DimensionError("layer_norm: gamma/beta width mismatch");

    auto node = std::make_shared<TensorNode>();
    node->shape = x.shape();
    node->value.resize(x.size());
    node->requires_grad = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();

    std::vector<double> inv_std(rows), mu(rows);
    const double* xv = x.values().data();
    const double* gv = gamma.values().data();
    const double* bv = beta.values().data();
    for (int r = 0; r < rows; ++r) {
        const double* row = xv + static_cast<size_t>(r) * d;
        double m = 0.0;
        for (int j = 0; j < d; ++j) m += row[j];
        m /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        mu[r] = m;
        inv_std[r] = is;
        double* out = node->value.data() + static_cast<size_t>(r) * d;
        for (int j = 0; j < d; ++j) out[j] = gv[j] * (row[j] - m) * is + bv[j];
    }
    if (node->requires_grad) {
        node->parents = {x.node(), gamma.node(), beta.node()};
        node->backward_fn = [rows, d, mu, inv_std](TensorNode& self) {
            auto& X = *self.parents[0];
            auto& G = *self.parents[1];
            auto& B = *self.parents[2];
            double* gx = X.requires_grad ? (X.ensure_grad(), X.grad.data()) : nullptr;
            double* gg = G.requires_grad ? (G.ensure_grad(), G.grad.data()) : nullptr;
            double* gb = B.requires_grad ? (B.ensure_grad(), B.grad.data()) : nullptr;
            for (int r = 0; r < rows; ++r) {
                const double* row = X.value.data() + static_cast<size_t>(r) * d;
                const double* gy = self.grad.data() + static_cast<size_t>(r) * d;
                double is = inv_std[r], m = mu[r];
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int j = 0; j < d; ++j) {
                    double xhat = (row[j] - m) * is;
                    double dxhat = gy[j] * G.value[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if (gg) gg[j] += gy[j] * xhat;
                    if (gb) gb[j] += gy[j];
                }
                if (gx) {
                    double* gxr = gx + static_cast<size_t>(r) * d;
                    for (int j = 0; j < d; ++j) {
                        double xhat = (row[j] - m) * is;
                        double dxhat = gy[j] * G.value[j];
                        gxr[j] += is * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / d);
                    }
                }
            }
        };
    }
    return Tensor(node);
}

AttentionParams attention_params(ParamStore& ps, const std::string& prefix) {
    return AttentionParams{ps.at(prefix + ".wq"), ps.at(prefix + ".bq"), ps.at(prefix + ".wk"),
                           ps.at(prefix + ".bk"), ps.at(prefix + ".wv"), ps.at(prefix + ".bv"),
                           ps.at(prefix + ".wo"), ps.at(prefix + ".bo")};
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            const AttentionParams& p) {
    int d = q.dim(1);
    if (heads < 1 || d % heads != 0)
        throw ConfigError("multi_head_attention: width " + std::to_string(d) +
                          " not divisible by " + std::to_string(heads) + " heads");
    if (k.dim(0) != v.dim(0) || k.dim(1) != d || v.dim(1) != d)
        throw DimensionError("multi_head_attention: k/v shape mismatch");
    int dh = d / heads;
    Tensor Q = linear(q, p.wq, p.bq);
    Tensor K = linear(k, p.wk, p.bk);
    Tensor V = linear(v, p.wv, p.bv);
    double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Tensor Qh = slice_cols(Q, h * dh, dh);
        Tensor Kh = slice_cols(K, h * dh, dh);
        Tensor Vh = slice_cols(V, h * dh, dh);
        Tensor att = softmax_rows(scale(matmul_nt(Qh, Kh), scale_f));
        head_outs.push_back(matmul(att, Vh));
    }
    Tensor O = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return linear(O, p.wo, p.bo);
}

Tensor cosine(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw DimensionError("cosine: size mismatch");
    Tensor af = a.rank() == 1 ? a : reshape(a, {static_cast<int>(a.size())});
    Tensor bf = b.rank() == 1 ? b : reshape(b, {static_cast<int>(b.size())});
    Tensor dot = sum(mul(af, bf));
    Tensor na = sqrt_t(clamp_min(sum(mul(af, af)), 1e-24));
    Tensor nb = sqrt_t(clamp_min(sum(mul(bf, bf)), 1e-24));
    return div(dot, mul(na, nb));
}

Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, uint64_t seed) {
    double a = std::sqrt(6.0 / (fan_in + fan_out));
    Rng rng(seed);
    std::vector<double> vals(shape_product(shape));
    for (auto& v : vals) v = rng.uniform(-a, a);
    return Tensor::from_values(std::move(shape), std::move(vals), true);
}

void register_linear(ParamStore& ps, const std::string& prefix, int d_in, int d_out,
                     uint64_t master_seed, bool zero_init) {
    if (zero_init) {
        ps.create(prefix + ".w", Tensor::zeros({d_in, d_out}, true));
    } else {
        ps.create(prefix + ".w",
                  xavier_uniform({d_in, d_out}, d_in, d_out, mix_seed(master_seed, fnv1a(prefix + ".w"))));
    }
    ps.create(prefix + ".b", Tensor::zeros({d_out}, true));
}

void register_layer_norm(ParamStore& ps, const std::string& prefix, int d) {
    ps.create(prefix + ".gamma", Tensor::full({d}, 1.0, true));
    ps.create(prefix + ".beta", Tensor::zeros({d}, true));
}

void register_attention(ParamStore& ps, const std::string& prefix, int d, uint64_t master_seed) {
    for (const char* part : {".wq", ".wk", ".wv", ".wo"})
        ps.create(prefix + part,
                  xavier_uniform({d, d}, d, d, mix_seed(master_seed, fnv1a(prefix + part))));
    for (const char* part : {".bq", ".bk", ".bv", ".bo"})
        ps.create(prefix + part, Tensor::zeros({d}, true));
}

void register_vector(ParamStore& ps, const std::string& path, int d, uint64_t master_seed) {
    ps.create(path, xavier_uniform({d}, d, d, mix_seed(master_seed, fnv1a(path))));
}

void Adam::step(ParamStore& ps) {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (auto& [path, t] : ps.params()) {
        if (ps.is_frozen(path)) continue;
        if (t.grad().empty()) continue;
        auto& mom = state_[path];
        if (mom.m.size() != t.size()) {
            mom.m.assign(t.size(), 0.0);
            mom.v.assign(t.size(), 0.0);
        }
        auto& vals = t.mutable_values();
        const auto& g = t.grad();
        for (size_t i = 0; i < vals.size(); ++i) {
            mom.m[i] = b1_ * mom.m[i] + (1.0 - b1_) * g[i];
            mom.v[i] = b2_ * mom.v[i] + (1.0 - b2_) * g[i] * g[i];
            double mhat = mom.m[i] / bc1;
            double vhat = mom.v[i] / bc2;
            vals[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

double clip_global_grad_norm(ParamStore& ps, double max_norm) {
    double sq = 0.0;
    for (auto& [path, t] : ps.params()) {
        if (ps.is_frozen(path) || t.grad().empty()) continue;
        for (double g : t.grad()) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double s = max_norm / norm;
        for (auto& [path, t] : ps.params()) {
            if (ps.is_frozen(path) || t.grad().empty()) continue;
            auto& node = *t.node();
            for (auto& g : node.grad) g *= s;
        }
    }
    return norm;
}

}  // namespace rsmpod
