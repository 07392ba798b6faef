#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rsmpod/param_store.hpp"
#include "rsmpod/tensor.hpp"

namespace rsmpod {

// y = x.w + b for x[n,d_in], w[d_in,d_out], b[d_out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Per-row standardization with affine; a zero-variance row maps to beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};
AttentionParams attention_params(ParamStore& ps, const std::string& prefix);

// Scaled dot-product attention with learned projections; q[m,d], k/v[s,d].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            const AttentionParams& p);

// cos(a,b) with norms clamped at 1e-12; inputs are flat vectors of equal size.
Tensor cosine(const Tensor& a, const Tensor& b);

// ---- deterministic initialization ----

Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, uint64_t seed);

// Registration helpers; seed is derived from (master_seed, path) so creation
// order never matters.
void register_linear(ParamStore& ps, const std::string& prefix, int d_in, int d_out,
                     uint64_t master_seed, bool zero_init = false);
void register_layer_norm(ParamStore& ps, const std::string& prefix, int d);
void register_attention(ParamStore& ps, const std::string& prefix, int d, uint64_t master_seed);
void register_vector(ParamStore& ps, const std::string& path, int d, uint64_t master_seed);

// ---- optimizer ----

class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    // One update over every unfrozen parameter using its accumulated grad.
    void step(ParamStore& ps);

private:
    struct Moments {
        std::vector<double> m, v;
    };
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
    std::map<std::string, Moments> state_;
};

// Scales unfrozen grads so their global L2 norm is at most max_norm; returns
// the pre-clip norm.
double clip_global_grad_norm(ParamStore& ps, double max_norm);

}  // namespace rsmpod
