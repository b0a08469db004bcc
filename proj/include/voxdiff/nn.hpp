#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "voxdiff/rng.hpp"
#include "voxdiff/tensor.hpp"

namespace voxdiff {

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* value;
    Tensor<T>* grad;
};

// Truncated normal initialization: resample draws outside two standard
// deviations.
template <typename T>
void trunc_normal_init(Tensor<T>& t, double stddev, Rng& rng);

template <typename T>
inline T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// ----------------------------------------------------------------------
// Layers. Each caches what its backward pass needs; backward accumulates
// into the layer's gradient buffers and returns the input gradient.
// Instances are single-owner: one forward, then optionally one backward.
// ----------------------------------------------------------------------

template <typename T>
class Conv3d {
public:
    Conv3d() = default;
    Conv3d(int c_in, int c_out, std::array<int, 3> kernel, std::array<int, 3> stride,
           std::array<int, 3> pad);

    void init(Rng& rng, double stddev = 0.02);
    void zero_init();

    Tensor<T> forward(const Tensor<T>& x);
    Tensor<T> backward(const Tensor<T>& gout, bool want_input_grad = true);

    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);

    int c_in() const { return c_in_; }
    int c_out() const { return c_out_; }

    Tensor<T> weight;  // (c_out, c_in, kz, ky, kx), contiguous as (c_out, K)
    Tensor<T> bias;    // (c_out)
    Tensor<T> grad_weight;
    Tensor<T> grad_bias;

private:
    bool is_pointwise() const;
    void im2col(const Tensor<T>& x, std::array<int, 3> out_sp);

    int c_in_ = 0, c_out_ = 0;
    std::array<int, 3> kernel_{1, 1, 1}, stride_{1, 1, 1}, pad_{0, 0, 0};
    Tensor<T> input_;     // cached for backward (pointwise path only)
    std::vector<T> col_;  // (K, n_out_vox), written by forward, read by backward
    std::array<int, 3> in_sp_{0, 0, 0};
    std::array<int, 3> out_sp_{0, 0, 0};
};

template <typename T>
class GroupNorm {
public:
    GroupNorm() = default;
    GroupNorm(int channels, int groups);

    // largest divisor of `channels` that is <= 8
    static int default_groups(int channels);

    Tensor<T> forward(const Tensor<T>& x);
    Tensor<T> backward(const Tensor<T>& gout);
    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);

    Tensor<T> gamma, beta;
    Tensor<T> grad_gamma, grad_beta;

private:
    int channels_ = 0, groups_ = 0;
    Tensor<T> xhat_;
    std::vector<double> inv_std_;
};

template <typename T>
class SiLU {
public:
    Tensor<T> forward(const Tensor<T>& x);
    Tensor<T> backward(const Tensor<T>& gout);

private:
    Tensor<T> input_;
    Tensor<T> sig_;  // cached sigmoid(x)
};

template <typename T>
class ReLU {
public:
    Tensor<T> forward(const Tensor<T>& x);
    Tensor<T> backward(const Tensor<T>& gout);

private:
    Tensor<T> input_;
};

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(int in, int out);

    void init(Rng& rng, double stddev = 0.02);

    // x is a rank-1 vector
    Tensor<T> forward(const Tensor<T>& x);
    Tensor<T> backward(const Tensor<T>& gout);
    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);

    Tensor<T> weight;  // (out, in)
    Tensor<T> bias;    // (out)
    Tensor<T> grad_weight, grad_bias;

private:
    int in_ = 0, out_ = 0;
    Tensor<T> input_;
};

// Nearest-neighbor doubling of all three spatial axes.
template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample2x_nearest_backward(const Tensor<T>& gout);

// Trilinear (voxel-center aligned) resize of a (C, z, y, x) field.
template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, const std::array<int, 3>& target);

// ----------------------------------------------------------------------
// Attention. q, k, v are (heads, n_tokens, head_dim).
// ----------------------------------------------------------------------

// Kernelized attention with feature map phi = elu(x) + 1, evaluated in the
// associativity-reordered form whose cost is linear in n_tokens:
//   out_n = phi(q_n) (phi(K)^T V) / (phi(q_n) . sum_m phi(k_m))
template <typename T>
Tensor<T> linear_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

// softmax(q k^T / sqrt(head_dim)) v
template <typename T>
Tensor<T> quadratic_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

template <typename T>
class LinearAttentionCore {
public:
    Tensor<T> forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);
    void backward(const Tensor<T>& gout, Tensor<T>& gq, Tensor<T>& gk, Tensor<T>& gv);

private:
    Tensor<T> preq_, prek_;     // pre-activation q, k (for phi')
    Tensor<T> fq_, fk_, v_;     // phi(q), phi(k), v
    Tensor<T> s_;               // (H, D, D) = phi(K)^T V
    Tensor<T> zsum_;            // (H, D)
    Tensor<T> den_;             // (H, N)
    Tensor<T> out_;
};

template <typename T>
class QuadraticAttentionCore {
public:
    Tensor<T> forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);
    void backward(const Tensor<T>& gout, Tensor<T>& gq, Tensor<T>& gk, Tensor<T>& gv);

private:
    Tensor<T> q_, k_, v_;
    Tensor<T> attn_;  // (H, N, N) softmax rows
};

enum class AttnKind { none, linear, quadratic };

AttnKind attn_kind_from_name(const std::string& s);
std::string attn_kind_name(AttnKind k);

// Pre-norm attention block with residual connection:
//   x + proj(attend(split_heads(qkv(groupnorm(x)))))
template <typename T>
class AttentionBlock {
public:
    AttentionBlock() = default;
    AttentionBlock(int channels, int head_dim, AttnKind kind);

    void init(Rng& rng);
    Tensor<T> forward(const Tensor<T>& x);
    Tensor<T> backward(const Tensor<T>& gout);
    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);

private:
    int channels_ = 0, heads_ = 1, head_dim_ = 0;
    AttnKind kind_ = AttnKind::none;
    GroupNorm<T> gn_;
    Conv3d<T> qkv_;
    Conv3d<T> proj_;
    LinearAttentionCore<T> lin_core_;
    QuadraticAttentionCore<T> quad_core_;
    std::array<int, 3> spatial_{0, 0, 0};
};

// ----------------------------------------------------------------------
// Adam optimizer over a fixed parameter list.
// ----------------------------------------------------------------------

template <typename T>
class Adam {
public:
    Adam() = default;
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<ParamRef<T>>& params);
    void zero_grad(std::vector<ParamRef<T>>& params);

    int64_t t() const { return t_; }

    // moment access for checkpointing (aligned with the param list order)
    std::vector<Tensor<T>>& m() { return m_; }
    std::vector<Tensor<T>>& v() { return v_; }
    void restore(int64_t t, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v);

private:
    double lr_ = 1e-4, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

// Sinusoidal timestep embedding: interleaved sin/cos at geometrically
// spaced frequencies, dim must be even.
template <typename T>
Tensor<T> time_embedding(int t, int dim);

}  // namespace voxdiff
