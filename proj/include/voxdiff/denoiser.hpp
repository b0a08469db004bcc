#pragma once

#include <string>
#include <vector>

#include "voxdiff/diffusion.hpp"
#include "voxdiff/nn.hpp"

namespace voxdiff {

struct DenoiserConfig {
    int in_channels = 1;  // 1 = image only, 2 = image + coordinate channel
    int base_width = 16;
    int levels = 3;
    std::vector<int> channel_mult = {1, 2, 4};
    // per-level attention kind; empty means linear everywhere except the
    // deepest level, which gets quadratic
    std::vector<std::string> attn;
    int time_embed_dim = 64;
    int head_dim = 16;

    // fills defaulted fields and rejects inconsistent ones
    void normalize();
    std::vector<int> level_channels() const;
};

// Residual block with a per-channel affine (scale, shift) computed from the
// timestep embedding and applied after the second normalization.
template <typename T>
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(int c_in, int c_out, int emb_dim);

    void init(Rng& rng);
    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& emb);
    Tensor<T> backward(const Tensor<T>& gout, Tensor<T>& gemb);
    void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);

private:
    int c_in_ = 0, c_out_ = 0;
    GroupNorm<T> gn1_, gn2_;
    SiLU<T> act1_, act2_;
    Conv3d<T> conv1_, conv2_;
    Linear<T> affine_;
    bool has_skip_ = false;
    Conv3d<T> skip_;
    Tensor<T> norm2_;  // gn2 output, pre scale-shift
    Tensor<T> scale_;
};

template <typename T>
struct DenoiserOutput {
    Tensor<T> eps;
    // decoder activations, index 0 = full resolution; the last entry is the
    // bottleneck output
    std::vector<Tensor<T>> pyramid;
};

template <typename T>
class Denoiser : public EpsilonModel<T> {
public:
    explicit Denoiser(DenoiserConfig cfg);

    void init(Rng& rng);
    std::vector<ParamRef<T>> params();

    DenoiserOutput<T> forward(const Tensor<T>& x, int t, bool want_pyramid = false);
    void backward(const Tensor<T>& grad_eps);

    int in_channels() const override { return cfg_.in_channels; }
    Tensor<T> forward_eps(const Tensor<T>& x_t, int t, const Tensor<T>* cond) override;
    void backward_eps(const Tensor<T>& grad_eps) override { backward(grad_eps); }

    const DenoiserConfig& config() const { return cfg_; }

private:
    struct EncLevel {
        ResBlock<T> res0, res1;
        AttentionBlock<T> attn;
        Conv3d<T> down;  // absent on the deepest level
    };
    struct DecLevel {
        Conv3d<T> up;
        ResBlock<T> res0, res1;
        AttentionBlock<T> attn;
    };

    DenoiserConfig cfg_;
    std::vector<int> ch_;
    Linear<T> time_lin1_, time_lin2_;
    SiLU<T> time_act_;
    Conv3d<T> stem_;
    std::vector<EncLevel> enc_;
    std::vector<DecLevel> dec_;  // indexed by level, size levels-1
    GroupNorm<T> out_gn_;
    SiLU<T> out_act_;
    Conv3d<T> out_conv_;

    std::vector<Tensor<T>> skips_;
};

}  // namespace voxdiff
