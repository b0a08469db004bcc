#include "voxdiff/denoiser.hpp"

#include <cstring>

#include "voxdiff/common.hpp"

namespace voxdiff {

void DenoiserConfig::normalize() {
    if (in_channels != 1 && in_channels != 2)
        throw ConfigError("denoiser in_channels must be 1 or 2");
    if (base_width < 1) throw ConfigError("base_width must be positive");
    if (levels < 2) throw ConfigError("denoiser needs at least two levels");
    if (int(channel_mult.size()) != levels)
        throw ConfigError("channel_mult must list one multiplier per level");
    for (int m : channel_mult)
        if (m < 1) throw ConfigError("channel multipliers must be positive");
    if (attn.empty()) {
        attn.assign(size_t(levels), "linear");
        attn.back() = "quadratic";
    }
    if (int(attn.size()) != levels)
        throw ConfigError("attn must list one kind per level");
    for (int l = 0; l < levels; ++l) {
        const AttnKind k = attn_kind_from_name(attn[size_t(l)]);
        if (k == AttnKind::quadratic && l != levels - 1)
            throw ConfigError("quadratic attention is only supported at the deepest level");
    }
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        throw ConfigError("time_embed_dim must be even and at least 2");
    if (head_dim < 1) throw ConfigError("head_dim must be positive");
}

std::vector<int> DenoiserConfig::level_channels() const {
    std::vector<int> ch;
    for (int m : channel_mult) ch.push_back(base_width * m);
    return ch;
}

// ----------------------------------------------------------------------
// ResBlock
// ----------------------------------------------------------------------

template <typename T>
ResBlock<T>::ResBlock(int c_in, int c_out, int emb_dim) : c_in_(c_in), c_out_(c_out) {
    gn1_ = GroupNorm<T>(c_in, GroupNorm<T>::default_groups(c_in));
    conv1_ = Conv3d<T>(c_in, c_out, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
    affine_ = Linear<T>(emb_dim, 2 * c_out);
    gn2_ = GroupNorm<T>(c_out, GroupNorm<T>::default_groups(c_out));
    conv2_ = Conv3d<T>(c_out, c_out, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
    has_skip_ = c_in != c_out;
    if (has_skip_) skip_ = Conv3d<T>(c_in, c_out, {1, 1, 1}, {1, 1, 1}, {0, 0, 0});
}

template <typename T>
void ResBlock<T>::init(Rng& rng) {
    conv1_.init(rng);
    affine_.init(rng);
    conv2_.init(rng);
    if (has_skip_) skip_.init(rng);
}

template <typename T>
Tensor<T> ResBlock<T>::forward(const Tensor<T>& x, const Tensor<T>& emb) {
    Tensor<T> h = conv1_.forward(act1_.forward(gn1_.forward(x)));
    Tensor<T> sb = affine_.forward(emb);
    norm2_ = gn2_.forward(h);
    scale_ = Tensor<T>({c_out_});
    Tensor<T> m(norm2_.shape());
    const size_t vox = norm2_.numel() / c_out_;
    for (int c = 0; c < c_out_; ++c) {
        const T s = sb[size_t(c)];
        const T b = sb[size_t(c_out_ + c)];
        scale_[size_t(c)] = s;
        const T* src = norm2_.data() + size_t(c) * vox;
        T* dst = m.data() + size_t(c) * vox;
        for (size_t i = 0; i < vox; ++i) dst[i] = src[i] * (T(1) + s) + b;
    }
    Tensor<T> out = conv2_.forward(act2_.forward(m));
    if (has_skip_) {
        Tensor<T> r = skip_.forward(x);
        axpy(T(1), r, out);
    } else {
        axpy(T(1), x, out);
    }
    return out;
}

template <typename T>
Tensor<T> ResBlock<T>::backward(const Tensor<T>& gout, Tensor<T>& gemb) {
    Tensor<T> gm = act2_.backward(conv2_.backward(gout));
    const size_t vox = norm2_.numel() / c_out_;
    Tensor<T> gsb({2 * c_out_});
    Tensor<T> gg(norm2_.shape());
    for (int c = 0; c < c_out_; ++c) {
        const T s = scale_[size_t(c)];
        const T* pm = gm.data() + size_t(c) * vox;
        const T* pn = norm2_.data() + size_t(c) * vox;
        T* pg = gg.data() + size_t(c) * vox;
        double ds = 0, db = 0;
        for (size_t i = 0; i < vox; ++i) {
            pg[i] = pm[i] * (T(1) + s);
            ds += double(pm[i]) * double(pn[i]);
            db += pm[i];
        }
        gsb[size_t(c)] = static_cast<T>(ds);
        gsb[size_t(c_out_ + c)] = static_cast<T>(db);
    }
    axpy(T(1), affine_.backward(gsb), gemb);
    Tensor<T> gx = gn1_.backward(act1_.backward(conv1_.backward(gn2_.backward(gg))));
    if (has_skip_)
        axpy(T(1), skip_.backward(gout), gx);
    else
        axpy(T(1), gout, gx);
    return gx;
}

template <typename T>
void ResBlock<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    gn1_.collect(prefix + ".gn1", out);
    conv1_.collect(prefix + ".conv1", out);
    affine_.collect(prefix + ".emb", out);
    gn2_.collect(prefix + ".gn2", out);
    conv2_.collect(prefix + ".conv2", out);
    if (has_skip_) skip_.collect(prefix + ".skip", out);
}

// ----------------------------------------------------------------------
// Denoiser
// ----------------------------------------------------------------------

template <typename T>
Denoiser<T>::Denoiser(DenoiserConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.normalize();
    ch_ = cfg_.level_channels();
    const int L = cfg_.levels;
    const int ted = cfg_.time_embed_dim;
    time_lin1_ = Linear<T>(ted, ted);
    time_lin2_ = Linear<T>(ted, ted);
    stem_ = Conv3d<T>(cfg_.in_channels, ch_[0], {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
    enc_.resize(size_t(L));
    for (int l = 0; l < L; ++l) {
        const int cin = l == 0 ? ch_[0] : ch_[size_t(l - 1)];
        enc_[size_t(l)].res0 = ResBlock<T>(cin, ch_[size_t(l)], ted);
        enc_[size_t(l)].res1 = ResBlock<T>(ch_[size_t(l)], ch_[size_t(l)], ted);
        enc_[size_t(l)].attn = AttentionBlock<T>(ch_[size_t(l)], cfg_.head_dim,
                                                 attn_kind_from_name(cfg_.attn[size_t(l)]));
        if (l < L - 1)
            enc_[size_t(l)].down =
                Conv3d<T>(ch_[size_t(l)], ch_[size_t(l)], {3, 3, 3}, {2, 2, 2}, {1, 1, 1});
    }
    dec_.resize(size_t(L - 1));
    for (int l = 0; l < L - 1; ++l) {
        dec_[size_t(l)].up =
            Conv3d<T>(ch_[size_t(l + 1)], ch_[size_t(l)], {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
        dec_[size_t(l)].res0 = ResBlock<T>(2 * ch_[size_t(l)], ch_[size_t(l)], ted);
        dec_[size_t(l)].res1 = ResBlock<T>(ch_[size_t(l)], ch_[size_t(l)], ted);
        dec_[size_t(l)].attn = AttentionBlock<T>(ch_[size_t(l)], cfg_.head_dim,
                                                 attn_kind_from_name(cfg_.attn[size_t(l)]));
    }
    out_gn_ = GroupNorm<T>(ch_[0], GroupNorm<T>::default_groups(ch_[0]));
    out_conv_ = Conv3d<T>(ch_[0], 1, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
}

template <typename T>
void Denoiser<T>::init(Rng& rng) {
    time_lin1_.init(rng);
    time_lin2_.init(rng);
    stem_.init(rng);
    for (auto& e : enc_) {
        e.res0.init(rng);
        e.res1.init(rng);
        e.attn.init(rng);
        if (e.down.c_out() > 0) e.down.init(rng);
    }
    for (auto& d : dec_) {
        d.up.init(rng);
        d.res0.init(rng);
        d.res1.init(rng);
        d.attn.init(rng);
    }
    out_conv_.zero_init();
}

template <typename T>
std::vector<ParamRef<T>> Denoiser<T>::params() {
    std::vector<ParamRef<T>> out;
    time_lin1_.collect("time.lin1", out);
    time_lin2_.collect("time.lin2", out);
    stem_.collect("stem", out);
    for (int l = 0; l < cfg_.levels; ++l) {
        const std::string p = "enc" + std::to_string(l);
        enc_[size_t(l)].res0.collect(p + ".res0", out);
        enc_[size_t(l)].res1.collect(p + ".res1", out);
        enc_[size_t(l)].attn.collect(p + ".attn", out);
        if (l < cfg_.levels - 1) enc_[size_t(l)].down.collect(p + ".down", out);
    }
    for (int l = 0; l < cfg_.levels - 1; ++l) {
        const std::string p = "dec" + std::to_string(l);
        dec_[size_t(l)].up.collect(p + ".up", out);
        dec_[size_t(l)].res0.collect(p + ".res0", out);
        dec_[size_t(l)].res1.collect(p + ".res1", out);
        dec_[size_t(l)].attn.collect(p + ".attn", out);
    }
    out_gn_.collect("out.gn", out);
    out_conv_.collect("out.conv", out);
    return out;
}

template <typename T>
DenoiserOutput<T> Denoiser<T>::forward(const Tensor<T>& x, int t, bool want_pyramid) {
    if (x.rank() != 4 || x.size(0) != cfg_.in_channels)
        throw ConfigError("denoiser input channel count mismatch");
    const int L = cfg_.levels;
    const int div = 1 << (L - 1);
    for (int a = 1; a <= 3; ++a)
        if (x.size(a) % div != 0)
            throw ConfigError("input spatial dims must be divisible by " + std::to_string(div));
    Tensor<T> emb = time_lin2_.forward(
        time_act_.forward(time_lin1_.forward(time_embedding<T>(t, cfg_.time_embed_dim))));
    Tensor<T> h = stem_.forward(x);
    skips_.assign(size_t(L), Tensor<T>());
    for (int l = 0; l < L; ++l) {
        auto& e = enc_[size_t(l)];
        h = e.res0.forward(h, emb);
        h = e.res1.forward(h, emb);
        h = e.attn.forward(h);
        skips_[size_t(l)] = h;
        if (l < L - 1) h = e.down.forward(h);
    }
    DenoiserOutput<T> out;
    out.pyramid.resize(want_pyramid ? size_t(L) : 0);
    if (want_pyramid) out.pyramid[size_t(L - 1)] = h;
    for (int l = L - 2; l >= 0; --l) {
        auto& d = dec_[size_t(l)];
        Tensor<T> u = d.up.forward(upsample2x_nearest(h));
        Tensor<T> cat({2 * ch_[size_t(l)], u.size(1), u.size(2), u.size(3)});
        const size_t half = skips_[size_t(l)].numel();
        std::memcpy(cat.data(), skips_[size_t(l)].data(), half * sizeof(T));
        std::memcpy(cat.data() + half, u.data(), half * sizeof(T));
        h = d.res0.forward(cat, emb);
        h = d.res1.forward(h, emb);
        h = d.attn.forward(h);
        if (want_pyramid) out.pyramid[size_t(l)] = h;
    }
    out.eps = out_conv_.forward(out_act_.forward(out_gn_.forward(h)));
    return out;
}

template <typename T>
void Denoiser<T>::backward(const Tensor<T>& grad_eps) {
    const int L = cfg_.levels;
    Tensor<T> gemb({cfg_.time_embed_dim});
    Tensor<T> g = out_gn_.backward(out_act_.backward(out_conv_.backward(grad_eps)));
    std::vector<Tensor<T>> gskip(static_cast<size_t>(L));
    for (int l = 0; l < L - 1; ++l) {
        auto& d = dec_[size_t(l)];
        g = d.attn.backward(g);
        g = d.res1.backward(g, gemb);
        Tensor<T> gcat = d.res0.backward(g, gemb);
        const int c = ch_[size_t(l)];
        gskip[size_t(l)] = Tensor<T>({c, gcat.size(1), gcat.size(2), gcat.size(3)});
        Tensor<T> gu(gskip[size_t(l)].shape());
        const size_t half = gu.numel();
        std::memcpy(gskip[size_t(l)].data(), gcat.data(), half * sizeof(T));
        std::memcpy(gu.data(), gcat.data() + half, half * sizeof(T));
        g = upsample2x_nearest_backward(d.up.backward(gu));
    }
    for (int l = L - 1; l >= 0; --l) {
        auto& e = enc_[size_t(l)];
        if (l < L - 1) {
            Tensor<T> gd = e.down.backward(g);
            axpy(T(1), gskip[size_t(l)], gd);
            g = std::move(gd);
        }
        g = e.attn.backward(g);
        g = e.res1.backward(g, gemb);
        g = e.res0.backward(g, gemb);
    }
    stem_.backward(g, /*want_input_grad=*/false);
    time_lin1_.backward(time_act_.backward(time_lin2_.backward(gemb)));
}

template <typename T>
Tensor<T> Denoiser<T>::forward_eps(const Tensor<T>& x_t, int t, const Tensor<T>* cond) {
    if (x_t.rank() != 4 || x_t.size(0) != 1)
        throw ConfigError("noisy input must have a single channel");
    if (cfg_.in_channels == 2 && cond == nullptr)
        throw ConfigError("model was trained with a coordinate channel; none provided");
    if (cfg_.in_channels == 1 && cond != nullptr)
        throw ConfigError("model takes no coordinate channel");
    if (cond == nullptr) return forward(x_t, t).eps;
    if (!cond->same_shape(x_t)) throw ConfigError("coordinate channel shape mismatch");
    Tensor<T> x({2, x_t.size(1), x_t.size(2), x_t.size(3)});
    std::memcpy(x.data(), x_t.data(), size_t(x_t.numel()) * sizeof(T));
    std::memcpy(x.data() + x_t.numel(), cond->data(), size_t(x_t.numel()) * sizeof(T));
    return forward(x, t).eps;
}

template class ResBlock<float>;
template class ResBlock<double>;
template class Denoiser<float>;
template class Denoiser<double>;

}  // namespace voxdiff
