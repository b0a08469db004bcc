#include "voxdiff/nn.hpp"

#include <cmath>
#include <cstring>

#include "voxdiff/common.hpp"

namespace voxdiff {

template <typename T>
void trunc_normal_init(Tensor<T>& t, double stddev, Rng& rng) {
    for (size_t i = 0; i < t.numel(); ++i) {
        double v;
        do {
            v = rng.normal() * stddev;
        } while (std::abs(v) > 2.0 * stddev);
        t.data()[i] = static_cast<T>(v);
    }
}

// ----------------------------------------------------------------------
// Conv3d
// ----------------------------------------------------------------------

template <typename T>
Conv3d<T>::Conv3d(int c_in, int c_out, std::array<int, 3> kernel, std::array<int, 3> stride,
                  std::array<int, 3> pad)
    : c_in_(c_in), c_out_(c_out), kernel_(kernel), stride_(stride), pad_(pad) {
    if (c_in < 1 || c_out < 1) throw ConfigError("conv channels must be positive");
    for (int a = 0; a < 3; ++a) {
        if (kernel_[a] < 1 || stride_[a] < 1 || pad_[a] < 0)
            throw ConfigError("invalid conv geometry");
    }
    weight = Tensor<T>({c_out, c_in, kernel_[0], kernel_[1], kernel_[2]});
    bias = Tensor<T>({c_out});
    grad_weight = Tensor<T>(weight.shape());
    grad_bias = Tensor<T>(bias.shape());
}

template <typename T>
void Conv3d<T>::init(Rng& rng, double stddev) {
    trunc_normal_init(weight, stddev, rng);
    bias.fill(T(0));
}

template <typename T>
void Conv3d<T>::zero_init() {
    weight.fill(T(0));
    bias.fill(T(0));
}

template <typename T>
bool Conv3d<T>::is_pointwise() const {
    return kernel_ == std::array<int, 3>{1, 1, 1} && stride_ == std::array<int, 3>{1, 1, 1} &&
           pad_ == std::array<int, 3>{0, 0, 0};
}

template <typename T>
void Conv3d<T>::im2col(const Tensor<T>& x, std::array<int, 3> out_sp) {
    const int Z = x.size(1), Y = x.size(2), X = x.size(3);
    const int OZ = out_sp[0], OY = out_sp[1], OX = out_sp[2];
    const size_t n = size_t(OZ) * OY * OX;
    const int K = c_in_ * kernel_[0] * kernel_[1] * kernel_[2];
    col_.assign(size_t(K) * n, T(0));
    const T* src = x.data();
    for (int ci = 0; ci < c_in_; ++ci) {
        for (int dz = 0; dz < kernel_[0]; ++dz) {
            for (int dy = 0; dy < kernel_[1]; ++dy) {
                for (int dx = 0; dx < kernel_[2]; ++dx) {
                    const int k =
                        ((ci * kernel_[0] + dz) * kernel_[1] + dy) * kernel_[2] + dx;
                    T* row = col_.data() + size_t(k) * n;
                    for (int oz = 0; oz < OZ; ++oz) {
                        const int iz = oz * stride_[0] + dz - pad_[0];
                        if (iz < 0 || iz >= Z) continue;
                        for (int oy = 0; oy < OY; ++oy) {
                            const int iy = oy * stride_[1] + dy - pad_[1];
                            if (iy < 0 || iy >= Y) continue;
                            T* dst = row + (size_t(oz) * OY + oy) * OX;
                            const T* in =
                                src + ((size_t(ci) * Z + iz) * Y + iy) * X;
                            if (stride_[2] == 1) {
                                int lo = std::max(0, pad_[2] - dx);
                                int hi = std::min(OX, X - dx + pad_[2]);
                                if (hi > lo)
                                    std::memcpy(dst + lo, in + lo + dx - pad_[2],
                                                size_t(hi - lo) * sizeof(T));
                            } else {
                                for (int ox = 0; ox < OX; ++ox) {
                                    const int ix = ox * stride_[2] + dx - pad_[2];
                                    if (ix >= 0 && ix < X) dst[ox] = in[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
Tensor<T> Conv3d<T>::forward(const Tensor<T>& x) {
    if (x.rank() != 4 || x.size(0) != c_in_)
        throw ConfigError("conv input must be (c_in, z, y, x)");
    for (int a = 0; a < 3; ++a) {
        const int o = (x.size(a + 1) + 2 * pad_[a] - kernel_[a]) / stride_[a] + 1;
        if (x.size(a + 1) + 2 * pad_[a] < kernel_[a] || o < 1)
            throw ConfigError("conv input smaller than kernel");
        in_sp_[a] = x.size(a + 1);
        out_sp_[a] = o;
    }
    const size_t n = size_t(out_sp_[0]) * out_sp_[1] * out_sp_[2];
    Tensor<T> out({c_out_, out_sp_[0], out_sp_[1], out_sp_[2]});
    if (is_pointwise()) {
        input_ = x;
        gemm(false, false, c_out_, int(n), c_in_, T(1), weight.data(), c_in_, x.data(),
             int(n), T(0), out.data(), int(n));
    } else {
        // the column buffer outlives forward, so backward needs no input copy
        im2col(x, out_sp_);
        const int K = c_in_ * kernel_[0] * kernel_[1] * kernel_[2];
        gemm(false, false, c_out_, int(n), K, T(1), weight.data(), K, col_.data(), int(n),
             T(0), out.data(), int(n));
        input_ = Tensor<T>();
    }
    T* o = out.data();
    for (int c = 0; c < c_out_; ++c) {
        const T b = bias[size_t(c)];
        for (size_t i = 0; i < n; ++i) o[size_t(c) * n + i] += b;
    }
    return out;
}

template <typename T>
Tensor<T> Conv3d<T>::backward(const Tensor<T>& gout, bool want_input_grad) {
    const size_t n = size_t(out_sp_[0]) * out_sp_[1] * out_sp_[2];
    if (gout.rank() != 4 || gout.size(0) != c_out_ || size_t(gout.size(1)) * gout.size(2) * gout.size(3) != n)
        throw ConfigError("conv gradient shape mismatch");
    const T* g = gout.data();
    for (int c = 0; c < c_out_; ++c) {
        double acc = 0;
        for (size_t i = 0; i < n; ++i) acc += g[size_t(c) * n + i];
        grad_bias[size_t(c)] += static_cast<T>(acc);
    }
    if (is_pointwise()) {
        gemm(false, true, c_out_, c_in_, int(n), T(1), g, int(n), input_.data(), int(n),
             T(1), grad_weight.data(), c_in_);
        if (!want_input_grad) return Tensor<T>({1});
        Tensor<T> gin(input_.shape());
        gemm(true, false, c_in_, int(n), c_out_, T(1), weight.data(), c_in_, g, int(n),
             T(0), gin.data(), int(n));
        return gin;
    }
    const int K = c_in_ * kernel_[0] * kernel_[1] * kernel_[2];
    gemm(false, true, c_out_, K, int(n), T(1), g, int(n), col_.data(), int(n), T(1),
         grad_weight.data(), K);
    if (!want_input_grad) return Tensor<T>({1});
    // col_ doubles as the column-gradient buffer once grad_weight is done
    std::vector<T> gcol(size_t(K) * n);
    gemm(true, false, K, int(n), c_out_, T(1), weight.data(), K, g, int(n), T(0),
         gcol.data(), int(n));
    const int Z = in_sp_[0], Y = in_sp_[1], X = in_sp_[2];
    Tensor<T> gin({c_in_, Z, Y, X});
    T* dst0 = gin.data();
    const int OZ = out_sp_[0], OY = out_sp_[1], OX = out_sp_[2];
    for (int ci = 0; ci < c_in_; ++ci) {
        for (int dz = 0; dz < kernel_[0]; ++dz) {
            for (int dy = 0; dy < kernel_[1]; ++dy) {
                for (int dx = 0; dx < kernel_[2]; ++dx) {
                    const int k =
                        ((ci * kernel_[0] + dz) * kernel_[1] + dy) * kernel_[2] + dx;
                    const T* row = gcol.data() + size_t(k) * n;
                    for (int oz = 0; oz < OZ; ++oz) {
                        const int iz = oz * stride_[0] + dz - pad_[0];
                        if (iz < 0 || iz >= Z) continue;
                        for (int oy = 0; oy < OY; ++oy) {
                            const int iy = oy * stride_[1] + dy - pad_[1];
                            if (iy < 0 || iy >= Y) continue;
                            const T* src = row + (size_t(oz) * OY + oy) * OX;
                            T* dst = dst0 + ((size_t(ci) * Z + iz) * Y + iy) * X;
                            for (int ox = 0; ox < OX; ++ox) {
                                const int ix = ox * stride_[2] + dx - pad_[2];
                                if (ix >= 0 && ix < X) dst[ix] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    return gin;
}

template <typename T>
void Conv3d<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".w", &weight, &grad_weight});
    out.push_back({prefix + ".b", &bias, &grad_bias});
}

// ----------------------------------------------------------------------
// GroupNorm
// ----------------------------------------------------------------------

template <typename T>
GroupNorm<T>::GroupNorm(int channels, int groups) : channels_(channels), groups_(groups) {
    if (channels < 1 || groups < 1 || channels % groups != 0)
        throw ConfigError("group count must divide channel count");
    gamma = Tensor<T>::full({channels}, T(1));
    beta = Tensor<T>({channels});
    grad_gamma = Tensor<T>({channels});
    grad_beta = Tensor<T>({channels});
}

template <typename T>
int GroupNorm<T>::default_groups(int channels) {
    for (int g = std::min(8, channels); g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

template <typename T>
Tensor<T> GroupNorm<T>::forward(const Tensor<T>& x) {
    if (x.rank() < 2 || x.size(0) != channels_)
        throw ConfigError("groupnorm input must lead with channels");
    const size_t vox = x.numel() / channels_;
    const int cg = channels_ / groups_;
    xhat_ = Tensor<T>(x.shape());
    inv_std_.assign(groups_, 0.0);
    Tensor<T> out(x.shape());
    const double eps = 1e-5;
    for (int g = 0; g < groups_; ++g) {
        const T* px = x.data() + size_t(g) * cg * vox;
        const size_t m = size_t(cg) * vox;
        double mean = 0;
        for (size_t i = 0; i < m; ++i) mean += px[i];
        mean /= double(m);
        double var = 0;
        for (size_t i = 0; i < m; ++i) {
            const double d = px[i] - mean;
            var += d * d;
        }
        var /= double(m);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std_[g] = is;
        T* ph = xhat_.data() + size_t(g) * cg * vox;
        T* po = out.data() + size_t(g) * cg * vox;
        for (int c = 0; c < cg; ++c) {
            const T gam = gamma[size_t(g * cg + c)];
            const T bet = beta[size_t(g * cg + c)];
            for (size_t i = 0; i < vox; ++i) {
                const T h = static_cast<T>((px[size_t(c) * vox + i] - mean) * is);
                ph[size_t(c) * vox + i] = h;
                po[size_t(c) * vox + i] = gam * h + bet;
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> GroupNorm<T>::backward(const Tensor<T>& gout) {
    if (!gout.same_shape(xhat_)) throw ConfigError("groupnorm gradient shape mismatch");
    const size_t vox = xhat_.numel() / channels_;
    const int cg = channels_ / groups_;
    Tensor<T> gin(xhat_.shape());
    for (int g = 0; g < groups_; ++g) {
        const size_t base = size_t(g) * cg * vox;
        const T* pg = gout.data() + base;
        const T* ph = xhat_.data() + base;
        const double m = double(cg) * double(vox);
        double s1 = 0, s2 = 0;
        for (int c = 0; c < cg; ++c) {
            const double gam = gamma[size_t(g * cg + c)];
            double dgam = 0, dbet = 0;
            for (size_t i = 0; i < vox; ++i) {
                const double go = pg[size_t(c) * vox + i];
                const double h = ph[size_t(c) * vox + i];
                dgam += go * h;
                dbet += go;
                s1 += go * gam;
                s2 += go * gam * h;
            }
            grad_gamma[size_t(g * cg + c)] += static_cast<T>(dgam);
            grad_beta[size_t(g * cg + c)] += static_cast<T>(dbet);
        }
        s1 /= m;
        s2 /= m;
        const double is = inv_std_[g];
        T* pi = gin.data() + base;
        for (int c = 0; c < cg; ++c) {
            const double gam = gamma[size_t(g * cg + c)];
            for (size_t i = 0; i < vox; ++i) {
                const double dxhat = pg[size_t(c) * vox + i] * gam;
                const double h = ph[size_t(c) * vox + i];
                pi[size_t(c) * vox + i] = static_cast<T>(is * (dxhat - s1 - h * s2));
            }
        }
    }
    return gin;
}

template <typename T>
void GroupNorm<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".g", &gamma, &grad_gamma});
    out.push_back({prefix + ".b", &beta, &grad_beta});
}

// ----------------------------------------------------------------------
// SiLU, Linear
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> SiLU<T>::forward(const Tensor<T>& x) {
    input_ = x;
    sig_ = Tensor<T>(x.shape());
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* ps = sig_.data();
    T* po = out.data();
    for (size_t i = 0; i < x.numel(); ++i) {
        const T s = sigmoid(px[i]);
        ps[i] = s;
        po[i] = px[i] * s;
    }
    return out;
}

template <typename T>
Tensor<T> SiLU<T>::backward(const Tensor<T>& gout) {
    if (!gout.same_shape(input_)) throw ConfigError("silu gradient shape mismatch");
    Tensor<T> gin(input_.shape());
    const T* pg = gout.data();
    const T* px = input_.data();
    const T* ps = sig_.data();
    T* pi = gin.data();
    for (size_t i = 0; i < input_.numel(); ++i) {
        const T s = ps[i];
        pi[i] = pg[i] * s * (T(1) + px[i] * (T(1) - s));
    }
    return gin;
}

template <typename T>
Tensor<T> ReLU<T>::forward(const Tensor<T>& x) {
    input_ = x;
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (size_t i = 0; i < x.numel(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    return out;
}

template <typename T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& gout) {
    if (!gout.same_shape(input_)) throw ConfigError("relu gradient shape mismatch");
    Tensor<T> gin(input_.shape());
    const T* pg = gout.data();
    const T* px = input_.data();
    T* pi = gin.data();
    for (size_t i = 0; i < input_.numel(); ++i) pi[i] = px[i] > T(0) ? pg[i] : T(0);
    return gin;
}

template <typename T>
Linear<T>::Linear(int in, int out) : in_(in), out_(out) {
    if (in < 1 || out < 1) throw ConfigError("linear dims must be positive");
    weight = Tensor<T>({out, in});
    bias = Tensor<T>({out});
    grad_weight = Tensor<T>(weight.shape());
    grad_bias = Tensor<T>(bias.shape());
}

template <typename T>
void Linear<T>::init(Rng& rng, double stddev) {
    trunc_normal_init(weight, stddev, rng);
    bias.fill(T(0));
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) {
    if (x.rank() != 1 || x.size(0) != in_) throw ConfigError("linear input shape mismatch");
    input_ = x;
    Tensor<T> out({out_});
    for (int o = 0; o < out_; ++o) {
        double acc = bias[size_t(o)];
        const T* w = weight.data() + size_t(o) * in_;
        for (int i = 0; i < in_; ++i) acc += double(w[i]) * double(x[size_t(i)]);
        out[size_t(o)] = static_cast<T>(acc);
    }
    return out;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& gout) {
    if (gout.rank() != 1 || gout.size(0) != out_)
        throw ConfigError("linear gradient shape mismatch");
    Tensor<T> gin({in_});
    for (int o = 0; o < out_; ++o) {
        const T g = gout[size_t(o)];
        grad_bias[size_t(o)] += g;
        T* gw = grad_weight.data() + size_t(o) * in_;
        const T* w = weight.data() + size_t(o) * in_;
        for (int i = 0; i < in_; ++i) {
            gw[i] += g * input_[size_t(i)];
            gin[size_t(i)] += g * w[i];
        }
    }
    return gin;
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".w", &weight, &grad_weight});
    out.push_back({prefix + ".b", &bias, &grad_bias});
}

// ----------------------------------------------------------------------
// Upsampling
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
    if (x.rank() != 4) throw ConfigError("upsample expects (c, z, y, x)");
    const int C = x.size(0), Z = x.size(1), Y = x.size(2), X = x.size(3);
    Tensor<T> out({C, 2 * Z, 2 * Y, 2 * X});
    for (int c = 0; c < C; ++c)
        for (int z = 0; z < 2 * Z; ++z)
            for (int y = 0; y < 2 * Y; ++y) {
                const T* src = x.data() + ((size_t(c) * Z + z / 2) * Y + y / 2) * X;
                T* dst = out.data() + ((size_t(c) * 2 * Z + z) * 2 * Y + y) * 2 * X;
                for (int ox = 0; ox < 2 * X; ++ox) dst[ox] = src[ox / 2];
            }
    return out;
}

template <typename T>
Tensor<T> upsample2x_nearest_backward(const Tensor<T>& gout) {
    if (gout.rank() != 4) throw ConfigError("upsample gradient expects (c, z, y, x)");
    const int C = gout.size(0), Z2 = gout.size(1), Y2 = gout.size(2), X2 = gout.size(3);
    if (Z2 % 2 || Y2 % 2 || X2 % 2) throw ConfigError("upsample gradient dims must be even");
    Tensor<T> gin({C, Z2 / 2, Y2 / 2, X2 / 2});
    for (int c = 0; c < C; ++c)
        for (int z = 0; z < Z2; ++z)
            for (int y = 0; y < Y2; ++y) {
                const T* src = gout.data() + ((size_t(c) * Z2 + z) * Y2 + y) * X2;
                T* dst = gin.data() + ((size_t(c) * (Z2 / 2) + z / 2) * (Y2 / 2) + y / 2) * (X2 / 2);
                for (int ox = 0; ox < X2; ++ox) dst[ox / 2] += src[ox];
            }
    return gin;
}

template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, const std::array<int, 3>& target) {
    if (x.rank() != 4) throw ConfigError("upsample expects (c, z, y, x)");
    const int C = x.size(0);
    const std::array<int, 3> src = {x.size(1), x.size(2), x.size(3)};
    Tensor<T> out({C, target[0], target[1], target[2]});
    std::array<std::vector<int>, 3> i0, i1;
    std::array<std::vector<double>, 3> w1;
    for (int a = 0; a < 3; ++a) {
        if (target[a] < 1) throw ConfigError("upsample target must be positive");
        i0[a].resize(target[a]);
        i1[a].resize(target[a]);
        w1[a].resize(target[a]);
        const double scale = double(src[a]) / double(target[a]);
        for (int i = 0; i < target[a]; ++i) {
            double s = (i + 0.5) * scale - 0.5;
            if (s < 0) s = 0;
            if (s > src[a] - 1) s = src[a] - 1;
            const int lo = int(std::floor(s));
            i0[a][i] = lo;
            i1[a][i] = std::min(lo + 1, src[a] - 1);
            w1[a][i] = s - lo;
        }
    }
    for (int c = 0; c < C; ++c) {
        const T* pc = x.data() + size_t(c) * src[0] * src[1] * src[2];
        T* po = out.data() + size_t(c) * target[0] * target[1] * target[2];
        for (int z = 0; z < target[0]; ++z)
            for (int y = 0; y < target[1]; ++y)
                for (int xx = 0; xx < target[2]; ++xx) {
                    const double wz = w1[0][z], wy = w1[1][y], wx = w1[2][xx];
                    double acc = 0;
                    for (int bz = 0; bz < 2; ++bz)
                        for (int by = 0; by < 2; ++by)
                            for (int bx = 0; bx < 2; ++bx) {
                                const int iz = bz ? i1[0][z] : i0[0][z];
                                const int iy = by ? i1[1][y] : i0[1][y];
                                const int ix = bx ? i1[2][xx] : i0[2][xx];
                                const double w = (bz ? wz : 1 - wz) * (by ? wy : 1 - wy) *
                                                 (bx ? wx : 1 - wx);
                                acc += w * pc[(size_t(iz) * src[1] + iy) * src[2] + ix];
                            }
                    *po++ = static_cast<T>(acc);
                }
    }
    return out;
}

// ----------------------------------------------------------------------
// Attention
// ----------------------------------------------------------------------

namespace {

template <typename T>
void check_attn_shapes(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (q.rank() != 3) throw ConfigError("attention expects (heads, tokens, dim)");
    if (!q.same_shape(k) || !q.same_shape(v))
        throw ConfigError("attention q, k, v shapes must match");
}

template <typename T>
inline T phi(T x) {
    // elu(x) + 1; strictly positive
    return x > T(0) ? x + T(1) : std::exp(x);
}

template <typename T>
inline T phi_grad(T pre, T post) {
    return pre > T(0) ? T(1) : post;
}

}  // namespace

template <typename T>
Tensor<T> LinearAttentionCore<T>::forward(const Tensor<T>& q, const Tensor<T>& k,
                                          const Tensor<T>& v) {
    check_attn_shapes(q, k, v);
    const int H = q.size(0), N = q.size(1), D = q.size(2);
    preq_ = q;
    prek_ = k;
    v_ = v;
    fq_ = Tensor<T>(q.shape());
    fk_ = Tensor<T>(k.shape());
    for (size_t i = 0; i < q.numel(); ++i) {
        fq_.data()[i] = phi(q.data()[i]);
        fk_.data()[i] = phi(k.data()[i]);
    }
    s_ = Tensor<T>({H, D, D});
    zsum_ = Tensor<T>({H, D});
    den_ = Tensor<T>({H, N});
    out_ = Tensor<T>(q.shape());
    const size_t hd = size_t(N) * D;
    for (int h = 0; h < H; ++h) {
        const T* fk = fk_.data() + h * hd;
        const T* fv = v_.data() + h * hd;
        const T* fq = fq_.data() + h * hd;
        T* s = s_.data() + size_t(h) * D * D;
        T* z = zsum_.data() + size_t(h) * D;
        T* den = den_.data() + size_t(h) * N;
        T* o = out_.data() + h * hd;
        gemm(true, false, D, D, N, T(1), fk, D, fv, D, T(0), s, D);
        for (int d = 0; d < D; ++d) {
            double acc = 0;
            for (int n = 0; n < N; ++n) acc += fk[size_t(n) * D + d];
            z[d] = static_cast<T>(acc);
        }
        gemm(false, false, N, D, D, T(1), fq, D, s, D, T(0), o, D);
        for (int n = 0; n < N; ++n) {
            double acc = 0;
            for (int d = 0; d < D; ++d) acc += double(fq[size_t(n) * D + d]) * double(z[d]);
            den[n] = static_cast<T>(acc);
            for (int d = 0; d < D; ++d) o[size_t(n) * D + d] /= den[n];
        }
    }
    return out_;
}

template <typename T>
void LinearAttentionCore<T>::backward(const Tensor<T>& gout, Tensor<T>& gq, Tensor<T>& gk,
                                      Tensor<T>& gv) {
    if (!gout.same_shape(out_)) throw ConfigError("attention gradient shape mismatch");
    const int H = preq_.size(0), N = preq_.size(1), D = preq_.size(2);
    gq = Tensor<T>(preq_.shape());
    gk = Tensor<T>(preq_.shape());
    gv = Tensor<T>(preq_.shape());
    std::vector<T> gs(size_t(N) * D), dden(N), ds(size_t(D) * D), dz(D);
    const size_t hd = size_t(N) * D;
    for (int h = 0; h < H; ++h) {
        const T* g = gout.data() + h * hd;
        const T* o = out_.data() + h * hd;
        const T* den = den_.data() + size_t(h) * N;
        const T* fq = fq_.data() + h * hd;
        const T* fk = fk_.data() + h * hd;
        const T* fv = v_.data() + h * hd;
        const T* s = s_.data() + size_t(h) * D * D;
        const T* z = zsum_.data() + size_t(h) * D;
        for (int n = 0; n < N; ++n) {
            double dot = 0;
            for (int d = 0; d < D; ++d) {
                gs[size_t(n) * D + d] = g[size_t(n) * D + d] / den[n];
                dot += double(g[size_t(n) * D + d]) * double(o[size_t(n) * D + d]);
            }
            dden[n] = static_cast<T>(-dot / den[n]);
        }
        T* pq = gq.data() + h * hd;
        T* pk = gk.data() + h * hd;
        T* pv = gv.data() + h * hd;
        // numerator path plus the n-th row rank-one term dden_n * z
        gemm(false, true, N, D, D, T(1), gs.data(), D, s, D, T(0), pq, D);
        for (int n = 0; n < N; ++n)
            for (int d = 0; d < D; ++d) pq[size_t(n) * D + d] += dden[n] * z[d];
        gemm(true, false, D, D, N, T(1), fq, D, gs.data(), D, T(0), ds.data(), D);
        for (int d = 0; d < D; ++d) {
            double acc = 0;
            for (int n = 0; n < N; ++n) acc += double(fq[size_t(n) * D + d]) * double(dden[n]);
            dz[d] = static_cast<T>(acc);
        }
        gemm(false, true, N, D, D, T(1), fv, D, ds.data(), D, T(0), pk, D);
        for (int n = 0; n < N; ++n)
            for (int d = 0; d < D; ++d) pk[size_t(n) * D + d] += dz[d];
        gemm(false, false, N, D, D, T(1), fk, D, ds.data(), D, T(0), pv, D);
        // chain through phi
        const T* prq = preq_.data() + h * hd;
        const T* prk = prek_.data() + h * hd;
        for (size_t i = 0; i < hd; ++i) {
            pq[i] *= phi_grad(prq[i], fq[i]);
            pk[i] *= phi_grad(prk[i], fk[i]);
        }
    }
}

template <typename T>
Tensor<T> QuadraticAttentionCore<T>::forward(const Tensor<T>& q, const Tensor<T>& k,
                                             const Tensor<T>& v) {
    check_attn_shapes(q, k, v);
    const int H = q.size(0), N = q.size(1), D = q.size(2);
    q_ = q;
    k_ = k;
    v_ = v;
    attn_ = Tensor<T>({H, N, N});
    Tensor<T> out(q.shape());
    const T scale = static_cast<T>(1.0 / std::sqrt(double(D)));
    const size_t hd = size_t(N) * D;
    for (int h = 0; h < H; ++h) {
        const T* pq = q.data() + h * hd;
        const T* pk = k.data() + h * hd;
        const T* pv = v.data() + h * hd;
        T* a = attn_.data() + size_t(h) * N * N;
        gemm(false, true, N, N, D, scale, pq, D, pk, D, T(0), a, N);
        for (int n = 0; n < N; ++n) {
            T* row = a + size_t(n) * N;
            T mx = row[0];
            for (int j = 1; j < N; ++j) mx = std::max(mx, row[j]);
            double sum = 0;
            for (int j = 0; j < N; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            for (int j = 0; j < N; ++j) row[j] = static_cast<T>(row[j] / sum);
        }
        gemm(false, false, N, D, N, T(1), a, N, pv, D, T(0), out.data() + h * hd, D);
    }
    return out;
}

template <typename T>
void QuadraticAttentionCore<T>::backward(const Tensor<T>& gout, Tensor<T>& gq, Tensor<T>& gk,
                                         Tensor<T>& gv) {
    if (!gout.same_shape(q_)) throw ConfigError("attention gradient shape mismatch");
    const int H = q_.size(0), N = q_.size(1), D = q_.size(2);
    gq = Tensor<T>(q_.shape());
    gk = Tensor<T>(q_.shape());
    gv = Tensor<T>(q_.shape());
    std::vector<T> dp(size_t(N) * N);
    const T scale = static_cast<T>(1.0 / std::sqrt(double(D)));
    const size_t hd = size_t(N) * D;
    for (int h = 0; h < H; ++h) {
        const T* g = gout.data() + h * hd;
        const T* a = attn_.data() + size_t(h) * N * N;
        gemm(true, false, N, D, N, T(1), a, N, g, D, T(0), gv.data() + h * hd, D);
        gemm(false, true, N, N, D, T(1), g, D, v_.data() + h * hd, D, T(0), dp.data(), N);
        for (int n = 0; n < N; ++n) {
            const T* arow = a + size_t(n) * N;
            T* prow = dp.data() + size_t(n) * N;
            double r = 0;
            for (int j = 0; j < N; ++j) r += double(prow[j]) * double(arow[j]);
            for (int j = 0; j < N; ++j)
                prow[j] = static_cast<T>(arow[j] * (prow[j] - r));
        }
        gemm(false, false, N, D, N, scale, dp.data(), N, k_.data() + h * hd, D, T(0),
             gq.data() + h * hd, D);
        gemm(true, false, N, D, N, scale, dp.data(), N, q_.data() + h * hd, D, T(0),
             gk.data() + h * hd, D);
    }
}

template <typename T>
Tensor<T> linear_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    LinearAttentionCore<T> core;
    return core.forward(q, k, v);
}

template <typename T>
Tensor<T> quadratic_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    QuadraticAttentionCore<T> core;
    return core.forward(q, k, v);
}

AttnKind attn_kind_from_name(const std::string& s) {
    if (s == "none") return AttnKind::none;
    if (s == "linear") return AttnKind::linear;
    if (s == "quadratic") return AttnKind::quadratic;
    throw ConfigError("unknown attention kind: " + s);
}

std::string attn_kind_name(AttnKind k) {
    switch (k) {
        case AttnKind::none: return "none";
        case AttnKind::linear: return "linear";
        case AttnKind::quadratic: return "quadratic";
    }
    return "none";
}

template <typename T>
AttentionBlock<T>::AttentionBlock(int channels, int head_dim, AttnKind kind)
    : channels_(channels), kind_(kind) {
    head_dim_ = std::min(head_dim, channels);
    if (channels % head_dim_ != 0)
        throw ConfigError("attention channels must be divisible by head dim");
    heads_ = channels / head_dim_;
    gn_ = GroupNorm<T>(channels, GroupNorm<T>::default_groups(channels));
    qkv_ = Conv3d<T>(channels, 3 * channels, {1, 1, 1}, {1, 1, 1}, {0, 0, 0});
    proj_ = Conv3d<T>(channels, channels, {1, 1, 1}, {1, 1, 1}, {0, 0, 0});
}

template <typename T>
void AttentionBlock<T>::init(Rng& rng) {
    qkv_.init(rng);
    // zero output projection: the block starts as an identity residual
    proj_.zero_init();
}

namespace {

// (3c, n) plane -> one of q/k/v as (heads, n, head_dim)
template <typename T>
Tensor<T> split_heads(const Tensor<T>& qkv, int which, int channels, int heads, int head_dim,
                      size_t n) {
    Tensor<T> out({heads, int(n), head_dim});
    const T* src = qkv.data() + size_t(which) * channels * n;
    for (int h = 0; h < heads; ++h)
        for (int d = 0; d < head_dim; ++d) {
            const T* col = src + size_t(h * head_dim + d) * n;
            T* dst = out.data() + (size_t(h) * n) * head_dim + d;
            for (size_t i = 0; i < n; ++i) dst[i * head_dim] = col[i];
        }
    return out;
}

template <typename T>
void merge_heads(const Tensor<T>& x, T* dst, int channels, int heads, int head_dim, size_t n) {
    for (int h = 0; h < heads; ++h)
        for (int d = 0; d < head_dim; ++d) {
            const T* src = x.data() + (size_t(h) * n) * head_dim + d;
            T* col = dst + size_t(h * head_dim + d) * n;
            for (size_t i = 0; i < n; ++i) col[i] = src[i * head_dim];
        }
}

}  // namespace

template <typename T>
Tensor<T> AttentionBlock<T>::forward(const Tensor<T>& x) {
    if (x.rank() != 4 || x.size(0) != channels_)
        throw ConfigError("attention block input must be (c, z, y, x)");
    if (kind_ == AttnKind::none) return x;
    spatial_ = {x.size(1), x.size(2), x.size(3)};
    const size_t n = x.numel() / channels_;
    Tensor<T> h = gn_.forward(x);
    Tensor<T> qkv = qkv_.forward(h);
    Tensor<T> q = split_heads(qkv, 0, channels_, heads_, head_dim_, n);
    Tensor<T> k = split_heads(qkv, 1, channels_, heads_, head_dim_, n);
    Tensor<T> v = split_heads(qkv, 2, channels_, heads_, head_dim_, n);
    Tensor<T> o = kind_ == AttnKind::linear ? lin_core_.forward(q, k, v)
                                            : quad_core_.forward(q, k, v);
    Tensor<T> merged({channels_, spatial_[0], spatial_[1], spatial_[2]});
    merge_heads(o, merged.data(), channels_, heads_, head_dim_, n);
    Tensor<T> y = proj_.forward(merged);
    T* py = y.data();
    const T* px = x.data();
    for (size_t i = 0; i < y.numel(); ++i) py[i] += px[i];
    return y;
}

template <typename T>
Tensor<T> AttentionBlock<T>::backward(const Tensor<T>& gout) {
    if (kind_ == AttnKind::none) return gout;
    const size_t n = size_t(spatial_[0]) * spatial_[1] * spatial_[2];
    Tensor<T> gmerged = proj_.backward(gout);
    Tensor<T> go = split_heads(gmerged, 0, channels_, heads_, head_dim_, n);
    Tensor<T> gq, gk, gv;
    if (kind_ == AttnKind::linear)
        lin_core_.backward(go, gq, gk, gv);
    else
        quad_core_.backward(go, gq, gk, gv);
    Tensor<T> gqkv({3 * channels_, spatial_[0], spatial_[1], spatial_[2]});
    merge_heads(gq, gqkv.data(), channels_, heads_, head_dim_, n);
    merge_heads(gk, gqkv.data() + size_t(channels_) * n, channels_, heads_, head_dim_, n);
    merge_heads(gv, gqkv.data() + 2 * size_t(channels_) * n, channels_, heads_, head_dim_, n);
    Tensor<T> gh = qkv_.backward(gqkv);
    Tensor<T> gx = gn_.backward(gh);
    T* pgx = gx.data();
    const T* pg = gout.data();
    for (size_t i = 0; i < gx.numel(); ++i) pgx[i] += pg[i];
    return gx;
}

template <typename T>
void AttentionBlock<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    if (kind_ == AttnKind::none) return;
    gn_.collect(prefix + ".gn", out);
    qkv_.collect(prefix + ".qkv", out);
    proj_.collect(prefix + ".proj", out);
}

// ----------------------------------------------------------------------
// Adam
// ----------------------------------------------------------------------

template <typename T>
void Adam<T>::step(std::vector<ParamRef<T>>& params) {
    if (m_.empty()) {
        for (auto& p : params) {
            m_.push_back(Tensor<T>(p.value->shape()));
            v_.push_back(Tensor<T>(p.value->shape()));
        }
    }
    if (m_.size() != params.size()) throw ConfigError("optimizer state size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        T* p = params[i].value->data();
        const T* g = params[i].grad->data();
        T* m = m_[i].data();
        T* v = v_[i].data();
        const size_t ne = params[i].value->numel();
        for (size_t j = 0; j < ne; ++j) {
            const double gj = g[j];
            const double mj = beta1_ * m[j] + (1.0 - beta1_) * gj;
            const double vj = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            p[j] -= static_cast<T>(lr_ * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
        }
    }
}

template <typename T>
void Adam<T>::zero_grad(std::vector<ParamRef<T>>& params) {
    for (auto& p : params) p.grad->fill(T(0));
}

template <typename T>
void Adam<T>::restore(int64_t t, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
}

// ----------------------------------------------------------------------
// Time embedding
// ----------------------------------------------------------------------

template <typename T>
Tensor<T> time_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("time embedding dim must be even");
    const int half = dim / 2;
    Tensor<T> out({dim});
    for (int i = 0; i < half; ++i) {
        const double freq =
            half == 1 ? 1.0 : std::exp(-std::log(10000.0) * double(i) / double(half - 1));
        out[size_t(2 * i)] = static_cast<T>(std::sin(t * freq));
        out[size_t(2 * i + 1)] = static_cast<T>(std::cos(t * freq));
    }
    return out;
}

// ----------------------------------------------------------------------

#define VOXDIFF_NN_INST(T)                                                              \
    template void trunc_normal_init<T>(Tensor<T>&, double, Rng&);                       \
    template class Conv3d<T>;                                                           \
    template class GroupNorm<T>;                                                        \
    template class SiLU<T>;                                                             \
    template class ReLU<T>;                                                             \
    template class Linear<T>;                                                           \
    template Tensor<T> upsample2x_nearest<T>(const Tensor<T>&);                         \
    template Tensor<T> upsample2x_nearest_backward<T>(const Tensor<T>&);                \
    template Tensor<T> upsample_trilinear<T>(const Tensor<T>&, const std::array<int, 3>&); \
    template class LinearAttentionCore<T>;                                              \
    template class QuadraticAttentionCore<T>;                                           \
    template Tensor<T> linear_attention<T>(const Tensor<T>&, const Tensor<T>&,          \
                                           const Tensor<T>&);                           \
    template Tensor<T> quadratic_attention<T>(const Tensor<T>&, const Tensor<T>&,       \
                                              const Tensor<T>&);                        \
    template class AttentionBlock<T>;                                                   \
    template class Adam<T>;                                                             \
    template Tensor<T> time_embedding<T>(int, int);

VOXDIFF_NN_INST(float)
VOXDIFF_NN_INST(double)

#undef VOXDIFF_NN_INST

}  // namespace voxdiff
