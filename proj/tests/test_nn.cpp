#include <doctest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "voxdiff/common.hpp"
#include "voxdiff/nn.hpp"
#include "voxdiff/rng.hpp"
#include "voxdiff/tensor.hpp"

using namespace voxdiff;

namespace {

// Direct six-loop convolution, the reference the GEMM path must match.
Tensor<double> naive_conv3d(const Tensor<double>& x, const Tensor<double>& w,
                            const Tensor<double>& b, std::array<int, 3> stride,
                            std::array<int, 3> pad) {
    const int ci = w.size(1), co = w.size(0);
    const std::array<int, 3> k = {w.size(2), w.size(3), w.size(4)};
    const std::array<int, 3> in = {x.size(1), x.size(2), x.size(3)};
    std::array<int, 3> out_sp{};
    for (int a = 0; a < 3; ++a) out_sp[a] = (in[a] + 2 * pad[a] - k[a]) / stride[a] + 1;
    Tensor<double> out({co, out_sp[0], out_sp[1], out_sp[2]});
    for (int oc = 0; oc < co; ++oc)
        for (int z = 0; z < out_sp[0]; ++z)
            for (int y = 0; y < out_sp[1]; ++y)
                for (int xx = 0; xx < out_sp[2]; ++xx) {
                    double acc = b[oc];
                    for (int ic = 0; ic < ci; ++ic)
                        for (int kz = 0; kz < k[0]; ++kz)
                            for (int ky = 0; ky < k[1]; ++ky)
                                for (int kx = 0; kx < k[2]; ++kx) {
                                    const int iz = z * stride[0] - pad[0] + kz;
                                    const int iy = y * stride[1] - pad[1] + ky;
                                    const int ix = xx * stride[2] - pad[2] + kx;
                                    if (iz < 0 || iy < 0 || ix < 0 || iz >= in[0] ||
                                        iy >= in[1] || ix >= in[2])
                                        continue;
                                    const double wv =
                                        w[(((size_t(oc) * ci + ic) * k[0] + kz) * k[1] + ky) *
                                              k[2] +
                                          kx];
                                    acc += wv * x.at(ic, iz, iy, ix);
                                }
                    out.at(oc, z, y, xx) = acc;
                }
    return out;
}

double phi(double x) { return (x > 0 ? x : std::expm1(x)) + 1.0; }

// Reference kernelized attention evaluated the O(n^2) way, term by term.
Tensor<double> naive_linear_attention(const Tensor<double>& q, const Tensor<double>& k,
                                      const Tensor<double>& v) {
    const int H = q.size(0), N = q.size(1), D = q.size(2);
    Tensor<double> out({H, N, D});
    for (int h = 0; h < H; ++h)
        for (int n = 0; n < N; ++n) {
            for (int m = 0; m < N; ++m) {
                double w = 0;
                for (int d = 0; d < D; ++d)
                    w += phi(q[(size_t(h) * N + n) * D + d]) *
                         phi(k[(size_t(h) * N + m) * D + d]);
                for (int d = 0; d < D; ++d)
                    out[(size_t(h) * N + n) * D + d] += w * v[(size_t(h) * N + m) * D + d];
            }
            double den = 0;
            for (int m = 0; m < N; ++m)
                for (int d = 0; d < D; ++d)
                    den += phi(q[(size_t(h) * N + n) * D + d]) *
                           phi(k[(size_t(h) * N + m) * D + d]);
            for (int d = 0; d < D; ++d) out[(size_t(h) * N + n) * D + d] /= den;
        }
    return out;
}

Tensor<double> naive_quadratic_attention(const Tensor<double>& q, const Tensor<double>& k,
                                         const Tensor<double>& v) {
    const int H = q.size(0), N = q.size(1), D = q.size(2);
    const double scale = 1.0 / std::sqrt(double(D));
    Tensor<double> out({H, N, D});
    for (int h = 0; h < H; ++h)
        for (int n = 0; n < N; ++n) {
            std::vector<double> logits(static_cast<size_t>(N));
            double mx = -1e300;
            for (int m = 0; m < N; ++m) {
                double s = 0;
                for (int d = 0; d < D; ++d)
                    s += q[(size_t(h) * N + n) * D + d] * k[(size_t(h) * N + m) * D + d];
                logits[size_t(m)] = s * scale;
                mx = std::max(mx, logits[size_t(m)]);
            }
            double den = 0;
            for (int m = 0; m < N; ++m) den += std::exp(logits[size_t(m)] - mx);
            for (int m = 0; m < N; ++m) {
                const double w = std::exp(logits[size_t(m)] - mx) / den;
                for (int d = 0; d < D; ++d)
                    out[(size_t(h) * N + n) * D + d] += w * v[(size_t(h) * N + m) * D + d];
            }
        }
    return out;
}

}  // namespace

TEST_CASE("time embedding interleaves sin and cos") {
    auto e = time_embedding<double>(0, 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(e[size_t(2 * i)] == doctest::Approx(0.0));      // sin(0)
        CHECK(e[size_t(2 * i + 1)] == doctest::Approx(1.0));  // cos(0)
    }

    auto a = time_embedding<double>(10, 32);
    auto b = time_embedding<double>(11, 32);
    double diff = 0;
    for (int i = 0; i < 32; ++i) {
        CHECK(a[size_t(i)] >= -1.0);
        CHECK(a[size_t(i)] <= 1.0);
        diff += std::abs(a[size_t(i)] - b[size_t(i)]);
    }
    CHECK(diff > 1e-3);

    CHECK_THROWS_AS(time_embedding<double>(1, 7), ConfigError);
    CHECK_THROWS_AS(time_embedding<double>(1, 0), ConfigError);
}

TEST_CASE("truncated normal init stays within two standard deviations") {
    Rng rng(3);
    Tensor<float> t({4096});
    trunc_normal_init(t, 0.02, rng);
    double mean = 0;
    for (int64_t i = 0; i < t.numel(); ++i) {
        CHECK(std::abs(t[i]) <= 0.04f);
        mean += t[i];
    }
    mean /= double(t.numel());
    CHECK(std::abs(mean) < 0.002);
}

TEST_CASE("conv3d matches a direct convolution") {
    Rng rng(11);
    struct Case {
        int ci, co;
        std::array<int, 3> k, s, p, in;
    };
    const Case cases[] = {
        {2, 3, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {5, 6, 4}},
        {3, 2, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}, {6, 8, 6}},
        {4, 5, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, {3, 4, 5}},  // pointwise fast path
        {1, 2, {1, 3, 3}, {1, 2, 2}, {0, 1, 1}, {3, 8, 8}},
    };
    for (const auto& c : cases) {
        Conv3d<double> conv(c.ci, c.co, c.k, c.s, c.p);
        conv.init(rng, 0.5);
        for (int64_t i = 0; i < conv.bias.numel(); ++i) conv.bias[i] = rng.normal();
        auto x = Tensor<double>::randn({c.ci, c.in[0], c.in[1], c.in[2]}, rng);
        auto got = conv.forward(x);
        auto want = naive_conv3d(x, conv.weight, conv.bias, c.s, c.p);
        REQUIRE(got.shape() == want.shape());
        for (int64_t i = 0; i < got.numel(); ++i)
            CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
    }
}

TEST_CASE("conv3d gradients agree with finite differences") {
    Rng rng(5);
    Conv3d<double> conv(2, 3, {3, 3, 3}, {2, 2, 2}, {1, 1, 1});
    conv.init(rng, 0.3);
    auto x = Tensor<double>::randn({2, 4, 6, 4}, rng);
    auto gout_seed = Tensor<double>::randn({3, 2, 3, 2}, rng);

    // scalar functional: sum(forward(x) * gout_seed)
    auto eval = [&]() {
        Conv3d<double> c2 = conv;
        auto out = c2.forward(x);
        double s = 0;
        for (int64_t i = 0; i < out.numel(); ++i) s += out[i] * gout_seed[i];
        return s;
    };

    auto out = conv.forward(x);
    REQUIRE(out.shape() == gout_seed.shape());
    conv.grad_weight.fill(0);
    conv.grad_bias.fill(0);
    auto gin = conv.backward(gout_seed);

    Rng pick(77);
    for (int trial = 0; trial < 12; ++trial) {
        int64_t wi = rng.uniform_int(0, int(conv.weight.numel() - 1));
        double fd = testutil::central_diff(eval, &conv.weight[wi], 1e-6);
        CHECK(testutil::rel_err(conv.grad_weight[wi], fd) < 1e-5);
    }
    for (int64_t bi = 0; bi < conv.bias.numel(); ++bi) {
        double fd = testutil::central_diff(eval, &conv.bias[bi], 1e-6);
        CHECK(testutil::rel_err(conv.grad_bias[bi], fd) < 1e-5);
    }
    for (int trial = 0; trial < 12; ++trial) {
        int64_t xi = pick.uniform_int(0, int(x.numel() - 1));
        double fd = testutil::central_diff(eval, &x[xi], 1e-6);
        CHECK(testutil::rel_err(gin[xi], fd) < 1e-5);
    }
}

TEST_CASE("conv3d rejects bad geometry") {
    CHECK_THROWS_AS(Conv3d<float>(0, 1, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}), ConfigError);
    Conv3d<float> c(1, 1, {3, 3, 3}, {1, 1, 1}, {0, 0, 0});
    Rng rng(1);
    c.init(rng);
    auto tiny = Tensor<float>::zeros({1, 2, 2, 2});
    CHECK_THROWS_AS(c.forward(tiny), ConfigError);
}

TEST_CASE("group norm picks the largest group count that divides channels") {
    CHECK(GroupNorm<float>::default_groups(16) == 8);
    CHECK(GroupNorm<float>::default_groups(12) == 6);
    CHECK(GroupNorm<float>::default_groups(7) == 7);
    CHECK(GroupNorm<float>::default_groups(10) == 5);
    CHECK(GroupNorm<float>::default_groups(1) == 1);
}

TEST_CASE("group norm normalizes each group to zero mean, unit variance") {
    Rng rng(9);
    GroupNorm<double> gn(8, 4);
    auto x = Tensor<double>::randn({8, 3, 4, 5}, rng);
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = x[i] * 3.0 + 1.5;
    auto y = gn.forward(x);
    const int64_t per_group = 2 * 3 * 4 * 5;
    for (int g = 0; g < 4; ++g) {
        double mean = 0, var = 0;
        const double* p = y.data() + g * per_group;
        for (int64_t i = 0; i < per_group; ++i) mean += p[i];
        mean /= double(per_group);
        for (int64_t i = 0; i < per_group; ++i) var += (p[i] - mean) * (p[i] - mean);
        var /= double(per_group);
        CHECK(std::abs(mean) < 1e-9);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
    }
    CHECK_THROWS_AS(GroupNorm<double>(10, 4), ConfigError);
}

TEST_CASE("group norm gradients agree with finite differences") {
    Rng rng(21);
    GroupNorm<double> gn(4, 2);
    auto x = Tensor<double>::randn({4, 2, 3, 2}, rng);
    auto seed = Tensor<double>::randn({4, 2, 3, 2}, rng);
    for (int64_t i = 0; i < gn.gamma.numel(); ++i) gn.gamma[i] = 1.0 + 0.3 * rng.normal();
    for (int64_t i = 0; i < gn.beta.numel(); ++i) gn.beta[i] = 0.2 * rng.normal();

    auto eval = [&]() {
        GroupNorm<double> g2 = gn;
        auto out = g2.forward(x);
        double s = 0;
        for (int64_t i = 0; i < out.numel(); ++i) s += out[i] * seed[i];
        return s;
    };

    gn.forward(x);
    gn.grad_gamma.fill(0);
    gn.grad_beta.fill(0);
    auto gin = gn.backward(seed);

    for (int64_t i = 0; i < gn.gamma.numel(); ++i) {
        double fd = testutil::central_diff(eval, &gn.gamma[i], 1e-6);
        CHECK(testutil::rel_err(gn.grad_gamma[i], fd) < 1e-5);
        fd = testutil::central_diff(eval, &gn.beta[i], 1e-6);
        CHECK(testutil::rel_err(gn.grad_beta[i], fd) < 1e-5);
    }
    Rng pick(3);
    for (int trial = 0; trial < 10; ++trial) {
        int64_t xi = pick.uniform_int(0, int(x.numel() - 1));
        double fd = testutil::central_diff(eval, &x[xi], 1e-6);
        CHECK(testutil::rel_err(gin[xi], fd) < 1e-4);
    }
}

TEST_CASE("activation and linear gradients agree with finite differences") {
    Rng rng(31);
    auto x = Tensor<double>::randn({24}, rng);
    auto seed = Tensor<double>::randn({24}, rng);

    SUBCASE("silu") {
        SiLU<double> act;
        auto eval = [&]() {
            SiLU<double> a2;
            auto out = a2.forward(x);
            double s = 0;
            for (int64_t i = 0; i < out.numel(); ++i) s += out[i] * seed[i];
            return s;
        };
        act.forward(x);
        auto gin = act.backward(seed);
        for (int64_t i = 0; i < x.numel(); ++i) {
            double fd = testutil::central_diff(eval, &x[i], 1e-6);
            CHECK(testutil::rel_err(gin[i], fd) < 1e-6);
        }
    }

    SUBCASE("relu") {
        ReLU<double> act;
        auto out = act.forward(x);
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(out[i] == (x[i] > 0 ? x[i] : 0.0));
        auto gin = act.backward(seed);
        for (int64_t i = 0; i < x.numel(); ++i)
            CHECK(gin[i] == (x[i] > 0 ? seed[i] : 0.0));
    }

    SUBCASE("linear") {
        Linear<double> lin(24, 7);
        lin.init(rng, 0.4);
        auto lseed = Tensor<double>::randn({7}, rng);
        auto eval = [&]() {
            Linear<double> l2 = lin;
            auto out = l2.forward(x);
            double s = 0;
            for (int64_t i = 0; i < out.numel(); ++i) s += out[i] * lseed[i];
            return s;
        };
        lin.forward(x);
        lin.grad_weight.fill(0);
        lin.grad_bias.fill(0);
        auto gin = lin.backward(lseed);
        Rng pick(8);
        for (int trial = 0; trial < 16; ++trial) {
            int64_t wi = pick.uniform_int(0, int(lin.weight.numel() - 1));
            double fd = testutil::central_diff(eval, &lin.weight[wi], 1e-6);
            CHECK(testutil::rel_err(lin.grad_weight[wi], fd) < 1e-6);
        }
        for (int64_t i = 0; i < x.numel(); ++i) {
            double fd = testutil::central_diff(eval, &x[i], 1e-6);
            CHECK(testutil::rel_err(gin[i], fd) < 1e-6);
        }
    }
}

TEST_CASE("adam takes the textbook bias-corrected step") {
    Tensor<double> p({1});
    Tensor<double> g({1});
    p[0] = 1.0;
    g[0] = 0.5;
    std::vector<ParamRef<double>> params{{"p", &p, &g}};
    Adam<double> opt(0.1);
    opt.step(params);
    // m = 0.05, v = 2.5e-4; after bias correction mhat = 0.5, vhat = 0.25;
    // step = 0.1 * 0.5 / (0.5 + 1e-8)
    CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-7));
    CHECK(opt.t() == 1);

    opt.zero_grad(params);
    CHECK(g[0] == 0.0);
}

TEST_CASE("nearest upsample doubles every axis and its backward sums the block") {
    Tensor<float> x({1, 1, 2, 2});
    x.at(0, 0, 0, 0) = 1;
    x.at(0, 0, 0, 1) = 2;
    x.at(0, 0, 1, 0) = 3;
    x.at(0, 0, 1, 1) = 4;
    auto y = upsample2x_nearest(x);
    REQUIRE(y.shape() == std::vector<int>{1, 2, 4, 4});
    for (int z = 0; z < 2; ++z)
        for (int yy = 0; yy < 4; ++yy)
            for (int xx = 0; xx < 4; ++xx)
                CHECK(y.at(0, z, yy, xx) == x.at(0, 0, yy / 2, xx / 2));

    auto gout = Tensor<float>::full({1, 2, 4, 4}, 1.0f);
    auto gin = upsample2x_nearest_backward(gout);
    REQUIRE(gin.shape() == x.shape());
    for (int64_t i = 0; i < gin.numel(); ++i) CHECK(gin[i] == 8.0f);  // 2*2*2 block
}

TEST_CASE("trilinear resize is exact on constants and linear ramps") {
    Rng rng(41);
    auto c = Tensor<double>::full({2, 3, 3, 3}, 0.7);
    auto cu = upsample_trilinear(c, {7, 5, 6});
    for (int64_t i = 0; i < cu.numel(); ++i) CHECK(cu[i] == doctest::Approx(0.7));

    // identity target returns the input values
    auto x = Tensor<double>::randn({2, 3, 4, 5}, rng);
    auto same = upsample_trilinear(x, {3, 4, 5});
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(same[i] == doctest::Approx(x[i]));

    // ramp along z from two samples: centers land at -0.25, 0.25, 0.75, 1.25
    // and clamp to the edge values
    Tensor<double> r({1, 2, 1, 1});
    r.at(0, 0, 0, 0) = 0.0;
    r.at(0, 1, 0, 0) = 1.0;
    auto ru = upsample_trilinear(r, {4, 1, 1});
    CHECK(ru.at(0, 0, 0, 0) == doctest::Approx(0.0));
    CHECK(ru.at(0, 1, 0, 0) == doctest::Approx(0.25));
    CHECK(ru.at(0, 2, 0, 0) == doctest::Approx(0.75));
    CHECK(ru.at(0, 3, 0, 0) == doctest::Approx(1.0));
}

TEST_CASE("linear attention with one token returns v") {
    Rng rng(51);
    auto q = Tensor<double>::randn({2, 1, 4}, rng);
    auto k = Tensor<double>::randn({2, 1, 4}, rng);
    auto v = Tensor<double>::randn({2, 1, 4}, rng);
    auto out = linear_attention(q, k, v);
    for (int64_t i = 0; i < v.numel(); ++i) CHECK(out[i] == doctest::Approx(v[i]));
}

TEST_CASE("linear attention matches the quadratic-cost reference") {
    Rng rng(52);
    int checked = 0;
    for (int trial = 0; trial < 120; ++trial) {
        const int h = int(rng.uniform_int(1, 3));
        const int n = int(rng.uniform_int(1, 64));
        const int d = int(rng.uniform_int(1, 8));
        auto q = Tensor<double>::randn({h, n, d}, rng);
        auto k = Tensor<double>::randn({h, n, d}, rng);
        auto v = Tensor<double>::randn({h, n, d}, rng);
        auto got = linear_attention(q, k, v);
        auto want = naive_linear_attention(q, k, v);
        for (int64_t i = 0; i < got.numel(); ++i)
            REQUIRE(testutil::rel_err(got[i], want[i], 1e-3) < 1e-5);
        ++checked;
    }
    CHECK(checked == 120);
}

TEST_CASE("linear attention is equivariant to a shared token permutation") {
    Rng rng(53);
    const int n = 17, d = 4;
    auto q = Tensor<double>::randn({1, n, d}, rng);
    auto k = Tensor<double>::randn({1, n, d}, rng);
    auto v = Tensor<double>::randn({1, n, d}, rng);
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[size_t(i)] = i;
    for (int i = n - 1; i > 0; --i)
        std::swap(perm[size_t(i)], perm[size_t(rng.uniform_int(0, i))]);

    auto permute = [&](const Tensor<double>& t) {
        Tensor<double> out({1, n, d});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                out[size_t(i) * d + j] = t[size_t(perm[size_t(i)]) * d + j];
        return out;
    };

    auto base = linear_attention(q, k, v);
    auto perm_out = linear_attention(permute(q), permute(k), permute(v));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            CHECK(perm_out[size_t(i) * d + j] ==
                  doctest::Approx(base[size_t(perm[size_t(i)]) * d + j]).epsilon(1e-9));
}

TEST_CASE("quadratic attention reduces to v for one token and to the mean for uniform keys") {
    Rng rng(54);
    auto q1 = Tensor<double>::randn({1, 1, 5}, rng);
    auto k1 = Tensor<double>::randn({1, 1, 5}, rng);
    auto v1 = Tensor<double>::randn({1, 1, 5}, rng);
    auto o1 = quadratic_attention(q1, k1, v1);
    for (int64_t i = 0; i < v1.numel(); ++i) CHECK(o1[i] == doctest::Approx(v1[i]));

    // identical keys make every weight 1/n regardless of the query
    const int n = 9, d = 3;
    auto q = Tensor<double>::randn({1, n, d}, rng);
    auto k = Tensor<double>::zeros({1, n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) k[size_t(i) * d + j] = 0.37 * (j + 1);
    auto v = Tensor<double>::randn({1, n, d}, rng);
    auto out = quadratic_attention(q, k, v);
    for (int j = 0; j < d; ++j) {
        double mean = 0;
        for (int i = 0; i < n; ++i) mean += v[size_t(i) * d + j];
        mean /= n;
        for (int i = 0; i < n; ++i)
            CHECK(out[size_t(i) * d + j] == doctest::Approx(mean).epsilon(1e-9));
    }
}

TEST_CASE("quadratic attention weights form a row-stochastic matrix") {
    // with v = identity, the output rows are exactly the attention weights
    Rng rng(55);
    const int n = 12;
    auto q = Tensor<double>::randn({1, n, n}, rng);
    auto k = Tensor<double>::randn({1, n, n}, rng);
    auto v = Tensor<double>::zeros({1, n, n});
    for (int i = 0; i < n; ++i) v[size_t(i) * n + i] = 1.0;
    auto out = quadratic_attention(q, k, v);
    for (int i = 0; i < n; ++i) {
        double row = 0;
        for (int j = 0; j < n; ++j) {
            CHECK(out[size_t(i) * n + j] >= 0.0);
            row += out[size_t(i) * n + j];
        }
        CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
    }

    auto want = naive_quadratic_attention(q, k, v);
    for (int64_t i = 0; i < out.numel(); ++i)
        CHECK(testutil::rel_err(out[i], want[i], 1e-3) < 1e-6);
}

TEST_CASE("attention cores backpropagate correctly") {
    Rng rng(56);
    const int h = 2, n = 6, d = 3;
    auto q = Tensor<double>::randn({h, n, d}, rng);
    auto k = Tensor<double>::randn({h, n, d}, rng);
    auto v = Tensor<double>::randn({h, n, d}, rng);
    auto seed = Tensor<double>::randn({h, n, d}, rng);

    auto check_core = [&](auto&& make_core, auto&& func) {
        auto eval = [&]() {
            auto core = make_core();
            auto out = core.forward(q, k, v);
            double s = 0;
            for (int64_t i = 0; i < out.numel(); ++i) s += out[i] * seed[i];
            return s;
        };
        auto core = make_core();
        core.forward(q, k, v);
        Tensor<double> gq, gk, gv;
        core.backward(seed, gq, gk, gv);
        Tensor<double>* inputs[] = {&q, &k, &v};
        Tensor<double>* grads[] = {&gq, &gk, &gv};
        for (int which = 0; which < 3; ++which)
            for (int64_t i = 0; i < inputs[which]->numel(); ++i) {
                double fd = testutil::central_diff(eval, &(*inputs[which])[i], 1e-6);
                CHECK(testutil::rel_err((*grads[which])[i], fd, 1e-4) < 2e-4);
            }
        (void)func;
    };

    SUBCASE("linear") {
        check_core([] { return LinearAttentionCore<double>(); }, 0);
    }
    SUBCASE("quadratic") {
        check_core([] { return QuadraticAttentionCore<double>(); }, 0);
    }
}

TEST_CASE("attention block is a residual map with matching gradients") {
    Rng rng(57);
    for (AttnKind kind : {AttnKind::linear, AttnKind::quadratic}) {
        AttentionBlock<double> blk(8, 4, kind);
        blk.init(rng);
        std::vector<ParamRef<double>> params;
        blk.collect("attn", params);
        // the projection is zero-initialized, so freshly built blocks are the identity
        auto x = Tensor<double>::randn({8, 2, 2, 2}, rng);
        {
            AttentionBlock<double> fresh = blk;
            auto y = fresh.forward(x);
            for (int64_t i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(x[i]));
        }

        // perturb the projection so gradients flow through the attention path
        for (auto& p : params)
            if (p.name.find("proj") != std::string::npos)
                for (int64_t i = 0; i < p.value->numel(); ++i)
                    (*p.value)[i] = 0.2 * rng.normal();

        auto seed = Tensor<double>::randn({8, 2, 2, 2}, rng);
        auto eval = [&]() {
            AttentionBlock<double> b2 = blk;
            auto out = b2.forward(x);
            double s = 0;
            for (int64_t i = 0; i < out.numel(); ++i) s += out[i] * seed[i];
            return s;
        };
        AttentionBlock<double> run = blk;
        std::vector<ParamRef<double>> run_params;
        run.collect("attn", run_params);
        for (auto& p : run_params) p.grad->fill(0);
        run.forward(x);
        auto gin = run.backward(seed);

        Rng pick(13);
        for (int trial = 0; trial < 12; ++trial) {
            int64_t xi = pick.uniform_int(0, int(x.numel() - 1));
            double fd = testutil::central_diff(eval, &x[xi], 1e-6);
            CHECK(testutil::rel_err(gin[xi], fd, 1e-4) < 5e-4);
        }
        // spot-check a few parameter gradients, mapping run params onto blk storage
        for (size_t pi = 0; pi < run_params.size(); ++pi) {
            auto& rp = run_params[pi];
            auto& bp = params[pi];
            REQUIRE(rp.name == bp.name);
            if (rp.value->numel() == 0) continue;
            int64_t idx = pick.uniform_int(0, int(rp.value->numel() - 1));
            double fd = testutil::central_diff(eval, &(*bp.value)[idx], 1e-6);
            CHECK(testutil::rel_err((*rp.grad)[idx], fd, 1e-4) < 5e-4);
        }
    }
}
