#include <doctest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "voxdiff/common.hpp"
#include "voxdiff/denoiser.hpp"
#include "voxdiff/diffusion.hpp"
#include "voxdiff/rng.hpp"

using namespace voxdiff;

namespace {

DenoiserConfig tiny_config(int in_channels = 1) {
    DenoiserConfig cfg;
    cfg.in_channels = in_channels;
    cfg.base_width = 4;
    cfg.levels = 2;
    cfg.channel_mult = {1, 2};
    cfg.time_embed_dim = 8;
    cfg.head_dim = 4;
    return cfg;
}

}  // namespace

TEST_CASE("denoiser config normalization fills and validates fields") {
    DenoiserConfig cfg;
    cfg.normalize();
    REQUIRE(cfg.attn.size() == 3);
    CHECK(cfg.attn[0] == "linear");
    CHECK(cfg.attn[1] == "linear");
    CHECK(cfg.attn[2] == "quadratic");
    CHECK(cfg.level_channels() == std::vector<int>{16, 32, 64});

    DenoiserConfig shallow;
    shallow.levels = 1;
    shallow.channel_mult = {1};
    CHECK_THROWS_AS(shallow.normalize(), ConfigError);

    DenoiserConfig wrong_mult;
    wrong_mult.levels = 3;
    wrong_mult.channel_mult = {1, 2};
    CHECK_THROWS_AS(wrong_mult.normalize(), ConfigError);

    DenoiserConfig bad_attn;
    bad_attn.attn = {"linear", "linear", "banana"};
    CHECK_THROWS_AS(bad_attn.normalize(), ConfigError);

    DenoiserConfig quad_shallow;
    quad_shallow.attn = {"quadratic", "linear", "quadratic"};
    CHECK_THROWS_AS(quad_shallow.normalize(), ConfigError);

    DenoiserConfig bad_in;
    bad_in.in_channels = 3;
    CHECK_THROWS_AS(bad_in.normalize(), ConfigError);
}

TEST_CASE("a freshly initialized denoiser predicts exactly zero noise") {
    Denoiser<float> model(tiny_config());
    Rng rng(3);
    model.init(rng);
    auto x = Tensor<float>::randn({1, 8, 8, 8}, rng);
    auto out = model.forward(x, 5, true);
    REQUIRE(out.eps.shape() == x.shape());
    for (int64_t i = 0; i < out.eps.numel(); ++i) CHECK(out.eps[i] == 0.0f);
    // the pyramid itself is not zero; features exist from the first step
    double mag = 0;
    for (const auto& lvl : out.pyramid)
        for (int64_t i = 0; i < lvl.numel(); ++i) mag += std::abs(lvl[i]);
    CHECK(mag > 0.0);
}

TEST_CASE("the feature pyramid halves resolution and widens channels per level") {
    DenoiserConfig cfg;  // default: base 16, levels 3, mult 1/2/4
    Denoiser<float> model(cfg);
    Rng rng(5);
    model.init(rng);
    auto x = Tensor<float>::randn({1, 16, 32, 32}, rng);
    auto out = model.forward(x, 9, true);
    REQUIRE(out.pyramid.size() == 3);
    CHECK(out.pyramid[0].shape() == std::vector<int>{16, 16, 32, 32});
    CHECK(out.pyramid[1].shape() == std::vector<int>{32, 8, 16, 16});
    CHECK(out.pyramid[2].shape() == std::vector<int>{64, 4, 8, 8});

    // without want_pyramid only eps comes back
    auto lean = model.forward(x, 9, false);
    CHECK(lean.pyramid.empty());
    CHECK(lean.eps.shape() == x.shape());
}

TEST_CASE("input resolution must be divisible by the downsampling factor") {
    Denoiser<float> model(tiny_config());
    Rng rng(7);
    model.init(rng);
    auto bad = Tensor<float>::zeros({1, 7, 8, 8});
    CHECK_THROWS_AS(model.forward(bad, 1, false), ConfigError);
}

TEST_CASE("conditioned denoisers require and use the coordinate channel") {
    Denoiser<float> cond_model(tiny_config(2));
    Rng rng(9);
    cond_model.init(rng);

    auto x = Tensor<float>::randn({1, 8, 8, 8}, rng);
    CHECK_THROWS_WITH_AS(cond_model.forward_eps(x, 3, nullptr),
                         doctest::Contains("coordinate channel"), ConfigError);

    // nudge the zero-initialized head so outputs become sensitive to inputs
    auto params = cond_model.params();
    for (auto& p : params)
        if (p.name.find("out.conv") != std::string::npos && p.value->rank() > 1)
            for (int64_t i = 0; i < p.value->numel(); ++i)
                (*p.value)[i] = float(0.05 * rng.normal());

    auto cond_a = Tensor<float>::full({1, 8, 8, 8}, -0.5f);
    auto cond_b = Tensor<float>::full({1, 8, 8, 8}, 0.5f);
    auto ea = cond_model.forward_eps(x, 3, &cond_a);
    auto eb = cond_model.forward_eps(x, 3, &cond_b);
    double diff = 0;
    for (int64_t i = 0; i < ea.numel(); ++i) diff += std::abs(ea[i] - eb[i]);
    CHECK(diff > 1e-4);

    Denoiser<float> plain(tiny_config(1));
    plain.init(rng);
    CHECK_THROWS_AS(plain.forward_eps(x, 3, &cond_a), ConfigError);
}

TEST_CASE("timestep changes the prediction through the embedding path") {
    Denoiser<float> model(tiny_config());
    Rng rng(13);
    model.init(rng);
    auto params = model.params();
    for (auto& p : params)
        if (p.name.find("out.conv") != std::string::npos)
            for (int64_t i = 0; i < p.value->numel(); ++i)
                (*p.value)[i] = float(0.05 * rng.normal());

    auto x = Tensor<float>::randn({1, 8, 8, 8}, rng);
    auto e1 = model.forward(x, 1, false).eps;
    auto e2 = model.forward(x, 50, false).eps;
    double diff = 0;
    for (int64_t i = 0; i < e1.numel(); ++i) diff += std::abs(e1[i] - e2[i]);
    CHECK(diff > 1e-4);
}

TEST_CASE("denoiser gradients agree with finite differences through the full loss") {
    // double precision end to end so the comparison is meaningful
    DenoiserConfig cfg = tiny_config();
    Denoiser<double> model(cfg);
    Rng rng(21);
    model.init(rng);
    auto params = model.params();
    // randomize the output head too, otherwise its zero init hides sign errors
    for (auto& p : params)
        if (p.name.find("out.conv") != std::string::npos)
            for (int64_t i = 0; i < p.value->numel(); ++i)
                (*p.value)[i] = 0.05 * rng.normal();

    auto sched = make_schedule(100, 1e-3, 0.2);
    auto x0 = Tensor<double>::randn({1, 8, 8, 8}, rng);
    const int t = 17;

    auto eval = [&]() {
        Denoiser<double> m2 = model;
        Rng r(1234);
        return double(ddpm_loss<double>(m2, x0, t, nullptr, sched, r, false));
    };

    for (auto& p : params) p.grad->fill(0);
    Rng r(1234);
    ddpm_loss<double>(model, x0, t, nullptr, sched, r, true);

    // walk a deterministic sample of parameters spread across all tensors
    Rng pick(31);
    int checked = 0, skipped = 0;
    for (auto& p : params) {
        if (p.value->numel() == 0) continue;
        int64_t idx = pick.uniform_int(0, int(p.value->numel() - 1));
        double fd = testutil::central_diff(eval, &(*p.value)[idx], 1e-5);
        double an = (*p.grad)[idx];
        if (std::abs(fd) < 1e-12 && std::abs(an) < 1e-12) {
            ++skipped;  // parameter with no influence on this draw
            continue;
        }
        INFO("param " << p.name << " [" << idx << "] analytic " << an << " fd " << fd);
        CHECK(testutil::rel_err(an, fd, 1e-7) < 1e-3);
        ++checked;
    }
    CHECK(checked >= 50);
}

TEST_CASE("gradients flow into the conditioning branch as well") {
    DenoiserConfig cfg = tiny_config(2);
    Denoiser<double> model(cfg);
    Rng rng(23);
    model.init(rng);
    auto params = model.params();
    for (auto& p : params)
        if (p.name.find("out.conv") != std::string::npos)
            for (int64_t i = 0; i < p.value->numel(); ++i)
                (*p.value)[i] = 0.05 * rng.normal();

    auto sched = make_schedule(100, 1e-3, 0.2);
    auto x0 = Tensor<double>::randn({1, 8, 8, 8}, rng);
    Tensor<double> cond({1, 8, 8, 8});
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) cond.at(0, z, y, x) = 2.0 * (z + 0.5) / 8.0 - 1.0;

    auto eval = [&]() {
        Denoiser<double> m2 = model;
        Rng r(77);
        return double(ddpm_loss<double>(m2, x0, 9, &cond, sched, r, false));
    };

    for (auto& p : params) p.grad->fill(0);
    Rng r(77);
    ddpm_loss<double>(model, x0, 9, &cond, sched, r, true);

    // the stem sees both channels; check a weight that touches the cond plane
    Rng pick(41);
    int checked = 0;
    for (auto& p : params) {
        if (p.name.find("stem") == std::string::npos) continue;
        for (int reps = 0; reps < 4; ++reps) {
            int64_t idx = pick.uniform_int(0, int(p.value->numel() - 1));
            double fd = testutil::central_diff(eval, &(*p.value)[idx], 1e-5);
            CHECK(testutil::rel_err((*p.grad)[idx], fd, 1e-7) < 1e-3);
            ++checked;
        }
    }
    CHECK(checked >= 4);
}
