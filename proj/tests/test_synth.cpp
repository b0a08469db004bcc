#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <vector>

#include "test_util.hpp"
#include "voxdiff/common.hpp"
#include "voxdiff/rng.hpp"
#include "voxdiff/synth.hpp"

using namespace voxdiff;

namespace {

// Re-rasterize the label volume from the realized placements: last organ in
// catalog order wins wherever ellipsoids overlap.
Volume oracle_labels(const Phantom& ph, const PhantomConfig& cfg) {
    Volume out = Volume::make(cfg.shape, cfg.spacing, VolKind::label);
    for (int z = 0; z < cfg.shape[0]; ++z)
        for (int y = 0; y < cfg.shape[1]; ++y)
            for (int x = 0; x < cfg.shape[2]; ++x) {
                float id = 0;
                for (const auto& o : ph.placed) {
                    const double dz = (z - o.center[0]) / o.radii[0];
                    const double dy = (y - o.center[1]) / o.radii[1];
                    const double dx = (x - o.center[2]) / o.radii[2];
                    if (dz * dz + dy * dy + dx * dx <= 1.0) id = float(o.id);
                }
                out.at(z, y, x) = id;
            }
    return out;
}

}  // namespace

TEST_CASE("phantom generation is bit-reproducible per seed") {
    auto cfg = PhantomConfig::defaults();
    auto a = generate_phantom(42, cfg);
    auto b = generate_phantom(42, cfg);
    CHECK(std::memcmp(a.image.data.data(), b.image.data.data(),
                      a.image.data.size() * 4) == 0);
    CHECK(std::memcmp(a.labels.data.data(), b.labels.data.data(),
                      a.labels.data.size() * 4) == 0);
    CHECK(std::memcmp(a.body_coord.data.data(), b.body_coord.data.data(),
                      a.body_coord.data.size() * 4) == 0);

    auto c = generate_phantom(43, cfg);
    CHECK(std::memcmp(a.image.data.data(), c.image.data.data(),
                      a.image.data.size() * 4) != 0);
}

TEST_CASE("labels match the ellipsoid inequality with later organs winning") {
    auto cfg = PhantomConfig::defaults();
    for (uint64_t seed : {1ull, 7ull, 23ull}) {
        auto ph = generate_phantom(seed, cfg);
        REQUIRE(ph.placed.size() == cfg.organs.size());
        Volume want = oracle_labels(ph, cfg);
        REQUIRE(want.data.size() == ph.labels.data.size());
        for (size_t i = 0; i < want.data.size(); ++i)
            REQUIRE(ph.labels.data[i] == want.data[i]);
    }
}

TEST_CASE("image values stay in range and the coordinate is z-linear") {
    auto cfg = PhantomConfig::defaults();
    auto ph = generate_phantom(11, cfg);
    for (float f : ph.image.data) {
        CHECK(f >= -1.0f);
        CHECK(f <= 1.0f);
    }
    CHECK(ph.image.kind == VolKind::image);
    CHECK(ph.labels.kind == VolKind::label);
    CHECK(ph.body_coord.kind == VolKind::coord);
    CHECK(ph.image.spacing == std::array<double, 3>{2.0, 1.0, 1.0});

    const int Z = cfg.shape[0];
    for (int z = 0; z < Z; ++z) {
        const float want = float(2.0 * (z + 0.5) / Z - 1.0);
        for (int y = 0; y < cfg.shape[1]; y += 7)
            for (int x = 0; x < cfg.shape[2]; x += 5)
                CHECK(ph.body_coord.at(z, y, x) == doctest::Approx(want));
    }
}

TEST_CASE("size classes order the realized organ volumes") {
    auto cfg = PhantomConfig::defaults();
    std::map<std::string, double> count_sum;
    std::map<std::string, int> organs_in_class;
    std::map<int, const OrganSpec*> by_id;
    for (const auto& o : cfg.organs) by_id[o.id] = &o;

    std::map<int, int64_t> voxels;
    int present_all = 0;
    const int trials = 20;
    for (int s = 0; s < trials; ++s) {
        auto ph = generate_phantom(derive_seed(1000, uint64_t(s)), cfg);
        std::map<int, int64_t> counts;
        for (float f : ph.labels.data)
            if (f > 0) ++counts[int(f)];
        bool all = true;
        for (const auto& o : cfg.organs) {
            voxels[o.id] += counts[o.id];
            if (counts[o.id] == 0) all = false;
        }
        if (all) ++present_all;
    }
    // class balance: every organ should appear in (almost) every phantom
    CHECK(present_all >= int(0.9 * trials));

    std::map<std::string, double> min_mean{{"Big", 1e18}, {"Medium", 1e18}, {"Small", 1e18}};
    std::map<std::string, double> max_mean{{"Big", 0}, {"Medium", 0}, {"Small", 0}};
    for (const auto& [id, total] : voxels) {
        const double mean = double(total) / trials;
        const auto& cls = by_id[id]->size_class;
        min_mean[cls] = std::min(min_mean[cls], mean);
        max_mean[cls] = std::max(max_mean[cls], mean);
    }
    // strict separation between size groups, worst case against best case
    CHECK(min_mean["Big"] > max_mean["Medium"]);
    CHECK(min_mean["Medium"] > max_mean["Small"]);
    CHECK(max_mean["Small"] > 0);
}

TEST_CASE("organ centers follow their configured axial law") {
    auto cfg = PhantomConfig::defaults();
    const int trials = 60;
    std::map<int, double> mean_zf;
    for (int s = 0; s < trials; ++s) {
        auto ph = generate_phantom(derive_seed(2000, uint64_t(s)), cfg);
        for (const auto& o : ph.placed) mean_zf[o.id] += (o.center[0] + 0.5) / cfg.shape[0];
    }

    double sxx = 0, sxy = 0, mx = 0, my = 0;
    for (const auto& spec : cfg.organs) {
        mean_zf[spec.id] /= trials;
        // mean-zero uniform jitter: the empirical mean sits within ~3 standard
        // errors of the configured center
        const double tol = std::max(0.01, 3.2 * spec.z_jitter / std::sqrt(3.0 * trials));
        CHECK(std::abs(mean_zf[spec.id] - spec.z_mean) < tol);
        mx += spec.z_mean;
        my += mean_zf[spec.id];
    }
    mx /= double(cfg.organs.size());
    my /= double(cfg.organs.size());
    for (const auto& spec : cfg.organs) {
        sxx += (spec.z_mean - mx) * (spec.z_mean - mx);
        sxy += (spec.z_mean - mx) * (mean_zf[spec.id] - my);
    }
    // realized position regressed on configured position: unit slope
    CHECK(std::abs(sxy / sxx - 1.0) < 0.05);
}

TEST_CASE("oversized organs are rejected with the organ named") {
    auto cfg = PhantomConfig::defaults();
    cfg.organs[0].radii = {0.7, 0.7, 0.7};
    CHECK_THROWS_WITH_AS(generate_phantom(3, cfg), doctest::Contains(cfg.organs[0].name.c_str()),
                         ConfigError);
}

TEST_CASE("config validation enforces the size hierarchy and unique ids") {
    auto cfg = PhantomConfig::defaults();
    cfg.validate();  // the shipped catalog must be coherent

    auto dup = cfg;
    dup.organs[1].id = dup.organs[0].id;
    CHECK_THROWS_AS(dup.validate(), ConfigError);

    auto tiny_big = cfg;
    for (auto& o : tiny_big.organs)
        if (o.size_class == "Big") o.radii = {0.01, 0.01, 0.01};
    CHECK_THROWS_WITH_AS(tiny_big.validate(), doctest::Contains("Big"), ConfigError);

    auto bad_class = cfg;
    bad_class.organs[0].size_class = "Huge";
    CHECK_THROWS_AS(bad_class.validate(), ConfigError);

    auto flat = cfg;
    flat.shape = {4, 32, 32};
    CHECK_THROWS_AS(flat.validate(), ConfigError);
}

TEST_CASE("the shifted distribution differs only in its declared knobs") {
    auto a = PhantomConfig::defaults();
    auto b = PhantomConfig::shifted_b();
    CHECK(b.distribution == "B");
    CHECK(b.noise_scale == doctest::Approx(1.5));
    CHECK(b.size_scale == doctest::Approx(0.92));

    auto ja = phantom_config_to_json(a);
    auto jb = phantom_config_to_json(b);
    for (auto& [key, val] : ja.items()) {
        if (key == "distribution" || key == "noise_scale" || key == "size_scale") continue;
        CHECK(jb.at(key) == val);
    }

    // the round trip preserves every field
    auto back = phantom_config_from_json(jb);
    CHECK(phantom_config_to_json(back) == jb);
}

TEST_CASE("corpus manifests are deterministic and self-describing") {
    testutil::TempDir tmp;
    auto cfg = PhantomConfig::defaults();

    auto empty = generate_corpus(0, 9, cfg);
    CHECK(empty.items.empty());

    auto m1 = generate_corpus(3, 9, cfg);
    auto m2 = generate_corpus(3, 9, cfg);
    REQUIRE(m1.items.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(m1.items[i].seed == m2.items[i].seed);
        CHECK(m1.items[i].image == m2.items[i].image);
    }
    CHECK(m1.items[0].seed != m1.items[1].seed);

    write_corpus(m1, tmp.str("corpus"));
    auto loaded = load_corpus_manifest(tmp.str("corpus/manifest.json"));
    CHECK(loaded.seed == 9);
    REQUIRE(loaded.items.size() == 3);
    CHECK(loaded.config.distribution == "A");

    auto images = load_corpus_images(tmp.str("corpus/manifest.json"));
    auto labels = load_corpus_labels(tmp.str("corpus/manifest.json"));
    REQUIRE(images.size() == 3);
    REQUIRE(labels.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        auto ph = generate_phantom(m1.items[i].seed, cfg);
        CHECK(std::memcmp(images[i].data.data(), ph.image.data.data(),
                          ph.image.data.size() * 4) == 0);
        CHECK(std::memcmp(labels[i].data.data(), ph.labels.data.data(),
                          ph.labels.data.size() * 4) == 0);
    }

    CHECK_THROWS_AS(load_corpus_manifest(tmp.str("nowhere/manifest.json")),
                    MissingArtifactError);
}
