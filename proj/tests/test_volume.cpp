#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "test_util.hpp"
#include "voxdiff/common.hpp"
#include "voxdiff/rng.hpp"
#include "voxdiff/volume.hpp"

using namespace voxdiff;

TEST_CASE("image volumes round-trip through the container bit for bit") {
    testutil::TempDir tmp;
    Rng rng(3);
    Volume v = Volume::make({4, 5, 6}, {2.0, 1.0, 1.0}, VolKind::image);
    for (auto& f : v.data) f = float(rng.normal());

    const std::string path = tmp.str("a.v3d");
    save_volume(v, path);
    Volume r = load_volume(path);
    CHECK(r.shape == v.shape);
    CHECK(r.spacing == v.spacing);
    CHECK(r.kind == VolKind::image);
    REQUIRE(r.data.size() == v.data.size());
    CHECK(std::memcmp(r.data.data(), v.data.data(), v.data.size() * sizeof(float)) == 0);

    // overwriting an existing file must succeed and reflect the new content
    v.at(0, 0, 0) = 42.0f;
    save_volume(v, path);
    CHECK(load_volume(path).at(0, 0, 0) == 42.0f);
}

TEST_CASE("label volumes are stored as single bytes") {
    testutil::TempDir tmp;
    Volume v = Volume::make({2, 3, 4}, {1, 1, 1}, VolKind::label);
    for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = float(i % 5);

    const std::string path = tmp.str("lab.v3d");
    save_volume(v, path);

    // payload is one byte per voxel, directly after the header line
    std::string raw = testutil::read_file(path);
    const size_t header_end = raw.find('\n');
    REQUIRE(header_end != std::string::npos);
    CHECK(raw.size() - header_end - 1 == 24);

    Volume r = load_volume(path);
    CHECK(r.kind == VolKind::label);
    for (size_t i = 0; i < v.data.size(); ++i) CHECK(r.data[i] == float(i % 5));
}

TEST_CASE("the loader rejects truncated or missing files") {
    testutil::TempDir tmp;
    Volume v = Volume::make({2, 2, 2}, {1, 1, 1}, VolKind::image, 1.0f);
    const std::string path = tmp.str("t.v3d");
    save_volume(v, path);

    std::string raw = testutil::read_file(path);
    testutil::write_file(path, raw.substr(0, raw.size() - 4));
    CHECK_THROWS_WITH_AS(load_volume(path), doctest::Contains("payload"), IoError);

    CHECK_THROWS_AS(load_volume(tmp.str("absent.v3d")), MissingArtifactError);

    testutil::write_file(tmp.str("junk.v3d"), "not json\n\x01\x02");
    CHECK_THROWS_AS(load_volume(tmp.str("junk.v3d")), IoError);
}

TEST_CASE("resampling is exact on identity, constants and linear ramps") {
    SUBCASE("identity spacing returns the same grid") {
        Rng rng(5);
        Volume v = Volume::make({3, 4, 5}, {1.5, 1.0, 2.0}, VolKind::image);
        for (auto& f : v.data) f = float(rng.normal());
        Volume r = resample(v, v.spacing);
        CHECK(r.shape == v.shape);
        for (size_t i = 0; i < v.data.size(); ++i)
            CHECK(r.data[i] == doctest::Approx(v.data[i]));
    }

    SUBCASE("constants survive any spacing change") {
        Volume v = Volume::make({8, 8, 8}, {1, 1, 1}, VolKind::image, 0.25f);
        Volume r = resample(v, {2.0, 1.5, 0.75});
        CHECK(r.shape == std::array<int, 3>{4, 5, 11});  // round(8 * 1 / s)
        for (float f : r.data) CHECK(f == doctest::Approx(0.25f));
    }

    SUBCASE("a z ramp resamples onto the coarse voxel centers") {
        Volume v = Volume::make({8, 1, 1}, {1, 1, 1}, VolKind::image);
        for (int z = 0; z < 8; ++z) v.at(z, 0, 0) = float(z);
        Volume r = resample(v, {2.0, 1.0, 1.0});
        REQUIRE(r.shape == std::array<int, 3>{4, 1, 1});
        // coarse centers sit at fine coordinates 0.5, 2.5, 4.5, 6.5
        const float want[4] = {0.5f, 2.5f, 4.5f, 6.5f};
        for (int z = 0; z < 4; ++z) CHECK(r.at(z, 0, 0) == doctest::Approx(want[z]).epsilon(1e-6));
        CHECK(r.spacing == std::array<double, 3>{2.0, 1.0, 1.0});
    }

    SUBCASE("labels use nearest-voxel lookup and keep integer classes") {
        Volume v = Volume::make({8, 4, 4}, {1, 1, 1}, VolKind::label);
        for (int z = 0; z < 8; ++z)
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x) v.at(z, y, x) = z < 4 ? 0.0f : 3.0f;
        Volume r = resample(v, {2.0, 1.0, 1.0});
        REQUIRE(r.shape == std::array<int, 3>{4, 4, 4});
        for (float f : r.data) CHECK((f == 0.0f || f == 3.0f));
        CHECK(r.at(0, 0, 0) == 0.0f);
        CHECK(r.at(3, 0, 0) == 3.0f);
    }
}

TEST_CASE("intensity normalization maps the clip window onto [-1, 1]") {
    Volume v = Volume::make({1, 1, 5}, {1, 1, 1}, VolKind::image);
    v.data = {-500.0f, 0.0f, 150.0f, 300.0f, 1000.0f};
    Volume n = normalize_intensity(v, 0.0, 300.0);
    CHECK(n.data[0] == doctest::Approx(-1.0f));  // clipped up to lo
    CHECK(n.data[1] == doctest::Approx(-1.0f));
    CHECK(n.data[2] == doctest::Approx(0.0f));
    CHECK(n.data[3] == doctest::Approx(1.0f));
    CHECK(n.data[4] == doctest::Approx(1.0f));  // clipped down to hi
    CHECK_THROWS_AS(normalize_intensity(v, 5.0, 5.0), ConfigError);
}

TEST_CASE("volume validation rejects inconsistent shapes") {
    Volume v = Volume::make({2, 2, 2}, {1, 1, 1}, VolKind::image);
    v.data.pop_back();
    CHECK_THROWS_AS(v.validate(), IoError);
    Volume z;
    CHECK_THROWS_AS(z.validate(), IoError);
}
