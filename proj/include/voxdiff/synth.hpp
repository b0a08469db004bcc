#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxdiff/volume.hpp"

namespace voxdiff {

// One ellipsoidal organ. Positions and radii are fractions of the volume
// extent along each axis (zyx); z_mean is the organ center on the axial
// axis, tied linearly to the ground-truth body coordinate.
struct OrganSpec {
    int id = 0;
    std::string name;
    std::string size_class;  // Big / Medium / Small
    std::string column;      // report column; paired organs share one
    std::array<double, 3> radii{};  // zyx, fraction of extent
    double z_mean = 0.5;
    double z_jitter = 0.0;
    double y_mean = 0.5, x_mean = 0.5;
    double xy_jitter = 0.0;
    double intensity = 0.0;
};

struct PhantomConfig {
    std::array<int, 3> shape{48, 32, 32};  // zyx
    std::array<double, 3> spacing{2.0, 1.0, 1.0};
    std::vector<OrganSpec> organs;
    double torso_intensity = -0.15;   // at the caudal end (z fraction 0)
    double torso_gradient = 0.35;     // added linearly along z
    double texture_std = 0.05;        // Gaussian texture inside the body
    double background_std = 0.03;     // noise outside the body
    double torso_radius_jitter = 0.03;  // per-phantom, fraction of extent
    double noise_scale = 1.0;         // distribution shift knobs
    double size_scale = 1.0;
    std::string distribution = "A";

    // Default catalog: one Big organ, a Medium left/right pair reported as a
    // single column, a Small pair identical in shape and intensity that
    // differs only in axial position, and one freely placed Small organ.
    static PhantomConfig defaults();
    // Same catalog, with the declared distribution shifts applied
    // (noise x1.5, organ size x0.92).
    static PhantomConfig shifted_b();

    void validate() const;
};

nlohmann::json phantom_config_to_json(const PhantomConfig& c);
PhantomConfig phantom_config_from_json(const nlohmann::json& j);

// Realized placement after jitter, in voxel coordinates (zyx). Exposed so
// the rasterization can be checked against the ellipsoid inequality.
struct PlacedOrgan {
    int id = 0;
    std::array<double, 3> center{};
    std::array<double, 3> radii{};
};

struct Phantom {
    Volume image;       // [-1, 1]
    Volume labels;      // class ids, 0 = background
    Volume body_coord;  // z-linear ground truth in [-1, 1]
    std::vector<PlacedOrgan> placed;
};

Phantom generate_phantom(uint64_t seed, const PhantomConfig& config);

struct CorpusItem {
    int index = 0;
    uint64_t seed = 0;
    std::string image, labels, coord;  // file names relative to the manifest
};

struct CorpusManifest {
    uint64_t seed = 0;
    PhantomConfig config;
    std::vector<CorpusItem> items;
};

CorpusManifest generate_corpus(int n, uint64_t seed, const PhantomConfig& config);

// Rasterizes every phantom in the manifest into `dir` and writes
// `dir/manifest.json`.
void write_corpus(const CorpusManifest& m, const std::string& dir);
CorpusManifest load_corpus_manifest(const std::string& path);

// Loads the volumes referenced by a manifest on disk.
std::vector<Volume> load_corpus_images(const std::string& manifest_path);
std::vector<Volume> load_corpus_labels(const std::string& manifest_path);

}  // namespace voxdiff
