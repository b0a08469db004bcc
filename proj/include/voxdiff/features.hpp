#pragma once

#include <string>
#include <vector>

#include "voxdiff/bpr.hpp"
#include "voxdiff/denoiser.hpp"
#include "voxdiff/diffusion.hpp"
#include "voxdiff/tensor.hpp"
#include "voxdiff/volume.hpp"

namespace voxdiff {

struct ExtractOptions {
    std::vector<int> timesteps = {1, 3, 6};
    std::vector<int> levels = {0, 1, 2};
    std::array<int, 3> patch_hwd = {0, 0, 0};  // 0 = take from the checkpoint
    double overlap = 0.5;
    int noise_samples = 1;
    uint64_t seed = 7;
};

struct FeatureVolume {
    std::array<int, 3> shape{0, 0, 0};  // spatial (z, y, x)
    std::array<double, 3> spacing{1, 1, 1};
    Tensor<float> data;  // (channels, z, y, x)
    std::vector<int> timesteps;
    std::vector<int> levels;
    std::vector<int> level_channels;  // per selected level, for one timestep
    uint64_t seed = 0;
    std::string checkpoint_hash;
    std::string volume_hash;

    int channels() const { return data.rank() == 4 ? data.size(0) : 0; }
};

// Validates a pyramid-level subset against the architecture and returns the
// channel count each selected level contributes.
std::vector<int> select_levels(const DenoiserConfig& cfg, const std::vector<int>& which);

// Frozen-backbone extraction: per patch and timestep, noise the patch with a
// seeded draw, run the denoiser, trilinearly upsample the selected pyramid
// levels to patch resolution, concatenate channels (levels, then timesteps,
// then mean over noise samples), and fuse the patch grid by mean.
FeatureVolume extract_features(Denoiser<float>& model, const NoiseSchedule& sched,
                               const Volume& v, const ExtractOptions& opt, BprModel* bpr,
                               const std::array<int, 3>& patch_hwd_default);

// Same, driven by a checkpoint file; records provenance hashes.
FeatureVolume extract_features(const std::string& checkpoint_path, const Volume& v,
                               const ExtractOptions& opt, BprModel* bpr);

void save_features(const FeatureVolume& f, const std::string& path);
FeatureVolume load_features(const std::string& path);

}  // namespace voxdiff
