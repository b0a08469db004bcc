#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxdiff/bpr.hpp"
#include "voxdiff/checkpoint.hpp"
#include "voxdiff/denoiser.hpp"
#include "voxdiff/diffusion.hpp"
#include "voxdiff/volume.hpp"

namespace voxdiff {

struct PretrainConfig {
    std::array<int, 3> patch_hwd = {32, 32, 16};  // (h, w, d) = (y, x, z)
    int epochs = 10;  // one epoch = one random patch per training volume
    double learning_rate = 1e-4;
    int batch_size = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int T = 100;
    double beta_min = 0;  // 0 = derive from T by proportional rescaling
    double beta_max = 0;
    bool conditioned = false;
    uint64_t seed = 1;
    int checkpoint_every = 0;  // steps; 0 = final checkpoint only
    DenoiserConfig model;

    std::array<int, 3> patch_zyx() const {
        return {patch_hwd[2], patch_hwd[0], patch_hwd[1]};
    }
    // resolves derived fields (beta range, conditioning channel count)
    void normalize();
};

nlohmann::json pretrain_config_to_json(const PretrainConfig& cfg);
PretrainConfig pretrain_config_from_json(const nlohmann::json& j);

// Runs the denoising pretraining loop and returns the final checkpoint path
// (<out_dir>/ddpm.ckpt). Also writes <out_dir>/loss.csv (step, loss, wall_ms)
// and a wall-clock sidecar next to the checkpoint.
std::string train_ddpm(const std::vector<Volume>& dataset, const PretrainConfig& cfg,
                       BprModel* bpr, const std::string& out_dir);

// Continues training from a checkpoint until the configured epoch count is
// reached. A checkpoint already at the final step is returned unchanged.
std::string resume(const std::string& checkpoint_path, const std::vector<Volume>& dataset,
                   BprModel* bpr, const std::string& out_dir);

// Writes a freshly initialized, untrained checkpoint (the random-weights
// baseline for probing comparisons).
std::string init_ddpm(const PretrainConfig& cfg, const std::string& out_dir);

struct LoadedDenoiser {
    PretrainConfig cfg;
    NoiseSchedule schedule;
    std::unique_ptr<Denoiser<float>> model;
    int64_t step = 0;
    std::string rng_state;
    // optimizer state, present when the checkpoint carries it
    bool has_optimizer = false;
    int64_t opt_t = 0;
    std::vector<Tensor<float>> opt_m, opt_v;
};

LoadedDenoiser load_denoiser(const std::string& path);

// Loads checkpointed parameters into an existing model; the architectures
// must agree (a conditioned checkpoint cannot feed an unconditioned model).
void load_denoiser_params(Denoiser<float>& model, const Checkpoint& ck);

}  // namespace voxdiff
