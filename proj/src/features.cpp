#include "voxdiff/features.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "voxdiff/checkpoint.hpp"
#include "voxdiff/common.hpp"
#include "voxdiff/patches.hpp"
#include "voxdiff/pretrain.hpp"

namespace voxdiff {

namespace {

// fnv-1a over the raw voxel bytes, matching the checkpoint file hash format
std::string data_hash_hex(const Volume& v) {
    uint64_t h = 1469598103934665603ull;
    const auto* p = reinterpret_cast<const unsigned char*>(v.data.data());
    for (size_t i = 0; i < v.data.size() * sizeof(float); ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

}  // namespace

std::vector<int> select_levels(const DenoiserConfig& cfg, const std::vector<int>& which) {
    if (which.empty()) throw ConfigError("feature level subset is empty");
    const std::vector<int> ch = cfg.level_channels();
    std::vector<int> out;
    for (int l : which) {
        if (l < 0 || l >= cfg.levels)
            throw ConfigError("unknown pyramid level " + std::to_string(l));
        out.push_back(ch[size_t(l)]);
    }
    return out;
}

FeatureVolume extract_features(Denoiser<float>& model, const NoiseSchedule& sched,
                               const Volume& v, const ExtractOptions& opt, BprModel* bpr,
                               const std::array<int, 3>& patch_hwd_default) {
    if (v.kind != VolKind::image) throw ConfigError("feature extraction expects an image");
    if (opt.timesteps.empty()) throw ConfigError("timestep list is empty");
    for (int t : opt.timesteps) sched.check_t(t);
    if (opt.overlap < 0 || opt.overlap >= 1)
        throw ConfigError("overlap must lie in [0, 1)");
    if (opt.noise_samples < 1) throw ConfigError("noise_samples must be at least 1");
    const std::vector<int> level_ch = select_levels(model.config(), opt.levels);
    const bool conditioned = model.config().in_channels == 2;
    if (conditioned && !bpr)
        throw ConfigError(
            "conditioned checkpoint requires a slice-score model; pass --bpr");

    std::array<int, 3> hwd = opt.patch_hwd;
    if (hwd[0] == 0 && hwd[1] == 0 && hwd[2] == 0) hwd = patch_hwd_default;
    const std::array<int, 3> patch = {hwd[2], hwd[0], hwd[1]};  // (z, y, x)

    Volume cond_map;
    if (conditioned) cond_map = coordinate_map(*bpr, v);

    const PatchGrid grid = plan_patch_grid(v.shape, patch, opt.overlap);
    const int ch_per_t = std::accumulate(level_ch.begin(), level_ch.end(), 0);
    const int ch_total = ch_per_t * int(opt.timesteps.size());
    const size_t patch_vox = size_t(patch[0]) * patch[1] * patch[2];

    std::vector<Tensor<float>> outputs;
    outputs.reserve(grid.origins.size());
    for (size_t pi = 0; pi < grid.origins.size(); ++pi) {
        const auto& origin = grid.origins[pi];
        Volume p = extract_patch(v, origin, patch);
        Tensor<float> x0({1, patch[0], patch[1], patch[2]}, std::move(p.data));
        Tensor<float> cond_patch;
        if (conditioned) {
            Volume cp = extract_patch(cond_map, origin, patch);
            cond_patch = Tensor<float>({1, patch[0], patch[1], patch[2]}, std::move(cp.data));
        }
        Tensor<float> feat({ch_total, patch[0], patch[1], patch[2]});
        int ch_base = 0;
        for (int t : opt.timesteps) {
            Tensor<float> acc({ch_per_t, patch[0], patch[1], patch[2]});
            for (int s = 0; s < opt.noise_samples; ++s) {
                Rng r(derive_seed(opt.seed, uint64_t(pi), uint64_t(t), uint64_t(s)));
                Tensor<float> eps = Tensor<float>::randn(x0.shape(), r);
                Tensor<float> x_t = q_sample(x0, t, eps, sched);
                Tensor<float> x_in;
                if (conditioned) {
                    x_in = Tensor<float>({2, patch[0], patch[1], patch[2]});
                    std::memcpy(x_in.data(), x_t.data(), patch_vox * sizeof(float));
                    std::memcpy(x_in.data() + patch_vox, cond_patch.data(),
                                patch_vox * sizeof(float));
                } else {
                    x_in = std::move(x_t);
                }
                DenoiserOutput<float> out = model.forward(x_in, t, /*want_pyramid=*/true);
                const float w = 1.0f / float(opt.noise_samples);
                int ch_off = 0;
                for (size_t li = 0; li < opt.levels.size(); ++li) {
                    const Tensor<float>& lv = out.pyramid[size_t(opt.levels[li])];
                    Tensor<float> up;
                    const Tensor<float>* src = &lv;
                    if (lv.size(1) != patch[0] || lv.size(2) != patch[1] ||
                        lv.size(3) != patch[2]) {
                        up = upsample_trilinear(lv, patch);
                        src = &up;
                    }
                    float* dst = acc.data() + size_t(ch_off) * patch_vox;
                    const float* sp = src->data();
                    const size_t n = size_t(level_ch[li]) * patch_vox;
                    for (size_t i = 0; i < n; ++i) dst[i] += w * sp[i];
                    ch_off += level_ch[li];
                }
            }
            std::memcpy(feat.data() + size_t(ch_base) * patch_vox, acc.data(),
                        size_t(ch_per_t) * patch_vox * sizeof(float));
            ch_base += ch_per_t;
        }
        outputs.push_back(std::move(feat));
    }
    FeatureVolume f;
    f.shape = v.shape;
    f.spacing = v.spacing;
    f.timesteps = opt.timesteps;
    f.levels = opt.levels;
    f.level_channels = level_ch;
    f.seed = opt.seed;
    f.volume_hash = data_hash_hex(v);
    f.data = fuse_patches(grid, outputs);
    return f;
}

FeatureVolume extract_features(const std::string& checkpoint_path, const Volume& v,
                               const ExtractOptions& opt, BprModel* bpr) {
    LoadedDenoiser ld = load_denoiser(checkpoint_path);
    FeatureVolume f =
        extract_features(*ld.model, ld.schedule, v, opt, bpr, ld.cfg.patch_hwd);
    f.checkpoint_hash = file_hash_hex(checkpoint_path);
    return f;
}

void save_features(const FeatureVolume& f, const std::string& path) {
    nlohmann::json header = {{"format", "voxdiff.feat.v1"},
                             {"shape", f.shape},
                             {"spacing", f.spacing},
                             {"channels", f.channels()},
                             {"timesteps", f.timesteps},
                             {"levels", f.levels},
                             {"level_channels", f.level_channels},
                             {"seed", f.seed},
                             {"checkpoint_hash", f.checkpoint_hash},
                             {"volume_hash", f.volume_hash},
                             {"dtype", "f32"}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << header.dump() << '\n';
    out.write(reinterpret_cast<const char*>(f.data.data()),
              std::streamsize(size_t(f.data.numel()) * sizeof(float)));
    if (!out) throw IoError("short write to " + path);
}

FeatureVolume load_features(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("feature volume not found: " + path);
    std::string header;
    if (!std::getline(in, header)) throw IoError("truncated feature volume: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad feature manifest in " + path + ": " + e.what());
    }
    if (j.value("format", "") != "voxdiff.feat.v1")
        throw IoError("unrecognized feature format in " + path);
    FeatureVolume f;
    j.at("shape").get_to(f.shape);
    j.at("spacing").get_to(f.spacing);
    j.at("timesteps").get_to(f.timesteps);
    j.at("levels").get_to(f.levels);
    j.at("level_channels").get_to(f.level_channels);
    f.seed = j.at("seed").get<uint64_t>();
    f.checkpoint_hash = j.value("checkpoint_hash", "");
    f.volume_hash = j.value("volume_hash", "");
    const int ch = j.at("channels").get<int>();
    f.data = Tensor<float>({ch, f.shape[0], f.shape[1], f.shape[2]});
    in.read(reinterpret_cast<char*>(f.data.data()),
            std::streamsize(size_t(f.data.numel()) * sizeof(float)));
    if (in.gcount() != std::streamsize(size_t(f.data.numel()) * sizeof(float)))
        throw IoError("truncated feature payload in " + path);
    return f;
}

}  // namespace voxdiff
