#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "voxdiff/denoiser.hpp"
#include "voxdiff/diffusion.hpp"
#include "voxdiff/nn.hpp"
#include "voxdiff/tensor.hpp"

namespace voxdiff {

// Single-file model container: one line of manifest JSON, a newline, then
// the concatenated little-endian f32 tensor payload. Byte-deterministic for
// identical contents; wall-clock metadata belongs in a sidecar, never here.
struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

struct Checkpoint {
    nlohmann::json meta;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const;
    void add(const std::string& name, const std::vector<int>& shape,
             const std::vector<float>& data);
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

nlohmann::json denoiser_config_to_json(const DenoiserConfig& cfg);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);
nlohmann::json schedule_to_json(const NoiseSchedule& s);
NoiseSchedule schedule_from_json(const nlohmann::json& j);

// Copies live parameters into / out of the container. Loading is strict:
// every parameter must be present with its exact shape, and every tensor
// under `prefix` must correspond to a parameter.
template <typename T>
void pack_params(const std::vector<ParamRef<T>>& params, Checkpoint& ck,
                 const std::string& prefix = "");
template <typename T>
void unpack_params(const Checkpoint& ck, std::vector<ParamRef<T>>& params,
                   const std::string& prefix = "");

// FNV-1a over a file's bytes, as a fixed-width hex string. Used to key
// derived artifacts to the exact checkpoint that produced them.
std::string file_hash_hex(const std::string& path);

}  // namespace voxdiff
