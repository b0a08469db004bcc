#include "voxdiff/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "voxdiff/common.hpp"

namespace voxdiff {

const NamedTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void Checkpoint::add(const std::string& name, const std::vector<int>& shape,
                     const std::vector<float>& data) {
    if (Tensor<float>::numel_of(shape) != int64_t(data.size()))
        throw IoError("tensor " + name + " data does not match its shape");
    tensors.push_back({name, shape, data});
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    nlohmann::json manifest = ck.meta;
    manifest["format"] = "voxdiff.ckpt.v1";
    nlohmann::json tl = nlohmann::json::array();
    size_t offset = 0;
    for (const auto& t : ck.tensors) {
        tl.push_back({{"name", t.name},
                      {"shape", t.shape},
                      {"dtype", "f32"},
                      {"offset", offset}});
        offset += t.data.size() * sizeof(float);
    }
    manifest["tensors"] = tl;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << manifest.dump() << '\n';
    for (const auto& t : ck.tensors)
        f.write(reinterpret_cast<const char*>(t.data.data()),
                std::streamsize(t.data.size() * sizeof(float)));
    if (!f) throw IoError("short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("checkpoint not found: " + path);
    std::string header;
    if (!std::getline(f, header)) throw IoError("truncated checkpoint: " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad checkpoint manifest in " + path + ": " + e.what());
    }
    if (manifest.value("format", "") != "voxdiff.ckpt.v1")
        throw IoError("unrecognized checkpoint format in " + path);
    Checkpoint ck;
    ck.meta = manifest;
    ck.meta.erase("tensors");
    const std::streampos payload_start = f.tellg();
    for (const auto& e : manifest.at("tensors")) {
        NamedTensor t;
        t.name = e.at("name").get<std::string>();
        t.shape = e.at("shape").get<std::vector<int>>();
        if (e.at("dtype").get<std::string>() != "f32")
            throw IoError("unsupported tensor dtype for " + t.name + " in " + path);
        const size_t offset = e.at("offset").get<size_t>();
        const int64_t n = Tensor<float>::numel_of(t.shape);
        t.data.resize(size_t(n));
        f.seekg(payload_start + std::streampos(offset));
        f.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(n * sizeof(float)));
        if (f.gcount() != std::streamsize(n * sizeof(float)))
            throw IoError("truncated tensor payload for " + t.name + " in " + path);
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

nlohmann::json denoiser_config_to_json(const DenoiserConfig& cfg) {
    return {{"in_channels", cfg.in_channels},
            {"base_width", cfg.base_width},
            {"levels", cfg.levels},
            {"channel_mult", cfg.channel_mult},
            {"attn", cfg.attn},
            {"time_embed_dim", cfg.time_embed_dim},
            {"head_dim", cfg.head_dim}};
}

DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
    DenoiserConfig cfg;
    cfg.in_channels = j.at("in_channels").get<int>();
    cfg.base_width = j.at("base_width").get<int>();
    cfg.levels = j.at("levels").get<int>();
    cfg.channel_mult = j.at("channel_mult").get<std::vector<int>>();
    cfg.attn = j.at("attn").get<std::vector<std::string>>();
    cfg.time_embed_dim = j.at("time_embed_dim").get<int>();
    cfg.head_dim = j.at("head_dim").get<int>();
    cfg.normalize();
    return cfg;
}

nlohmann::json schedule_to_json(const NoiseSchedule& s) {
    return {{"T", s.T}, {"beta_min", s.beta_min}, {"beta_max", s.beta_max}};
}

NoiseSchedule schedule_from_json(const nlohmann::json& j) {
    return make_schedule(j.at("T").get<int>(), j.at("beta_min").get<double>(),
                         j.at("beta_max").get<double>());
}

template <typename T>
void pack_params(const std::vector<ParamRef<T>>& params, Checkpoint& ck,
                 const std::string& prefix) {
    for (const auto& p : params) {
        std::vector<float> data(size_t(p.value->numel()));
        for (size_t i = 0; i < data.size(); ++i)
            data[i] = static_cast<float>(p.value->data()[i]);
        ck.add(prefix + p.name, p.value->shape(), data);
    }
}

template <typename T>
void unpack_params(const Checkpoint& ck, std::vector<ParamRef<T>>& params,
                   const std::string& prefix) {
    std::set<std::string> expected;
    for (auto& p : params) {
        const std::string name = prefix + p.name;
        expected.insert(name);
        const NamedTensor* t = ck.find(name);
        if (!t) throw IoError("missing tensor: " + name);
        if (t->shape != p.value->shape())
            throw IoError("shape mismatch for tensor " + name);
        for (size_t i = 0; i < t->data.size(); ++i)
            p.value->data()[i] = static_cast<T>(t->data[i]);
    }
    for (const auto& t : ck.tensors) {
        if (t.name.rfind(prefix, 0) != 0) continue;
        if (!expected.count(t.name)) throw IoError("unexpected tensor: " + t.name);
    }
}

template void pack_params<float>(const std::vector<ParamRef<float>>&, Checkpoint&,
                                 const std::string&);
template void pack_params<double>(const std::vector<ParamRef<double>>&, Checkpoint&,
                                  const std::string&);
template void unpack_params<float>(const Checkpoint&, std::vector<ParamRef<float>>&,
                                   const std::string&);
template void unpack_params<double>(const Checkpoint&, std::vector<ParamRef<double>>&,
                                    const std::string&);

std::string file_hash_hex(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("cannot hash missing file: " + path);
    uint64_t h = 1469598103934665603ull;
    char buf[1 << 16];
    while (f) {
        f.read(buf, sizeof(buf));
        for (std::streamsize i = 0; i < f.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

}  // namespace voxdiff
