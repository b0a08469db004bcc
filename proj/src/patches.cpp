#include "voxdiff/patches.hpp"

#include <cmath>

namespace voxdiff {

PatchGrid plan_patch_grid(const std::array<int, 3>& volume_shape,
                          const std::array<int, 3>& patch_shape, double overlap_fraction) {
    if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0))
        throw ConfigError("overlap_fraction must be in [0, 1)");
    for (int i = 0; i < 3; ++i) {
        if (patch_shape[i] <= 0) throw ConfigError("patch shape must be positive");
        if (patch_shape[i] > volume_shape[i])
            throw ConfigError("patch shape exceeds volume shape on axis " + std::to_string(i));
    }

    PatchGrid g;
    g.volume_shape = volume_shape;
    g.patch_shape = patch_shape;

    std::array<std::vector<int>, 3> axis_origins;
    for (int i = 0; i < 3; ++i) {
        int stride = static_cast<int>(std::floor(patch_shape[i] * (1.0 - overlap_fraction)));
        stride = std::max(stride, 1);
        g.stride[i] = stride;
        int last = volume_shape[i] - patch_shape[i];
        for (int o = 0; o + patch_shape[i] <= volume_shape[i]; o += stride)
            axis_origins[i].push_back(o);
        if (axis_origins[i].back() != last) axis_origins[i].push_back(last);
    }

    for (int oz : axis_origins[0])
        for (int oy : axis_origins[1])
            for (int ox : axis_origins[2]) g.origins.push_back({oz, oy, ox});
    return g;
}

Volume extract_patch(const Volume& v, const std::array<int, 3>& origin,
                     const std::array<int, 3>& patch_shape) {
    for (int i = 0; i < 3; ++i) {
        if (origin[i] < 0 || origin[i] + patch_shape[i] > v.shape[i])
            throw ConfigError("patch origin out of bounds on axis " + std::to_string(i));
    }
    Volume p = Volume::make(patch_shape, v.spacing, v.kind);
    for (int z = 0; z < patch_shape[0]; ++z)
        for (int y = 0; y < patch_shape[1]; ++y)
            for (int x = 0; x < patch_shape[2]; ++x)
                p.at(z, y, x) = v.at(origin[0] + z, origin[1] + y, origin[2] + x);
    return p;
}

template <typename T>
Tensor<T> extract_patch(const Tensor<T>& field, const std::array<int, 3>& origin,
                        const std::array<int, 3>& patch_shape) {
    if (field.rank() != 4) throw ConfigError("extract_patch expects a (C,Z,Y,X) tensor");
    for (int i = 0; i < 3; ++i) {
        if (origin[i] < 0 || origin[i] + patch_shape[i] > field.size(i + 1))
            throw ConfigError("patch origin out of bounds on axis " + std::to_string(i));
    }
    int c_count = field.size(0);
    Tensor<T> p({c_count, patch_shape[0], patch_shape[1], patch_shape[2]});
    for (int c = 0; c < c_count; ++c)
        for (int z = 0; z < patch_shape[0]; ++z)
            for (int y = 0; y < patch_shape[1]; ++y)
                for (int x = 0; x < patch_shape[2]; ++x)
                    p.at(c, z, y, x) = field.at(c, origin[0] + z, origin[1] + y, origin[2] + x);
    return p;
}

Tensor<int> coverage_counts(const PatchGrid& g) {
    Tensor<int> counts({g.volume_shape[0], g.volume_shape[1], g.volume_shape[2]});
    for (const auto& o : g.origins)
        for (int z = 0; z < g.patch_shape[0]; ++z)
            for (int y = 0; y < g.patch_shape[1]; ++y)
                for (int x = 0; x < g.patch_shape[2]; ++x) {
                    int64_t idx = (static_cast<int64_t>(o[0] + z) * g.volume_shape[1] + (o[1] + y)) *
                                      g.volume_shape[2] +
                                  (o[2] + x);
                    counts[idx] += 1;
                }
    return counts;
}

template <typename T>
Tensor<T> fuse_patches(const PatchGrid& g, const std::vector<Tensor<T>>& patch_outputs) {
    if (patch_outputs.size() != g.origins.size())
        throw ConfigError("fuse_patches: expected one output per grid origin (" +
                          std::to_string(g.origins.size()) + "), got " +
                          std::to_string(patch_outputs.size()));
    int channels = patch_outputs.empty() ? 0 : patch_outputs[0].size(0);
    for (const auto& p : patch_outputs) {
        if (p.rank() != 4 || p.size(0) != channels)
            throw ConfigError("fuse_patches: channel count mismatch between patch outputs");
        if (p.size(1) != g.patch_shape[0] || p.size(2) != g.patch_shape[1] ||
            p.size(3) != g.patch_shape[2])
            throw ConfigError("fuse_patches: patch output spatial shape mismatch");
    }

    const auto& vs = g.volume_shape;
    Tensor<T> acc({channels, vs[0], vs[1], vs[2]});
    Tensor<int> counts = coverage_counts(g);

    for (size_t pi = 0; pi < patch_outputs.size(); ++pi) {
        const auto& o = g.origins[pi];
        const auto& p = patch_outputs[pi];
        for (int c = 0; c < channels; ++c)
            for (int z = 0; z < g.patch_shape[0]; ++z)
                for (int y = 0; y < g.patch_shape[1]; ++y)
                    for (int x = 0; x < g.patch_shape[2]; ++x)
                        acc.at(c, o[0] + z, o[1] + y, o[2] + x) += p.at(c, z, y, x);
    }

    int64_t spatial = static_cast<int64_t>(vs[0]) * vs[1] * vs[2];
    for (int64_t i = 0; i < spatial; ++i) {
        int n = counts[i];
        if (n < 1) throw NumericError("fuse_patches: uncovered voxel (grid violates coverage)");
        T inv = T(1) / static_cast<T>(n);
        for (int c = 0; c < channels; ++c) acc[c * spatial + i] *= inv;
    }
    return acc;
}

template Tensor<float> extract_patch(const Tensor<float>&, const std::array<int, 3>&,
                                     const std::array<int, 3>&);
template Tensor<double> extract_patch(const Tensor<double>&, const std::array<int, 3>&,
                                      const std::array<int, 3>&);
template Tensor<float> fuse_patches(const PatchGrid&, const std::vector<Tensor<float>>&);
template Tensor<double> fuse_patches(const PatchGrid&, const std::vector<Tensor<double>>&);

}  // namespace voxdiff
