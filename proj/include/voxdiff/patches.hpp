#pragma once

#include <array>
#include <vector>

#include "voxdiff/tensor.hpp"
#include "voxdiff/volume.hpp"

namespace voxdiff {

// Sliding-window decomposition of a volume. Origins cover every voxel at
// least once; the final origin per axis is clamped so the last patch ends
// exactly at the volume boundary.
struct PatchGrid {
    std::array<int, 3> volume_shape{0, 0, 0};
    std::array<int, 3> patch_shape{0, 0, 0};
    std::array<int, 3> stride{0, 0, 0};
    std::vector<std::array<int, 3>> origins;
};

// stride = floor(patch * (1 - overlap_fraction)), at least 1 per axis.
PatchGrid plan_patch_grid(const std::array<int, 3>& volume_shape,
                          const std::array<int, 3>& patch_shape, double overlap_fraction);

// Contiguous copy of the patch starting at `origin`; spacing inherited.
Volume extract_patch(const Volume& v, const std::array<int, 3>& origin,
                     const std::array<int, 3>& patch_shape);

// Same but from a multi-channel (C, Z, Y, X) field.
template <typename T>
Tensor<T> extract_patch(const Tensor<T>& field, const std::array<int, 3>& origin,
                        const std::array<int, 3>& patch_shape);

// Voxel-wise mean of all patch outputs covering each voxel. Every patch
// output is a (C, pz, py, px) tensor, one per grid origin in order.
template <typename T>
Tensor<T> fuse_patches(const PatchGrid& grid, const std::vector<Tensor<T>>& patch_outputs);

// Number of patches covering each voxel (rank-3 tensor over the volume).
Tensor<int> coverage_counts(const PatchGrid& grid);

}  // namespace voxdiff
