#pragma once

#include <array>
#include <string>
#include <vector>

#include "voxdiff/common.hpp"

namespace voxdiff {

enum class VolKind { image, label, coord };

std::string kind_name(VolKind k);
VolKind kind_from_name(const std::string& s);

// Single-channel 3D scalar grid. Data is row-major with z the slowest
// axis: index = (z * Dy + y) * Dx + x. Shapes and spacings are ordered
// (z, y, x) throughout.
struct Volume {
    std::array<int, 3> shape{0, 0, 0};          // (Dz, Dy, Dx)
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel (z, y, x)
    VolKind kind = VolKind::image;
    std::vector<float> data;

    int64_t numel() const {
        return static_cast<int64_t>(shape[0]) * shape[1] * shape[2];
    }
    float& at(int z, int y, int x) {
        return data[(static_cast<size_t>(z) * shape[1] + y) * shape[2] + x];
    }
    float at(int z, int y, int x) const {
        return data[(static_cast<size_t>(z) * shape[1] + y) * shape[2] + x];
    }

    static Volume make(std::array<int, 3> shape, std::array<double, 3> spacing, VolKind kind,
                       float fill = 0.0f);
    void validate() const;
};

// `.v3d` container: one UTF-8 JSON header line terminated by '\n'
// ({"shape":[z,y,x],"spacing":[sz,sy,sx],"dtype":"f32"|"u8","kind":...}),
// immediately followed by the raw little-endian payload. Labels are
// stored as unsigned bytes, images and coordinate maps as f32.
Volume load_volume(const std::string& path);
void save_volume(const Volume& v, const std::string& path);

// Resamples to the target voxel spacing. New shape is
// round(old_shape * old_spacing / target_spacing); images and coordinate
// maps interpolate trilinearly, labels take the nearest source voxel.
Volume resample(const Volume& v, const std::array<double, 3>& target_spacing);

// Clips to [lo, hi] then maps affinely onto [-1, 1].
Volume normalize_intensity(const Volume& v, double lo, double hi);

}  // namespace voxdiff
