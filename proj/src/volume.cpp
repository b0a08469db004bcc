#include "voxdiff/volume.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace voxdiff {

using nlohmann::json;

std::string kind_name(VolKind k) {
    switch (k) {
        case VolKind::image: return "image";
        case VolKind::label: return "label";
        case VolKind::coord: return "coord";
    }
    throw std::logic_error("bad kind");
}

VolKind kind_from_name(const std::string& s) {
    if (s == "image") return VolKind::image;
    if (s == "label") return VolKind::label;
    if (s == "coord") return VolKind::coord;
    throw IoError("unknown volume kind: " + s);
}

Volume Volume::make(std::array<int, 3> shape, std::array<double, 3> spacing, VolKind kind,
                    float fill) {
    Volume v;
    v.shape = shape;
    v.spacing = spacing;
    v.kind = kind;
    v.data.assign(static_cast<size_t>(v.numel()), fill);
    v.validate();
    return v;
}

void Volume::validate() const {
    for (int i = 0; i < 3; ++i) {
        if (shape[i] <= 0) throw IoError("volume shape must be positive");
        if (!(spacing[i] > 0.0)) throw IoError("volume spacing must be positive");
    }
    if (static_cast<int64_t>(data.size()) != numel())
        throw IoError("volume data length does not match shape");
}

Volume load_volume(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("cannot open volume file: " + path);

    std::string header;
    if (!std::getline(f, header)) throw IoError("missing v3d header line: " + path);

    json h;
    try {
        h = json::parse(header);
    } catch (const json::exception& e) {
        throw IoError("bad v3d header in " + path + ": " + e.what());
    }

    Volume v;
    try {
        auto shape = h.at("shape").get<std::vector<int64_t>>();
        auto spacing = h.at("spacing").get<std::vector<double>>();
        if (shape.size() != 3 || spacing.size() != 3)
            throw IoError("v3d shape/spacing must have 3 entries: " + path);
        for (int i = 0; i < 3; ++i) {
            v.shape[i] = static_cast<int>(shape[i]);
            v.spacing[i] = spacing[i];
        }
        v.kind = kind_from_name(h.at("kind").get<std::string>());
        std::string dtype = h.at("dtype").get<std::string>();

        int64_t n = v.numel();
        if (n <= 0) throw IoError("v3d header declares empty volume: " + path);
        v.data.resize(static_cast<size_t>(n));

        auto payload_start = f.tellg();
        f.seekg(0, std::ios::end);
        int64_t payload_bytes = static_cast<int64_t>(f.tellg() - payload_start);
        f.seekg(payload_start);

        if (dtype == "f32") {
            if (payload_bytes != n * 4)
                throw IoError("payload size mismatch in " + path + ": expected " +
                              std::to_string(n * 4) + " bytes, found " +
                              std::to_string(payload_bytes));
            f.read(reinterpret_cast<char*>(v.data.data()), n * 4);
        } else if (dtype == "u8") {
            if (payload_bytes != n)
                throw IoError("payload size mismatch in " + path + ": expected " +
                              std::to_string(n) + " bytes, found " + std::to_string(payload_bytes));
            std::vector<uint8_t> raw(static_cast<size_t>(n));
            f.read(reinterpret_cast<char*>(raw.data()), n);
            for (int64_t i = 0; i < n; ++i) v.data[static_cast<size_t>(i)] = raw[static_cast<size_t>(i)];
        } else {
            throw IoError("unknown dtype \"" + dtype + "\" in " + path);
        }
        if (!f) throw IoError("short read on " + path);
    } catch (const json::exception& e) {
        throw IoError("bad v3d header in " + path + ": " + e.what());
    }
    v.validate();
    return v;
}

void save_volume(const Volume& v, const std::string& path) {
    v.validate();
    const bool as_u8 = v.kind == VolKind::label;
    if (as_u8) {
        for (float x : v.data) {
            if (x < 0.0f || x > 255.0f || x != std::floor(x))
                throw IoError("label volume values must be integers in [0,255]");
        }
    }

    json h;
    h["shape"] = {v.shape[0], v.shape[1], v.shape[2]};
    h["spacing"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
    h["dtype"] = as_u8 ? "u8" : "f32";
    h["kind"] = kind_name(v.kind);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << h.dump() << '\n';
    if (as_u8) {
        std::vector<uint8_t> raw(v.data.size());
        for (size_t i = 0; i < v.data.size(); ++i) raw[i] = static_cast<uint8_t>(v.data[i]);
        f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    } else {
        f.write(reinterpret_cast<const char*>(v.data.data()),
                static_cast<std::streamsize>(v.data.size() * 4));
    }
    if (!f) throw IoError("write failed: " + path);
}

namespace {

inline double clampd(double v, double lo, double hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Trilinear sample at continuous (z,y,x) source coordinates, clamped to
// the valid range.
float sample_trilinear(const Volume& v, double z, double y, double x) {
    z = clampd(z, 0.0, v.shape[0] - 1.0);
    y = clampd(y, 0.0, v.shape[1] - 1.0);
    x = clampd(x, 0.0, v.shape[2] - 1.0);
    int z0 = static_cast<int>(std::floor(z)), y0 = static_cast<int>(std::floor(y)),
        x0 = static_cast<int>(std::floor(x));
    int z1 = std::min(z0 + 1, v.shape[0] - 1), y1 = std::min(y0 + 1, v.shape[1] - 1),
        x1 = std::min(x0 + 1, v.shape[2] - 1);
    double fz = z - z0, fy = y - y0, fx = x - x0;
    double c00 = v.at(z0, y0, x0) * (1 - fx) + v.at(z0, y0, x1) * fx;
    double c01 = v.at(z0, y1, x0) * (1 - fx) + v.at(z0, y1, x1) * fx;
    double c10 = v.at(z1, y0, x0) * (1 - fx) + v.at(z1, y0, x1) * fx;
    double c11 = v.at(z1, y1, x0) * (1 - fx) + v.at(z1, y1, x1) * fx;
    double c0 = c00 * (1 - fy) + c01 * fy;
    double c1 = c10 * (1 - fy) + c11 * fy;
    return static_cast<float>(c0 * (1 - fz) + c1 * fz);
}

float sample_nearest(const Volume& v, double z, double y, double x) {
    int zi = static_cast<int>(std::lround(clampd(z, 0.0, v.shape[0] - 1.0)));
    int yi = static_cast<int>(std::lround(clampd(y, 0.0, v.shape[1] - 1.0)));
    int xi = static_cast<int>(std::lround(clampd(x, 0.0, v.shape[2] - 1.0)));
    return v.at(zi, yi, xi);
}

}  // namespace

Volume resample(const Volume& v, const std::array<double, 3>& target_spacing) {
    for (double s : target_spacing)
        if (!(s > 0.0)) throw ConfigError("target spacing must be positive");

    std::array<int, 3> out_shape;
    std::array<double, 3> scale;  // target voxels -> source voxels
    for (int i = 0; i < 3; ++i) {
        out_shape[i] =
            static_cast<int>(std::lround(v.shape[i] * v.spacing[i] / target_spacing[i]));
        if (out_shape[i] <= 0)
            throw ConfigError("resample would produce an empty axis");
        scale[i] = target_spacing[i] / v.spacing[i];
    }

    Volume out = Volume::make(out_shape, target_spacing, v.kind);
    const bool nearest = v.kind == VolKind::label;
    for (int z = 0; z < out_shape[0]; ++z) {
        // voxel-center alignment between the two grids
        double sz = (z + 0.5) * scale[0] - 0.5;
        for (int y = 0; y < out_shape[1]; ++y) {
            double sy = (y + 0.5) * scale[1] - 0.5;
            for (int x = 0; x < out_shape[2]; ++x) {
                double sx = (x + 0.5) * scale[2] - 0.5;
                out.at(z, y, x) = nearest ? sample_nearest(v, sz, sy, sx)
                                          : sample_trilinear(v, sz, sy, sx);
            }
        }
    }
    return out;
}

Volume normalize_intensity(const Volume& v, double lo, double hi) {
    if (!(lo < hi)) throw ConfigError("normalize window requires lo < hi");
    Volume out = v;
    const double scale = 2.0 / (hi - lo);
    for (auto& x : out.data) {
        double c = clampd(x, lo, hi);
        x = static_cast<float>((c - lo) * scale - 1.0);
    }
    return out;
}

}  // namespace voxdiff
