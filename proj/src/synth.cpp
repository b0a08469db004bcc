#include "voxdiff/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "voxdiff/common.hpp"
#include "voxdiff/rng.hpp"

namespace voxdiff {

namespace {

OrganSpec organ(int id, const char* name, const char* size_class, const char* column,
                std::array<double, 3> radii, double z_mean, double z_jitter, double y_mean,
                double x_mean, double xy_jitter, double intensity) {
    OrganSpec o;
    o.id = id;
    o.name = name;
    o.size_class = size_class;
    o.column = column;
    o.radii = radii;
    o.z_mean = z_mean;
    o.z_jitter = z_jitter;
    o.y_mean = y_mean;
    o.x_mean = x_mean;
    o.xy_jitter = xy_jitter;
    o.intensity = intensity;
    return o;
}

double expected_volume(const OrganSpec& o, const std::array<int, 3>& shape) {
    return o.radii[0] * shape[0] * o.radii[1] * shape[1] * o.radii[2] * shape[2];
}

}  // namespace

PhantomConfig PhantomConfig::defaults() {
    PhantomConfig c;
    c.organs = {
        organ(1, "core", "Big", "core", {0.125, 0.25, 0.25}, 0.48, 0.04, 0.50, 0.50, 0.02, 0.55),
        organ(2, "lobe_l", "Medium", "lobes", {0.085, 0.125, 0.125}, 0.50, 0.05, 0.50, 0.24,
              0.02, 0.15),
        organ(5, "lobe_r", "Medium", "lobes", {0.085, 0.125, 0.125}, 0.50, 0.05, 0.50, 0.76,
              0.02, 0.15),
        organ(3, "nodule_hi", "Small", "nodule_hi", {0.055, 0.095, 0.095}, 0.22, 0.04, 0.40,
              0.50, 0.02, -0.35),
        organ(4, "nodule_lo", "Small", "nodule_lo", {0.055, 0.095, 0.095}, 0.78, 0.04, 0.40,
              0.50, 0.02, -0.35),
        organ(6, "pellet", "Small", "pellet", {0.045, 0.082, 0.082}, 0.50, 0.22, 0.66, 0.50,
              0.03, 0.60),
    };
    return c;
}

PhantomConfig PhantomConfig::shifted_b() {
    PhantomConfig c = defaults();
    c.distribution = "B";
    c.noise_scale = 1.5;
    c.size_scale = 0.92;
    return c;
}

void PhantomConfig::validate() const {
    if (shape[0] < 8 || shape[1] < 8 || shape[2] < 8)
        throw ConfigError("phantom volume must be at least 8 voxels per axis");
    if (organs.empty()) throw ConfigError("phantom catalog is empty");
    if (texture_std < 0 || background_std < 0 || noise_scale <= 0 || size_scale <= 0)
        throw ConfigError("phantom noise and scale parameters must be positive");
    std::set<int> ids;
    std::map<std::string, std::pair<double, double>> cls;  // size class -> (min, max) volume
    for (const auto& o : organs) {
        if (o.id <= 0) throw ConfigError("organ ids must be positive (0 is background)");
        if (!ids.insert(o.id).second)
            throw ConfigError("duplicate organ id " + std::to_string(o.id));
        if (o.name.empty() || o.column.empty()) throw ConfigError("organ needs a name and column");
        if (o.size_class != "Big" && o.size_class != "Medium" && o.size_class != "Small")
            throw ConfigError("organ size class must be Big, Medium or Small");
        const double v = expected_volume(o, shape);
        auto it = cls.find(o.size_class);
        if (it == cls.end())
            cls[o.size_class] = {v, v};
        else {
            it->second.first = std::min(it->second.first, v);
            it->second.second = std::max(it->second.second, v);
        }
    }
    auto bounds = [&](const char* name) { return cls.count(name) ? cls[name] : std::pair<double, double>{0, 0}; };
    const auto big = bounds("Big"), med = bounds("Medium"), sml = bounds("Small");
    if (cls.count("Big") && cls.count("Medium") && big.first <= med.second)
        throw ConfigError("Big organs must be larger than Medium organs");
    if (cls.count("Medium") && cls.count("Small") && med.first <= sml.second)
        throw ConfigError("Medium organs must be larger than Small organs");
}

nlohmann::json phantom_config_to_json(const PhantomConfig& c) {
    nlohmann::json j;
    j["shape"] = c.shape;
    j["spacing"] = c.spacing;
    j["torso_intensity"] = c.torso_intensity;
    j["torso_gradient"] = c.torso_gradient;
    j["texture_std"] = c.texture_std;
    j["background_std"] = c.background_std;
    j["torso_radius_jitter"] = c.torso_radius_jitter;
    j["noise_scale"] = c.noise_scale;
    j["size_scale"] = c.size_scale;
    j["distribution"] = c.distribution;
    nlohmann::json organs = nlohmann::json::array();
    for (const auto& o : c.organs) {
        nlohmann::json oj;
        oj["id"] = o.id;
        oj["name"] = o.name;
        oj["size_class"] = o.size_class;
        oj["column"] = o.column;
        oj["radii"] = o.radii;
        oj["z_mean"] = o.z_mean;
        oj["z_jitter"] = o.z_jitter;
        oj["y_mean"] = o.y_mean;
        oj["x_mean"] = o.x_mean;
        oj["xy_jitter"] = o.xy_jitter;
        oj["intensity"] = o.intensity;
        organs.push_back(oj);
    }
    j["organs"] = organs;
    return j;
}

PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
    PhantomConfig c;
    try {
        j.at("shape").get_to(c.shape);
        j.at("spacing").get_to(c.spacing);
        c.torso_intensity = j.at("torso_intensity").get<double>();
        c.torso_gradient = j.at("torso_gradient").get<double>();
        c.texture_std = j.at("texture_std").get<double>();
        c.background_std = j.at("background_std").get<double>();
        c.torso_radius_jitter = j.at("torso_radius_jitter").get<double>();
        c.noise_scale = j.at("noise_scale").get<double>();
        c.size_scale = j.at("size_scale").get<double>();
        c.distribution = j.at("distribution").get<std::string>();
        for (const auto& oj : j.at("organs")) {
            OrganSpec o;
            o.id = oj.at("id").get<int>();
            o.name = oj.at("name").get<std::string>();
            o.size_class = oj.at("size_class").get<std::string>();
            o.column = oj.at("column").get<std::string>();
            oj.at("radii").get_to(o.radii);
            o.z_mean = oj.at("z_mean").get<double>();
            o.z_jitter = oj.at("z_jitter").get<double>();
            o.y_mean = oj.at("y_mean").get<double>();
            o.x_mean = oj.at("x_mean").get<double>();
            o.xy_jitter = oj.at("xy_jitter").get<double>();
            o.intensity = oj.at("intensity").get<double>();
            c.organs.push_back(o);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad phantom config: ") + e.what());
    }
    c.validate();
    return c;
}

Phantom generate_phantom(uint64_t seed, const PhantomConfig& config) {
    config.validate();
    const auto& sp = config.shape;
    const int Z = sp[0], Y = sp[1], X = sp[2];
    Rng rng(seed);

    // Per-phantom body width jitter. The taper along z stays monotone (the
    // slice scorer needs an orderable shape cue) but the absolute radius is
    // ambiguous across phantoms, so a local patch cannot pin down its axial
    // position from the silhouette alone.
    const double torso_u = (2.0 * rng.uniform() - 1.0) * config.torso_radius_jitter;

    std::vector<PlacedOrgan> placed;
    std::vector<double> fill;
    for (const auto& o : config.organs) {
        const double zf = o.z_mean + o.z_jitter * (2.0 * rng.uniform() - 1.0);
        const double yf = o.y_mean + o.xy_jitter * (2.0 * rng.uniform() - 1.0);
        const double xf = o.x_mean + o.xy_jitter * (2.0 * rng.uniform() - 1.0);
        PlacedOrgan p;
        p.id = o.id;
        p.center = {zf * Z - 0.5, yf * Y - 0.5, xf * X - 0.5};
        p.radii = {o.radii[0] * Z * config.size_scale, o.radii[1] * Y * config.size_scale,
                   o.radii[2] * X * config.size_scale};
        for (int a = 0; a < 3; ++a) {
            if (p.center[a] - p.radii[a] < -0.5 || p.center[a] + p.radii[a] > sp[a] - 0.5)
                throw ConfigError("organ '" + o.name + "' does not fit inside the volume");
        }
        placed.push_back(p);
        fill.push_back(o.intensity);
    }

    Phantom ph;
    ph.image = Volume::make(sp, config.spacing, VolKind::image);
    ph.labels = Volume::make(sp, config.spacing, VolKind::label);
    ph.body_coord = Volume::make(sp, config.spacing, VolKind::coord);

    const double cy = (Y - 1) / 2.0, cx = (X - 1) / 2.0;
    size_t i = 0;
    for (int z = 0; z < Z; ++z) {
        const double zf = (z + 0.5) / Z;
        const double bc = 2.0 * zf - 1.0;
        const double ry = (0.40 - 0.05 * zf + torso_u) * Y;
        const double rx = (0.44 - 0.05 * zf + torso_u) * X;
        for (int y = 0; y < Y; ++y) {
            for (int x = 0; x < X; ++x, ++i) {
                const double ey = (y - cy) / ry, ex = (x - cx) / rx;
                const bool in_torso = ey * ey + ex * ex <= 1.0;
                int label = 0;
                double base = in_torso ? config.torso_intensity : -0.9;
                for (size_t pi = 0; pi < placed.size(); ++pi) {
                    const auto& p = placed[pi];
                    const double dz = (z - p.center[0]) / p.radii[0];
                    const double dy = (y - p.center[1]) / p.radii[1];
                    const double dx = (x - p.center[2]) / p.radii[2];
                    if (dz * dz + dy * dy + dx * dx <= 1.0) {
                        label = p.id;
                        base = fill[pi];
                    }
                }
                // the axial gradient rides on every body voxel, organs included:
                // local organ/surroundings contrast stays constant along z, so
                // absolute position is readable from slice statistics (the slice
                // scorer pools them) but not from a normalized local patch
                if (in_torso || label) base += config.torso_gradient * zf;
                const double std = (in_torso || label) ? config.texture_std : config.background_std;
                const double v = base + std * config.noise_scale * rng.normal();
                ph.image.data[i] = float(std::clamp(v, -1.0, 1.0));
                ph.labels.data[i] = float(label);
                ph.body_coord.data[i] = float(bc);
            }
        }
    }
    ph.placed = std::move(placed);
    return ph;
}

CorpusManifest generate_corpus(int n, uint64_t seed, const PhantomConfig& config) {
    if (n < 0) throw ConfigError("corpus size must be non-negative");
    config.validate();
    CorpusManifest m;
    m.seed = seed;
    m.config = config;
    for (int i = 0; i < n; ++i) {
        CorpusItem it;
        it.index = i;
        it.seed = derive_seed(seed, uint64_t(i));
        char buf[48];
        std::snprintf(buf, sizeof(buf), "phantom_%03d", i);
        it.image = std::string(buf) + ".img.v3d";
        it.labels = std::string(buf) + ".lab.v3d";
        it.coord = std::string(buf) + ".coord.v3d";
        m.items.push_back(it);
    }
    return m;
}

void write_corpus(const CorpusManifest& m, const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["format"] = "voxdiff.corpus.v1";
    j["seed"] = m.seed;
    j["config"] = phantom_config_to_json(m.config);
    nlohmann::json items = nlohmann::json::array();
    for (const auto& it : m.items) {
        items.push_back({{"index", it.index},
                         {"seed", it.seed},
                         {"image", it.image},
                         {"labels", it.labels},
                         {"coord", it.coord}});
        Phantom ph = generate_phantom(it.seed, m.config);
        save_volume(ph.image, dir + "/" + it.image);
        save_volume(ph.labels, dir + "/" + it.labels);
        save_volume(ph.body_coord, dir + "/" + it.coord);
    }
    j["items"] = items;
    std::ofstream f(dir + "/manifest.json", std::ios::binary);
    if (!f) throw IoError("cannot write " + dir + "/manifest.json");
    f << j.dump(2) << '\n';
}

CorpusManifest load_corpus_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingArtifactError("corpus manifest not found: " + path);
    nlohmann::json j;
    try {
        f >> j;
        if (j.at("format").get<std::string>() != "voxdiff.corpus.v1")
            throw ConfigError("not a corpus manifest: " + path);
        CorpusManifest m;
        m.seed = j.at("seed").get<uint64_t>();
        m.config = phantom_config_from_json(j.at("config"));
        for (const auto& ij : j.at("items")) {
            CorpusItem it;
            it.index = ij.at("index").get<int>();
            it.seed = ij.at("seed").get<uint64_t>();
            it.image = ij.at("image").get<std::string>();
            it.labels = ij.at("labels").get<std::string>();
            it.coord = ij.at("coord").get<std::string>();
            m.items.push_back(it);
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad corpus manifest " + path + ": " + e.what());
    }
}

namespace {

std::vector<Volume> load_referenced(const std::string& manifest_path, bool labels) {
    CorpusManifest m = load_corpus_manifest(manifest_path);
    const std::string dir = std::filesystem::path(manifest_path).parent_path().string();
    std::vector<Volume> out;
    out.reserve(m.items.size());
    for (const auto& it : m.items)
        out.push_back(load_volume(dir + "/" + (labels ? it.labels : it.image)));
    return out;
}

}  // namespace

std::vector<Volume> load_corpus_images(const std::string& manifest_path) {
    return load_referenced(manifest_path, false);
}

std::vector<Volume> load_corpus_labels(const std::string& manifest_path) {
    return load_referenced(manifest_path, true);
}

}  // namespace voxdiff
