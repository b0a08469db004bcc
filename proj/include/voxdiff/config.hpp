#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace voxdiff {

// Raw sectioned key=value file. '#' and ';' start comments, section headers
// are [name], keys outside any section land in the "" section.
struct RawConfig {
    std::map<std::string, std::map<std::string, std::string>> sections;
};

RawConfig parse_raw_config(const std::string& text);
RawConfig read_raw_config(const std::string& path);

struct SynthSection {
    int count = 8;
    std::string distribution = "A";
};

struct BprSection {
    int steps = 400;
    double learning_rate = 1e-3;
    int slices = 8;
    int gap_min = 2, gap_max = 4;
};

struct PretrainSection {
    int epochs = 10;
    double learning_rate = 1e-4;
    int batch_size = 1;
    int timesteps = 100;
    std::array<int, 3> patch{32, 32, 16};  // height, width, depth
    int base_width = 16;
    int levels = 3;
    bool conditioned = false;
    int checkpoint_every = 0;
};

struct ExtractSection {
    std::vector<int> timesteps{1, 3, 6};
    std::vector<int> levels{0, 1, 2};
    double overlap = 0.5;
    int noise_samples = 1;
};

struct ProbeSection {
    int hidden = 64;
    int epochs = 6;
    double learning_rate = 1e-3;
    int train_count = 12;  // train-corpus volumes used (0 = all)
    int test_count = 0;    // test-corpus volumes used (0 = all)
    std::string label = "probe";
};

struct AblateSection {
    std::vector<int> timesteps{1, 10, 30, 60};
};

struct ExperimentConfig {
    uint64_t seed = 1;
    std::string out_dir = "out";
    SynthSection synth;
    BprSection bpr;
    PretrainSection pretrain;
    ExtractSection extract;
    ProbeSection probe;
    AblateSection ablate;
};

// Typed load with strict key checking: any key or section the schema does
// not know is a ConfigError. `overrides` are "section.key=value" strings
// (empty section prefix for the global keys) applied on top of the file.
ExperimentConfig experiment_config_from_raw(const RawConfig& raw);
ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides = {});

nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg);

}  // namespace voxdiff
