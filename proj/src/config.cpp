#include "voxdiff/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "voxdiff/common.hpp"

namespace voxdiff {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

RawConfig parse_raw_config(const std::string& text) {
    RawConfig raw;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
            raw.sections[section];
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (raw.sections[section].count(key))
            throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" +
                              key + "'");
        raw.sections[section][key] = value;
    }
    return raw;
}

RawConfig read_raw_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingArtifactError("config file not found: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return parse_raw_config(os.str());
}

namespace {

// Tracks which keys a section consumed so leftovers can be rejected.
class SectionReader {
public:
    SectionReader(const RawConfig& raw, const std::string& name) : name_(name) {
        auto it = raw.sections.find(name);
        if (it != raw.sections.end()) kv_ = &it->second;
    }

    std::string qualify(const std::string& key) const {
        return name_.empty() ? key : name_ + "." + key;
    }

    const std::string* find(const std::string& key) {
        used_.insert(key);
        if (!kv_) return nullptr;
        auto it = kv_->find(key);
        return it == kv_->end() ? nullptr : &it->second;
    }

    void str(const std::string& key, std::string& out) {
        if (const auto* v = find(key)) out = *v;
    }

    void integer(const std::string& key, int& out) {
        if (const auto* v = find(key)) {
            try {
                size_t pos = 0;
                const long n = std::stol(*v, &pos);
                if (pos != v->size()) throw std::invalid_argument("");
                out = int(n);
            } catch (const std::exception&) {
                throw ConfigError("config key " + qualify(key) + ": expected an integer, got '" +
                                  *v + "'");
            }
        }
    }

    void u64(const std::string& key, uint64_t& out) {
        if (const auto* v = find(key)) {
            try {
                size_t pos = 0;
                out = std::stoull(*v, &pos);
                if (pos != v->size()) throw std::invalid_argument("");
            } catch (const std::exception&) {
                throw ConfigError("config key " + qualify(key) + ": expected an integer, got '" +
                                  *v + "'");
            }
        }
    }

    void real(const std::string& key, double& out) {
        if (const auto* v = find(key)) {
            try {
                size_t pos = 0;
                out = std::stod(*v, &pos);
                if (pos != v->size()) throw std::invalid_argument("");
            } catch (const std::exception&) {
                throw ConfigError("config key " + qualify(key) + ": expected a number, got '" +
                                  *v + "'");
            }
        }
    }

    void boolean(const std::string& key, bool& out) {
        if (const auto* v = find(key)) {
            std::string s = *v;
            std::transform(s.begin(), s.end(), s.begin(), ::tolower);
            if (s == "true" || s == "yes" || s == "1")
                out = true;
            else if (s == "false" || s == "no" || s == "0")
                out = false;
            else
                throw ConfigError("config key " + qualify(key) + ": expected true/false, got '" +
                                  *v + "'");
        }
    }

    void int_list(const std::string& key, std::vector<int>& out) {
        if (const auto* v = find(key)) {
            std::vector<int> parsed;
            std::istringstream is(*v);
            std::string item;
            while (std::getline(is, item, ',')) {
                try {
                    size_t pos = 0;
                    item = trim(item);
                    parsed.push_back(int(std::stol(item, &pos)));
                    if (pos != item.size()) throw std::invalid_argument("");
                } catch (const std::exception&) {
                    throw ConfigError("config key " + qualify(key) +
                                      ": expected a comma-separated integer list, got '" + *v +
                                      "'");
                }
            }
            if (parsed.empty())
                throw ConfigError("config key " + qualify(key) + ": empty list");
            out = parsed;
        }
    }

    void int3(const std::string& key, std::array<int, 3>& out) {
        std::vector<int> items(out.begin(), out.end());
        int_list(key, items);
        if (items.size() != 3)
            throw ConfigError("config key " + qualify(key) + ": expected exactly 3 integers");
        std::copy(items.begin(), items.end(), out.begin());
    }

    void reject_unknown(const RawConfig& raw) const {
        auto it = raw.sections.find(name_);
        if (it == raw.sections.end()) return;
        for (const auto& [key, value] : it->second)
            if (!used_.count(key))
                throw ConfigError("unknown config key: " + qualify(key));
    }

private:
    std::string name_;
    const std::map<std::string, std::string>* kv_ = nullptr;
    std::set<std::string> used_;
};

}  // namespace

ExperimentConfig experiment_config_from_raw(const RawConfig& raw) {
    static const std::set<std::string> known_sections = {"",      "synth",   "bpr",  "pretrain",
                                                         "extract", "probe", "ablate"};
    for (const auto& [name, kv] : raw.sections)
        if (!known_sections.count(name))
            throw ConfigError("unknown config section: [" + name + "]");

    ExperimentConfig cfg;
    SectionReader top(raw, "");
    top.u64("seed", cfg.seed);
    top.str("out_dir", cfg.out_dir);
    top.reject_unknown(raw);

    SectionReader synth(raw, "synth");
    synth.integer("count", cfg.synth.count);
    synth.str("distribution", cfg.synth.distribution);
    synth.reject_unknown(raw);
    if (cfg.synth.distribution != "A" && cfg.synth.distribution != "B")
        throw ConfigError("config key synth.distribution: expected A or B");
    if (cfg.synth.count < 0) throw ConfigError("config key synth.count: must be non-negative");

    SectionReader bpr(raw, "bpr");
    bpr.integer("steps", cfg.bpr.steps);
    bpr.real("learning_rate", cfg.bpr.learning_rate);
    bpr.integer("slices", cfg.bpr.slices);
    bpr.integer("gap_min", cfg.bpr.gap_min);
    bpr.integer("gap_max", cfg.bpr.gap_max);
    bpr.reject_unknown(raw);

    SectionReader pre(raw, "pretrain");
    pre.integer("epochs", cfg.pretrain.epochs);
    pre.real("learning_rate", cfg.pretrain.learning_rate);
    pre.integer("batch_size", cfg.pretrain.batch_size);
    pre.integer("timesteps", cfg.pretrain.timesteps);
    pre.int3("patch", cfg.pretrain.patch);
    pre.integer("base_width", cfg.pretrain.base_width);
    pre.integer("levels", cfg.pretrain.levels);
    pre.boolean("conditioned", cfg.pretrain.conditioned);
    pre.integer("checkpoint_every", cfg.pretrain.checkpoint_every);
    pre.reject_unknown(raw);

    SectionReader ext(raw, "extract");
    ext.int_list("timesteps", cfg.extract.timesteps);
    ext.int_list("levels", cfg.extract.levels);
    ext.real("overlap", cfg.extract.overlap);
    ext.integer("noise_samples", cfg.extract.noise_samples);
    ext.reject_unknown(raw);

    SectionReader probe(raw, "probe");
    probe.integer("hidden", cfg.probe.hidden);
    probe.integer("epochs", cfg.probe.epochs);
    probe.real("learning_rate", cfg.probe.learning_rate);
    probe.integer("train_count", cfg.probe.train_count);
    probe.integer("test_count", cfg.probe.test_count);
    probe.str("label", cfg.probe.label);
    probe.reject_unknown(raw);

    SectionReader abl(raw, "ablate");
    abl.int_list("timesteps", cfg.ablate.timesteps);
    abl.reject_unknown(raw);

    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path,
                                        const std::vector<std::string>& overrides) {
    RawConfig raw = path.empty() ? RawConfig{} : read_raw_config(path);
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + ov + "': expected section.key=value");
        std::string key = trim(ov.substr(0, eq));
        const std::string value = trim(ov.substr(eq + 1));
        std::string section;
        const auto dot = key.find('.');
        if (dot != std::string::npos) {
            section = key.substr(0, dot);
            key = key.substr(dot + 1);
        }
        if (key.empty()) throw ConfigError("override '" + ov + "': empty key");
        raw.sections[section][key] = value;
    }
    return experiment_config_from_raw(raw);
}

nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    j["synth"] = {{"count", cfg.synth.count}, {"distribution", cfg.synth.distribution}};
    j["bpr"] = {{"steps", cfg.bpr.steps},
                {"learning_rate", cfg.bpr.learning_rate},
                {"slices", cfg.bpr.slices},
                {"gap_min", cfg.bpr.gap_min},
                {"gap_max", cfg.bpr.gap_max}};
    j["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                     {"learning_rate", cfg.pretrain.learning_rate},
                     {"batch_size", cfg.pretrain.batch_size},
                     {"timesteps", cfg.pretrain.timesteps},
                     {"patch", cfg.pretrain.patch},
                     {"base_width", cfg.pretrain.base_width},
                     {"levels", cfg.pretrain.levels},
                     {"conditioned", cfg.pretrain.conditioned},
                     {"checkpoint_every", cfg.pretrain.checkpoint_every}};
    j["extract"] = {{"timesteps", cfg.extract.timesteps},
                    {"levels", cfg.extract.levels},
                    {"overlap", cfg.extract.overlap},
                    {"noise_samples", cfg.extract.noise_samples}};
    j["probe"] = {{"hidden", cfg.probe.hidden},
                  {"epochs", cfg.probe.epochs},
                  {"learning_rate", cfg.probe.learning_rate},
                  {"train_count", cfg.probe.train_count},
                  {"test_count", cfg.probe.test_count},
                  {"label", cfg.probe.label}};
    j["ablate"] = {{"timesteps", cfg.ablate.timesteps}};
    return j;
}

}  // namespace voxdiff
