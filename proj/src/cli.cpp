#include "voxdiff/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "voxdiff/common.hpp"
#include "voxdiff/features.hpp"
#include "voxdiff/pretrain.hpp"

namespace fs = std::filesystem;

namespace voxdiff {

namespace {

// fixed per-stage seed streams derived from the global experiment seed
enum Stage : uint64_t { kSynth = 1, kBpr = 2, kDdpm = 3, kExtract = 4, kProbe = 5 };

PhantomConfig phantom_config_for(const ExperimentConfig& cfg) {
    return cfg.synth.distribution == "B" ? PhantomConfig::shifted_b() : PhantomConfig::defaults();
}

void write_snapshot(const std::string& dir, const std::string& command,
                    const ExperimentConfig& cfg, const nlohmann::json& inputs) {
    fs::create_directories(dir);
    nlohmann::json j;
    j["command"] = command;
    j["config"] = experiment_config_to_json(cfg);
    j["inputs"] = inputs;
    std::ofstream f(fs::path(dir) / "config.resolved.json", std::ios::binary);
    if (!f) throw IoError("cannot write resolved config snapshot in " + dir);
    f << j.dump(2) << '\n';
}

std::optional<BprModel> load_bpr_opt(const std::string& path) {
    if (path.empty()) return std::nullopt;
    return load_bpr(resolve_out(path));
}

PretrainConfig pretrain_config_of(const ExperimentConfig& cfg) {
    PretrainConfig pc;
    pc.patch_hwd = cfg.pretrain.patch;
    pc.epochs = cfg.pretrain.epochs;
    pc.learning_rate = cfg.pretrain.learning_rate;
    pc.batch_size = cfg.pretrain.batch_size;
    pc.T = cfg.pretrain.timesteps;
    pc.conditioned = cfg.pretrain.conditioned;
    pc.seed = derive_seed(cfg.seed, kDdpm);
    pc.checkpoint_every = cfg.pretrain.checkpoint_every;
    pc.model.base_width = cfg.pretrain.base_width;
    pc.model.levels = cfg.pretrain.levels;
    pc.model.channel_mult.clear();
    for (int l = 0; l < cfg.pretrain.levels; ++l)
        pc.model.channel_mult.push_back(1 << std::min(l, 2));
    return pc;
}

ExtractOptions extract_options_of(const ExperimentConfig& cfg) {
    ExtractOptions opt;
    opt.timesteps = cfg.extract.timesteps;
    opt.levels = cfg.extract.levels;
    opt.overlap = cfg.extract.overlap;
    opt.noise_samples = cfg.extract.noise_samples;
    opt.seed = derive_seed(cfg.seed, kExtract);
    return opt;
}

ProbeConfig probe_config_of(const ExperimentConfig& cfg, int classes) {
    ProbeConfig pc;
    pc.hidden = cfg.probe.hidden;
    pc.classes = classes;
    pc.epochs = cfg.probe.epochs;
    pc.learning_rate = cfg.probe.learning_rate;
    pc.seed = derive_seed(cfg.seed, kProbe);
    return pc;
}

// first `cap` items of a corpus (0 = all)
void load_capped(const std::string& manifest, int cap, std::vector<Volume>& images,
                 std::vector<Volume>& labels) {
    images = load_corpus_images(manifest);
    labels = load_corpus_labels(manifest);
    if (cap > 0 && size_t(cap) < images.size()) {
        images.resize(size_t(cap));
        labels.resize(size_t(cap));
    }
}

}  // namespace

std::vector<ClassInfo> class_catalog(const PhantomConfig& c) {
    std::vector<ClassInfo> out;
    for (const auto& o : c.organs) out.push_back({o.id, o.name, o.size_class, o.column});
    return out;
}

int class_count(const PhantomConfig& c) {
    int mx = 0;
    for (const auto& o : c.organs) mx = std::max(mx, o.id);
    return mx + 1;
}

std::string resolve_out(const std::string& path) {
    const char* root = std::getenv("VOXDIFF_OUT_ROOT");
    if (!root || !*root || path.empty() || fs::path(path).is_absolute()) return path;
    return (fs::path(root) / path).string();
}

void cmd_synth(const ExperimentConfig& cfg, const std::string& out_dir) {
    const std::string out = resolve_out(out_dir);
    const PhantomConfig pc = phantom_config_for(cfg);
    CorpusManifest m = generate_corpus(cfg.synth.count, derive_seed(cfg.seed, kSynth), pc);
    write_corpus(m, out);
    write_snapshot(out, "synth", cfg, nlohmann::json::object());
}

void cmd_train_bpr(const ExperimentConfig& cfg, const std::string& corpus,
                   const std::string& out_dir) {
    const std::string out = resolve_out(out_dir);
    std::vector<Volume> images = load_corpus_images(resolve_out(corpus));
    BprConfig bc;
    bc.steps = cfg.bpr.steps;
    bc.learning_rate = cfg.bpr.learning_rate;
    bc.slices_per_sample = cfg.bpr.slices;
    bc.gap_min = cfg.bpr.gap_min;
    bc.gap_max = cfg.bpr.gap_max;
    bc.seed = derive_seed(cfg.seed, kBpr);
    BprModel model = train_bpr(images, bc);
    fs::create_directories(out);
    save_bpr(model, (fs::path(out) / "bpr.ckpt").string());
    write_snapshot(out, "train-bpr", cfg, {{"corpus", corpus}});
}

void cmd_train_ddpm(const ExperimentConfig& cfg, const std::string& corpus,
                    const std::string& bpr_path, const std::string& out_dir, bool do_resume,
                    bool init_only) {
    const std::string out = resolve_out(out_dir);
    PretrainConfig pc = pretrain_config_of(cfg);
    if (init_only) {
        init_ddpm(pc, out);
        write_snapshot(out, "train-ddpm", cfg, {{"init_only", true}});
        return;
    }
    if (pc.conditioned && bpr_path.empty())
        throw ConfigError("pretrain.conditioned is set but no --bpr checkpoint was given");
    std::vector<Volume> images = load_corpus_images(resolve_out(corpus));
    std::optional<BprModel> bpr = load_bpr_opt(bpr_path);
    BprModel* bp = bpr ? &*bpr : nullptr;
    if (do_resume)
        resume((fs::path(out) / "ddpm.ckpt").string(), images, bp, out);
    else
        train_ddpm(images, pc, bp, out);
    write_snapshot(out, "train-ddpm", cfg,
                   {{"corpus", corpus}, {"bpr", bpr_path}, {"resume", do_resume}});
}

void cmd_extract(const ExperimentConfig& cfg, const std::string& ckpt,
                 const std::string& volume_path, const std::string& bpr_path,
                 const std::string& out_path) {
    const std::string out = resolve_out(out_path);
    Volume v = load_volume(resolve_out(volume_path));
    std::optional<BprModel> bpr = load_bpr_opt(bpr_path);
    FeatureVolume f =
        extract_features(resolve_out(ckpt), v, extract_options_of(cfg), bpr ? &*bpr : nullptr);
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    save_features(f, out);
    nlohmann::json j;
    j["command"] = "extract";
    j["config"] = experiment_config_to_json(cfg);
    j["inputs"] = {{"ckpt", ckpt}, {"volume", volume_path}, {"bpr", bpr_path}};
    std::ofstream sf(out + ".config.json", std::ios::binary);
    if (!sf) throw IoError("cannot write resolved config snapshot next to " + out);
    sf << j.dump(2) << '\n';
}

namespace {

DiceReport evaluate_probe(ProbeHead& head, const std::string& ckpt,
                          const std::vector<Volume>& images, const std::vector<Volume>& labels,
                          const std::vector<ClassInfo>& classes, const ExtractOptions& opt,
                          BprModel* bpr) {
    std::map<int, double> dice_sum;
    for (size_t i = 0; i < images.size(); ++i) {
        FeatureVolume f = extract_features(ckpt, images[i], opt, bpr);
        Volume pred = segment(head, f);
        for (const auto& [cls, d] : per_class_dice(pred, labels[i], classes)) dice_sum[cls] += d;
    }
    for (auto& [cls, d] : dice_sum) d /= double(images.size());
    return group_report(dice_sum, grouping_of(classes));
}

}  // namespace

void cmd_probe(const ExperimentConfig& cfg, const std::string& ckpt,
               const std::string& train_corpus, const std::string& test_corpus,
               const std::string& bpr_path, const std::string& out_dir) {
    const std::string out = resolve_out(out_dir);
    const std::string ck = resolve_out(ckpt);
    CorpusManifest train_m = load_corpus_manifest(resolve_out(train_corpus));
    const auto classes = class_catalog(train_m.config);
    std::vector<Volume> train_images, train_labels, test_images, test_labels;
    load_capped(resolve_out(train_corpus), cfg.probe.train_count, train_images, train_labels);
    load_capped(resolve_out(test_corpus), cfg.probe.test_count, test_images, test_labels);
    if (test_images.empty()) throw ConfigError("test corpus is empty");

    std::optional<BprModel> bpr = load_bpr_opt(bpr_path);
    BprModel* bp = bpr ? &*bpr : nullptr;
    const ExtractOptions opt = extract_options_of(cfg);

    std::vector<FeatureVolume> feats;
    feats.reserve(train_images.size());
    for (const auto& v : train_images) feats.push_back(extract_features(ck, v, opt, bp));
    std::vector<const FeatureVolume*> fp;
    std::vector<const Volume*> lp;
    for (size_t i = 0; i < feats.size(); ++i) {
        fp.push_back(&feats[i]);
        lp.push_back(&train_labels[i]);
    }
    TrainedProbe probe = train_probe(fp, lp, probe_config_of(cfg, class_count(train_m.config)));
    feats.clear();

    DiceReport rep = evaluate_probe(probe.head, ck, test_images, test_labels, classes, opt, bp);
    fs::create_directories(out);
    std::vector<std::pair<std::string, DiceReport>> rows{{cfg.probe.label, rep}};
    write_report_csv((fs::path(out) / "report.csv").string(), classes, rows);
    write_report_markdown((fs::path(out) / "report.md").string(), classes, rows);
    write_snapshot(out, "probe", cfg,
                   {{"ckpt", ckpt},
                    {"train_corpus", train_corpus},
                    {"test_corpus", test_corpus},
                    {"bpr", bpr_path}});
}

void cmd_ablate(const ExperimentConfig& cfg, const std::string& ckpt,
                const std::string& train_corpus, const std::string& test_corpus,
                const std::string& bpr_path, const std::string& out_dir) {
    const std::string out = resolve_out(out_dir);
    CorpusManifest train_m = load_corpus_manifest(resolve_out(train_corpus));
    const auto classes = class_catalog(train_m.config);
    std::vector<Volume> train_images, train_labels, test_images, test_labels;
    load_capped(resolve_out(train_corpus), cfg.probe.train_count, train_images, train_labels);
    load_capped(resolve_out(test_corpus), cfg.probe.test_count, test_images, test_labels);
    if (test_images.empty()) throw ConfigError("test corpus is empty");

    std::optional<BprModel> bpr = load_bpr_opt(bpr_path);
    auto rows = ablate_timesteps(resolve_out(ckpt), train_images, train_labels, test_images,
                                 test_labels, classes, cfg.ablate.timesteps,
                                 probe_config_of(cfg, class_count(train_m.config)),
                                 extract_options_of(cfg), bpr ? &*bpr : nullptr);
    fs::create_directories(out);
    write_ablation_csv((fs::path(out) / "ablation.csv").string(), rows);
    write_snapshot(out, "ablate", cfg,
                   {{"ckpt", ckpt},
                    {"train_corpus", train_corpus},
                    {"test_corpus", test_corpus},
                    {"bpr", bpr_path}});
}

void cmd_eval(const std::vector<std::string>& report_csvs, const std::string& out_dir) {
    if (report_csvs.empty()) throw ConfigError("eval needs at least one --report");
    const std::string out = resolve_out(out_dir);
    std::string header;
    std::vector<std::string> rows;
    for (const auto& p : report_csvs) {
        std::ifstream f(resolve_out(p));
        if (!f) throw MissingArtifactError("report not found: " + p);
        std::string line;
        if (!std::getline(f, line)) throw IoError("empty report: " + p);
        if (header.empty())
            header = line;
        else if (header != line)
            throw ConfigError("report columns differ between " + report_csvs.front() + " and " +
                              p);
        while (std::getline(f, line))
            if (!line.empty()) rows.push_back(line);
    }
    fs::create_directories(out);
    {
        std::ofstream f(fs::path(out) / "eval.csv", std::ios::binary);
        if (!f) throw IoError("cannot write eval.csv in " + out);
        f << header << '\n';
        for (const auto& r : rows) f << r << '\n';
    }
    {
        std::ofstream f(fs::path(out) / "eval.md", std::ios::binary);
        if (!f) throw IoError("cannot write eval.md in " + out);
        auto cells = [](const std::string& line) {
            std::vector<std::string> out;
            std::istringstream is(line);
            std::string c;
            while (std::getline(is, c, ',')) out.push_back(c);
            return out;
        };
        const auto hc = cells(header);
        f << '|';
        for (const auto& c : hc) f << ' ' << c << " |";
        f << "\n|";
        for (size_t i = 0; i < hc.size(); ++i) f << "---|";
        f << '\n';
        for (const auto& r : rows) {
            f << '|';
            for (const auto& c : cells(r)) f << ' ' << c << " |";
            f << '\n';
        }
    }
    nlohmann::json j;
    j["command"] = "eval";
    j["inputs"] = {{"reports", report_csvs}};
    std::ofstream sf(fs::path(out) / "config.resolved.json", std::ios::binary);
    if (!sf) throw IoError("cannot write resolved config snapshot in " + out);
    sf << j.dump(2) << '\n';
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"voxdiff: diffusion pretraining of dense 3D features on synthetic phantom "
                 "volumes, with body-coordinate conditioning and frozen-feature probing"};
    app.require_subcommand(1);
    app.fallthrough();
    app.footer(
        "CSV outputs:\n"
        "  loss.csv       step,loss,wall_ms\n"
        "  report.csv     method,<organ columns>,Small,Medium,Big,Avg\n"
        "  ablation.csv   t,Small,Medium,Big,Avg\n"
        "Environment:\n"
        "  VOXDIFF_OUT_ROOT   prefix prepended to relative output paths");

    std::string config_path;
    std::vector<std::string> sets;
    app.add_option("--config", config_path, "experiment config file (sectioned key=value)");
    app.add_option("--set", sets, "override a config key, e.g. --set pretrain.epochs=3");
    auto* seed_opt = app.add_option_function<std::string>(
        "--seed", [&sets](const std::string& v) { sets.push_back("seed=" + v); },
        "override the global seed");
    (void)seed_opt;

    std::string out, corpus, bpr_path, ckpt, volume_path, train_corpus, test_corpus;
    std::vector<std::string> reports;
    bool do_resume = false, init_only = false;

    auto* synth = app.add_subcommand("synth", "generate a phantom corpus");
    synth->add_option("--out", out, "output directory")->required();

    auto* tbpr = app.add_subcommand("train-bpr", "train the axial slice scorer");
    tbpr->add_option("--corpus", corpus, "corpus manifest.json")->required();
    tbpr->add_option("--out", out, "output directory")->required();

    auto* tddpm = app.add_subcommand("train-ddpm", "pretrain the denoiser");
    tddpm->add_option("--corpus", corpus, "corpus manifest.json");
    tddpm->add_option("--bpr", bpr_path, "slice-score checkpoint for conditioning");
    tddpm->add_option("--out", out, "output directory")->required();
    tddpm->add_flag("--resume", do_resume, "continue from <out>/ddpm.ckpt");
    tddpm->add_flag("--init-only", init_only,
                    "write an untrained randomly initialized checkpoint");

    auto* extract = app.add_subcommand("extract", "extract frozen features for one volume");
    extract->add_option("--ckpt", ckpt, "denoiser checkpoint")->required();
    extract->add_option("--volume", volume_path, "input .v3d volume")->required();
    extract->add_option("--bpr", bpr_path, "slice-score checkpoint (conditioned models)");
    extract->add_option("--out", out, "output .vfeat path")->required();

    auto* probe = app.add_subcommand("probe", "train and evaluate a frozen-feature probe");
    probe->add_option("--ckpt", ckpt, "denoiser checkpoint")->required();
    probe->add_option("--train-corpus", train_corpus, "training corpus manifest")->required();
    probe->add_option("--test-corpus", test_corpus, "held-out corpus manifest")->required();
    probe->add_option("--bpr", bpr_path, "slice-score checkpoint (conditioned models)");
    probe->add_option("--out", out, "output directory")->required();

    auto* ablate = app.add_subcommand("ablate", "probe quality per extraction timestep");
    ablate->add_option("--ckpt", ckpt, "denoiser checkpoint")->required();
    ablate->add_option("--train-corpus", train_corpus, "training corpus manifest")->required();
    ablate->add_option("--test-corpus", test_corpus, "held-out corpus manifest")->required();
    ablate->add_option("--bpr", bpr_path, "slice-score checkpoint (conditioned models)");
    ablate->add_option("--out", out, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "merge probe reports into one table");
    eval->add_option("--report", reports, "report.csv from a probe run")->required();
    eval->add_option("--out", out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg = load_experiment_config(config_path, sets);
        if (synth->parsed())
            cmd_synth(cfg, out);
        else if (tbpr->parsed())
            cmd_train_bpr(cfg, corpus, out);
        else if (tddpm->parsed()) {
            if (!init_only && corpus.empty())
                throw ConfigError("train-ddpm needs --corpus (or --init-only)");
            cmd_train_ddpm(cfg, corpus, bpr_path, out, do_resume, init_only);
        } else if (extract->parsed())
            cmd_extract(cfg, ckpt, volume_path, bpr_path, out);
        else if (probe->parsed())
            cmd_probe(cfg, ckpt, train_corpus, test_corpus, bpr_path, out);
        else if (ablate->parsed())
            cmd_ablate(cfg, ckpt, train_corpus, test_corpus, bpr_path, out);
        else if (eval->parsed())
            cmd_eval(reports, out);
        return 0;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const MissingArtifactError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace voxdiff
