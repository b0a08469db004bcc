#include "voxdiff/pretrain.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "voxdiff/common.hpp"
#include "voxdiff/patches.hpp"

namespace voxdiff {

void PretrainConfig::normalize() {
    if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (T < 1) throw ConfigError("T must be at least 1");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
    if (beta_min <= 0 || beta_max <= 0) {
        const auto [lo, hi] = scaled_beta_range(T);
        beta_min = lo;
        beta_max = hi;
    }
    model.in_channels = conditioned ? 2 : 1;
    model.normalize();
    const int div = 1 << (model.levels - 1);
    for (int a = 0; a < 3; ++a) {
        if (patch_hwd[a] < 1) throw ConfigError("patch dimensions must be positive");
        if (patch_hwd[a] % div != 0)
            throw ConfigError("patch dimensions must be divisible by " + std::to_string(div));
    }
}

nlohmann::json pretrain_config_to_json(const PretrainConfig& cfg) {
    return {{"patch_hwd", cfg.patch_hwd},
            {"epochs", cfg.epochs},
            {"learning_rate", cfg.learning_rate},
            {"batch_size", cfg.batch_size},
            {"adam_beta1", cfg.adam_beta1},
            {"adam_beta2", cfg.adam_beta2},
            {"adam_eps", cfg.adam_eps},
            {"T", cfg.T},
            {"beta_min", cfg.beta_min},
            {"beta_max", cfg.beta_max},
            {"conditioned", cfg.conditioned},
            {"seed", cfg.seed},
            {"checkpoint_every", cfg.checkpoint_every},
            {"model", denoiser_config_to_json(cfg.model)}};
}

PretrainConfig pretrain_config_from_json(const nlohmann::json& j) {
    PretrainConfig cfg;
    j.at("patch_hwd").get_to(cfg.patch_hwd);
    cfg.epochs = j.at("epochs").get<int>();
    cfg.learning_rate = j.at("learning_rate").get<double>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.adam_beta1 = j.at("adam_beta1").get<double>();
    cfg.adam_beta2 = j.at("adam_beta2").get<double>();
    cfg.adam_eps = j.at("adam_eps").get<double>();
    cfg.T = j.at("T").get<int>();
    cfg.beta_min = j.at("beta_min").get<double>();
    cfg.beta_max = j.at("beta_max").get<double>();
    cfg.conditioned = j.at("conditioned").get<bool>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.checkpoint_every = j.at("checkpoint_every").get<int>();
    cfg.model = denoiser_config_from_json(j.at("model"));
    cfg.normalize();
    return cfg;
}

namespace {

void save_denoiser_checkpoint(const std::string& path, const PretrainConfig& cfg,
                              Denoiser<float>& model, Adam<float>& opt, const Rng& rng,
                              int64_t step) {
    Checkpoint ck;
    ck.meta["kind"] = "denoiser";
    ck.meta["config"] = denoiser_config_to_json(model.config());
    ck.meta["pretrain"] = pretrain_config_to_json(cfg);
    ck.meta["schedule"] =
        schedule_to_json(make_schedule(cfg.T, cfg.beta_min, cfg.beta_max));
    ck.meta["train"] = {{"step", step}, {"rng", rng.state()}, {"opt_t", opt.t()}};
    auto params = model.params();
    pack_params(params, ck, "model.");
    if (!opt.m().empty()) {
        for (size_t i = 0; i < params.size(); ++i) {
            pack_params(std::vector<ParamRef<float>>{
                            {params[i].name, &opt.m()[i], nullptr}},
                        ck, "adam.m.");
            pack_params(std::vector<ParamRef<float>>{
                            {params[i].name, &opt.v()[i], nullptr}},
                        ck, "adam.v.");
        }
    }
    save_checkpoint(ck, path);
}

void check_dataset(const std::vector<Volume>& dataset, const PretrainConfig& cfg) {
    if (dataset.empty()) throw ConfigError("training dataset is empty");
    const auto patch = cfg.patch_zyx();
    for (const auto& v : dataset) {
        if (v.kind != VolKind::image)
            throw ConfigError("training dataset must contain image volumes");
        for (int a = 0; a < 3; ++a)
            if (v.shape[size_t(a)] < patch[size_t(a)])
                throw ConfigError("volume smaller than the training patch");
    }
}

std::vector<Volume> make_coord_maps(const std::vector<Volume>& dataset, BprModel* bpr,
                                    const PretrainConfig& cfg) {
    std::vector<Volume> coords;
    if (!cfg.conditioned) {
        if (bpr) throw ConfigError("slice-score model given but conditioning is disabled");
        return coords;
    }
    if (!bpr) throw ConfigError("conditioning enabled but no slice-score model provided");
    coords.reserve(dataset.size());
    for (const auto& v : dataset) coords.push_back(coordinate_map(*bpr, v));
    return coords;
}

std::string run_loop(Denoiser<float>& model, Adam<float>& opt, Rng& rng,
                     const std::vector<Volume>& dataset, const std::vector<Volume>& coords,
                     const PretrainConfig& cfg, int64_t start_step,
                     const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::string final_path = (fs::path(out_dir) / "ddpm.ckpt").string();
    const int64_t steps_total = int64_t(cfg.epochs) * int64_t(dataset.size());
    const NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max);
    const auto patch = cfg.patch_zyx();
    auto params = model.params();

    std::ofstream csv((fs::path(out_dir) / "loss.csv").string(), std::ios::app);
    if (!csv) throw IoError("cannot write loss log in " + out_dir);
    if (start_step == 0) csv << "step,loss,wall_ms\n";

    const auto run_start = std::chrono::steady_clock::now();
    for (int64_t step = start_step; step < steps_total; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        opt.zero_grad(params);
        double loss_sum = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const int vi = rng.uniform_int(0, int(dataset.size()) - 1);
            const Volume& vol = dataset[size_t(vi)];
            std::array<int, 3> origin;
            for (int a = 0; a < 3; ++a)
                origin[size_t(a)] =
                    rng.uniform_int(0, vol.shape[size_t(a)] - patch[size_t(a)]);
            const int t = rng.uniform_int(1, cfg.T);
            Volume p = extract_patch(vol, origin, patch);
            Tensor<float> x0({1, patch[0], patch[1], patch[2]}, std::move(p.data));
            Tensor<float> cond_patch;
            const Tensor<float>* cond = nullptr;
            if (cfg.conditioned) {
                Volume cp = extract_patch(coords[size_t(vi)], origin, patch);
                cond_patch =
                    Tensor<float>({1, patch[0], patch[1], patch[2]}, std::move(cp.data));
                cond = &cond_patch;
            }
            loss_sum += ddpm_loss<float>(model, x0, t, cond, sched, rng, true);
        }
        const double loss = loss_sum / cfg.batch_size;
        if (!std::isfinite(loss))
            throw NumericError("non-finite training loss at step " + std::to_string(step));
        if (cfg.batch_size > 1)
            for (auto& pr : params)
                for (int64_t i = 0; i < pr.grad->numel(); ++i)
                    pr.grad->data()[i] /= float(cfg.batch_size);
        opt.step(params);
        const auto t1 = std::chrono::steady_clock::now();
        const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        csv << step << ',';
        {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.8f", loss);
            csv << buf;
        }
        {
            char buf[32];
            std::snprintf(buf, sizeof(buf), ",%.3f\n", ms);
            csv << buf;
        }
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
            step + 1 < steps_total) {
            char name[64];
            std::snprintf(name, sizeof(name), "ddpm_step%06lld.ckpt",
                          static_cast<long long>(step + 1));
            save_denoiser_checkpoint((fs::path(out_dir) / name).string(), cfg, model, opt,
                                     rng, step + 1);
        }
    }
    save_denoiser_checkpoint(final_path, cfg, model, opt, rng, steps_total);
    const auto run_end = std::chrono::steady_clock::now();
    nlohmann::json sidecar = {
        {"wall_ms", std::chrono::duration<double, std::milli>(run_end - run_start).count()},
        {"steps", steps_total - start_step}};
    std::ofstream meta(final_path + ".meta.json");
    meta << sidecar.dump(2) << '\n';
    return final_path;
}

}  // namespace

std::string train_ddpm(const std::vector<Volume>& dataset, const PretrainConfig& cfg_in,
                       BprModel* bpr, const std::string& out_dir) {
    PretrainConfig cfg = cfg_in;
    cfg.normalize();
    check_dataset(dataset, cfg);
    std::vector<Volume> coords = make_coord_maps(dataset, bpr, cfg);
    Rng rng(cfg.seed);
    Denoiser<float> model(cfg.model);
    model.init(rng);
    Adam<float> opt(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    return run_loop(model, opt, rng, dataset, coords, cfg, 0, out_dir);
}

std::string init_ddpm(const PretrainConfig& cfg_in, const std::string& out_dir) {
    namespace fs = std::filesystem;
    PretrainConfig cfg = cfg_in;
    cfg.normalize();
    Rng rng(cfg.seed);
    Denoiser<float> model(cfg.model);
    model.init(rng);
    Adam<float> opt(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    fs::create_directories(out_dir);
    const std::string path = (fs::path(out_dir) / "ddpm.ckpt").string();
    save_denoiser_checkpoint(path, cfg, model, opt, rng, 0);
    return path;
}

std::string resume(const std::string& checkpoint_path, const std::vector<Volume>& dataset,
                   BprModel* bpr, const std::string& out_dir) {
    LoadedDenoiser ld = load_denoiser(checkpoint_path);
    check_dataset(dataset, ld.cfg);
    const int64_t steps_total = int64_t(ld.cfg.epochs) * int64_t(dataset.size());
    if (ld.step >= steps_total) return checkpoint_path;
    std::vector<Volume> coords = make_coord_maps(dataset, bpr, ld.cfg);
    Rng rng(ld.cfg.seed);
    rng.set_state(ld.rng_state);
    Adam<float> opt(ld.cfg.learning_rate, ld.cfg.adam_beta1, ld.cfg.adam_beta2,
                    ld.cfg.adam_eps);
    if (ld.has_optimizer)
        opt.restore(ld.opt_t, std::move(ld.opt_m), std::move(ld.opt_v));
    return run_loop(*ld.model, opt, rng, dataset, coords, ld.cfg, ld.step, out_dir);
}

void load_denoiser_params(Denoiser<float>& model, const Checkpoint& ck) {
    const DenoiserConfig stored = denoiser_config_from_json(ck.meta.at("config"));
    if (stored.in_channels != model.config().in_channels)
        throw IoError("in_channels mismatch");
    auto params = model.params();
    unpack_params(ck, params, "model.");
}

LoadedDenoiser load_denoiser(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.meta.value("kind", "") != "denoiser")
        throw IoError("checkpoint is not a denoiser: " + path);
    LoadedDenoiser ld;
    ld.cfg = pretrain_config_from_json(ck.meta.at("pretrain"));
    ld.schedule = schedule_from_json(ck.meta.at("schedule"));
    ld.model = std::make_unique<Denoiser<float>>(denoiser_config_from_json(ck.meta.at("config")));
    auto params = ld.model->params();
    unpack_params(ck, params, "model.");
    ld.step = ck.meta.at("train").at("step").get<int64_t>();
    ld.rng_state = ck.meta.at("train").at("rng").get<std::string>();
    ld.opt_t = ck.meta.at("train").at("opt_t").get<int64_t>();
    if (ck.find("adam.m." + params.front().name)) {
        ld.has_optimizer = true;
        for (const auto& p : params) {
            const NamedTensor* m = ck.find("adam.m." + p.name);
            const NamedTensor* v = ck.find("adam.v." + p.name);
            if (!m || !v) throw IoError("incomplete optimizer state in " + path);
            ld.opt_m.push_back(Tensor<float>(m->shape, m->data));
            ld.opt_v.push_back(Tensor<float>(v->shape, v->data));
        }
    }
    return ld;
}

}  // namespace voxdiff
