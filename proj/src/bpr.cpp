#include "voxdiff/bpr.hpp"

#include <algorithm>
#include <cmath>

#include "voxdiff/checkpoint.hpp"
#include "voxdiff/common.hpp"

namespace voxdiff {

namespace {
constexpr int kWidths[4] = {16, 32, 64, 64};
}

template <typename T>
BprNet<T>::BprNet() {
    int cin = 1;
    for (int i = 0; i < 4; ++i) {
        conv_[i] = Conv3d<T>(cin, kWidths[i], {1, 3, 3}, {1, 2, 2}, {0, 1, 1});
        cin = kWidths[i];
    }
    head_ = Linear<T>(kWidths[3], 1);
}

template <typename T>
void BprNet<T>::init(Rng& rng) {
    for (auto& c : conv_) c.init(rng);
    head_.init(rng);
}

template <typename T>
std::vector<ParamRef<T>> BprNet<T>::params() {
    std::vector<ParamRef<T>> out;
    for (int i = 0; i < 4; ++i) conv_[i].collect("conv" + std::to_string(i + 1), out);
    head_.collect("head", out);
    return out;
}

template <typename T>
Tensor<T> BprNet<T>::forward(const Tensor<T>& slab) {
    if (slab.rank() != 4 || slab.size(0) != 1)
        throw ConfigError("slice stack must be (1, slices, y, x)");
    Tensor<T> h = slab;
    for (int i = 0; i < 4; ++i) h = act_[i].forward(conv_[i].forward(h));
    const int C = kWidths[3], S = h.size(1);
    conv_out_sp_ = {S, h.size(2), h.size(3)};
    const size_t plane = size_t(h.size(2)) * h.size(3);
    pooled_ = Tensor<T>({S, C});
    for (int s = 0; s < S; ++s)
        for (int c = 0; c < C; ++c) {
            const T* p = h.data() + (size_t(c) * S + s) * plane;
            double acc = 0;
            for (size_t i = 0; i < plane; ++i) acc += p[i];
            pooled_.at(s, c) = static_cast<T>(acc / double(plane));
        }
    Tensor<T> scores({S});
    for (int s = 0; s < S; ++s) {
        double acc = head_.bias[0];
        for (int c = 0; c < C; ++c)
            acc += double(head_.weight[size_t(c)]) * double(pooled_.at(s, c));
        scores[size_t(s)] = static_cast<T>(acc);
    }
    return scores;
}

template <typename T>
void BprNet<T>::backward(const Tensor<T>& grad_scores) {
    const int C = kWidths[3], S = conv_out_sp_[0];
    if (grad_scores.rank() != 1 || grad_scores.size(0) != S)
        throw ConfigError("score gradient shape mismatch");
    Tensor<T> gpool({S, C});
    for (int s = 0; s < S; ++s) {
        const T g = grad_scores[size_t(s)];
        head_.grad_bias[0] += g;
        for (int c = 0; c < C; ++c) {
            head_.grad_weight[size_t(c)] += g * pooled_.at(s, c);
            gpool.at(s, c) = g * head_.weight[size_t(c)];
        }
    }
    const size_t plane = size_t(conv_out_sp_[1]) * conv_out_sp_[2];
    Tensor<T> gh({C, S, conv_out_sp_[1], conv_out_sp_[2]});
    for (int s = 0; s < S; ++s)
        for (int c = 0; c < C; ++c) {
            const T g = static_cast<T>(gpool.at(s, c) / double(plane));
            T* p = gh.data() + (size_t(c) * S + s) * plane;
            for (size_t i = 0; i < plane; ++i) p[i] = g;
        }
    Tensor<T> g = std::move(gh);
    for (int i = 3; i >= 0; --i)
        g = conv_[i].backward(act_[i].backward(g), /*want_input_grad=*/i > 0);
}

template class BprNet<float>;
template class BprNet<double>;

// ----------------------------------------------------------------------
// Losses
// ----------------------------------------------------------------------

namespace {

double log_sigmoid(double x) {
    // stable: -log(1 + exp(-x)) for x >= 0, x - log(1 + exp(x)) otherwise
    return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

double smooth_l1(double x) { return std::abs(x) < 1 ? 0.5 * x * x : std::abs(x) - 0.5; }
double smooth_l1_grad(double x) { return std::abs(x) < 1 ? x : (x > 0 ? 1.0 : -1.0); }

}  // namespace

BprLosses bpr_losses(const std::vector<double>& scores, int slice_gap) {
    std::vector<double> unused;
    return bpr_losses_grad(scores, slice_gap, unused);
}

BprLosses bpr_losses_grad(const std::vector<double>& scores, int slice_gap,
                          std::vector<double>& grad) {
    const int m = int(scores.size());
    if (m < 3) throw ConfigError("ranking losses need at least 3 slices");
    if (slice_gap < 1) throw ConfigError("slice gap must be positive");
    grad.assign(size_t(m), 0.0);
    BprLosses out;
    std::vector<double> d(size_t(m - 1)), gd(size_t(m - 1), 0.0);
    for (int j = 0; j + 1 < m; ++j) {
        d[size_t(j)] = scores[size_t(j + 1)] - scores[size_t(j)];
        out.order -= log_sigmoid(d[size_t(j)]);
        gd[size_t(j)] = 1.0 / (1.0 + std::exp(-d[size_t(j)])) - 1.0;  // sigmoid - 1
    }
    for (int j = 0; j + 2 < m; ++j) {
        const double r = d[size_t(j + 1)] - d[size_t(j)];
        out.dist += smooth_l1(r);
        const double u = smooth_l1_grad(r);
        gd[size_t(j + 1)] += u;
        gd[size_t(j)] -= u;
    }
    for (int j = 0; j + 1 < m; ++j) {
        grad[size_t(j + 1)] += gd[size_t(j)];
        grad[size_t(j)] -= gd[size_t(j)];
    }
    return out;
}

// ----------------------------------------------------------------------
// Training
// ----------------------------------------------------------------------

namespace {

// gather m slices starting at `start` with index gap `gap` into (1, m, y, x)
Tensor<float> gather_slices(const Volume& v, int start, int gap, int m) {
    const int Y = v.shape[1], X = v.shape[2];
    Tensor<float> slab({1, m, Y, X});
    for (int j = 0; j < m; ++j) {
        const float* src = v.data.data() + size_t(start + j * gap) * Y * X;
        std::copy(src, src + size_t(Y) * X, slab.data() + size_t(j) * Y * X);
    }
    return slab;
}

}  // namespace

std::vector<double> slice_scores(BprNet<float>& net, const Volume& v) {
    const int Z = v.shape[0], Y = v.shape[1], X = v.shape[2];
    std::vector<double> out;
    out.reserve(size_t(Z));
    constexpr int kChunk = 64;
    for (int z0 = 0; z0 < Z; z0 += kChunk) {
        const int n = std::min(kChunk, Z - z0);
        Tensor<float> slab({1, n, Y, X});
        std::copy(v.data.begin() + size_t(z0) * Y * X,
                  v.data.begin() + size_t(z0 + n) * Y * X, slab.data());
        Tensor<float> s = net.forward(slab);
        for (int i = 0; i < n; ++i) out.push_back(s[size_t(i)]);
    }
    return out;
}

BprModel train_bpr(const std::vector<Volume>& volumes, const BprConfig& cfg) {
    if (volumes.size() < 2) throw ConfigError("bpr training needs at least 2 volumes");
    if (cfg.slices_per_sample < 3) throw ConfigError("slices_per_sample must be >= 3");
    if (cfg.gap_min < 1 || cfg.gap_max < cfg.gap_min)
        throw ConfigError("invalid slice gap range");
    const int m = cfg.slices_per_sample;
    for (const auto& v : volumes) {
        if (v.kind != VolKind::image) throw ConfigError("bpr trains on image volumes");
        if (v.shape[0] < m * cfg.gap_min)
            throw ConfigError("volume has too few axial slices for slice sampling");
    }
    Rng rng(cfg.seed);
    BprModel model;
    model.net.init(rng);
    auto params = model.net.params();
    Adam<float> opt(cfg.learning_rate);
    for (int step = 0; step < cfg.steps; ++step) {
        const Volume& v = volumes[size_t(rng.uniform_int(0, int(volumes.size()) - 1))];
        const int Z = v.shape[0];
        const int gap_hi = std::min(cfg.gap_max, (Z - 1) / (m - 1));
        const int gap = rng.uniform_int(cfg.gap_min, std::max(cfg.gap_min, gap_hi));
        const int start = rng.uniform_int(0, Z - 1 - (m - 1) * gap);
        Tensor<float> slab = gather_slices(v, start, gap, m);
        Tensor<float> s = model.net.forward(slab);
        std::vector<double> sv(static_cast<size_t>(m));
        for (int j = 0; j < m; ++j) sv[size_t(j)] = s[size_t(j)];
        std::vector<double> gs;
        BprLosses losses = bpr_losses_grad(sv, gap, gs);
        if (!std::isfinite(losses.total()))
            throw NumericError("non-finite ranking loss at step " + std::to_string(step));
        Tensor<float> gscores({m});
        for (int j = 0; j < m; ++j) gscores[size_t(j)] = static_cast<float>(gs[size_t(j)]);
        opt.zero_grad(params);
        model.net.backward(gscores);
        opt.step(params);
    }
    // fit the normalization range on the training set
    std::vector<double> all;
    for (const auto& v : volumes) {
        auto s = slice_scores(model.net, v);
        all.insert(all.end(), s.begin(), s.end());
    }
    std::sort(all.begin(), all.end());
    const size_t n = all.size();
    model.score_min = all[size_t(std::floor(0.01 * double(n - 1)))];
    model.score_max = all[size_t(std::ceil(0.99 * double(n - 1)))];
    return model;
}

double BprModel::normalize_score(double s) const {
    if (score_max <= score_min) return 0.0;
    const double c = 2.0 * (s - score_min) / (score_max - score_min) - 1.0;
    return std::clamp(c, -1.0, 1.0);
}

Volume coordinate_map(BprModel& model, const Volume& v) {
    if (v.kind != VolKind::image)
        throw ConfigError("coordinate_map expects an image volume");
    const auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
    if (v.data.empty() || *lo < -1.0001f || *hi > 1.0001f)
        throw ConfigError("coordinate_map expects a normalized image in [-1, 1]");
    std::vector<double> s = slice_scores(model.net, v);
    Volume out = Volume::make(v.shape, v.spacing, VolKind::coord);
    const size_t plane = size_t(v.shape[1]) * v.shape[2];
    for (int z = 0; z < v.shape[0]; ++z) {
        const float c = static_cast<float>(model.normalize_score(s[size_t(z)]));
        std::fill(out.data.begin() + size_t(z) * plane,
                  out.data.begin() + size_t(z + 1) * plane, c);
    }
    return out;
}

void save_bpr(BprModel& model, const std::string& path) {
    Checkpoint ck;
    ck.meta["kind"] = "bpr";
    ck.meta["score_min"] = model.score_min;
    ck.meta["score_max"] = model.score_max;
    auto params = model.net.params();
    pack_params(params, ck, "model.");
    save_checkpoint(ck, path);
}

BprModel load_bpr(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.meta.value("kind", "") != "bpr")
        throw IoError("checkpoint is not a slice-score model: " + path);
    BprModel model;
    model.score_min = ck.meta.at("score_min").get<double>();
    model.score_max = ck.meta.at("score_max").get<double>();
    auto params = model.net.params();
    unpack_params(ck, params, "model.");
    return model;
}

}  // namespace voxdiff
