#include "voxdiff/probing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "voxdiff/common.hpp"

namespace voxdiff {

ProbeHead::ProbeHead(int in_channels, int hidden, int classes)
    : in_channels_(in_channels), hidden_(hidden), classes_(classes) {
    if (in_channels < 1) throw ConfigError("features have zero channels");
    if (hidden < 1 || classes < 2) throw ConfigError("invalid probe head dimensions");
    c1_ = Conv3d<float>(in_channels, hidden, {1, 1, 1}, {1, 1, 1}, {0, 0, 0});
    c2_ = Conv3d<float>(hidden, hidden, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
    c3_ = Conv3d<float>(hidden, classes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0});
}

void ProbeHead::init(Rng& rng) {
    c1_.init(rng);
    c2_.init(rng);
    c3_.init(rng);
}

std::vector<ParamRef<float>> ProbeHead::params() {
    std::vector<ParamRef<float>> out;
    c1_.collect("c1", out);
    c2_.collect("c2", out);
    c3_.collect("c3", out);
    return out;
}

Tensor<float> ProbeHead::forward(const Tensor<float>& features) {
    if (features.rank() != 4 || features.size(0) != in_channels_)
        throw ConfigError("probe input channel count mismatch");
    return c3_.forward(r2_.forward(c2_.forward(r1_.forward(c1_.forward(features)))));
}

void ProbeHead::backward(const Tensor<float>& grad_logits) {
    c1_.backward(r1_.backward(c2_.backward(r2_.backward(c3_.backward(grad_logits)))),
                 /*want_input_grad=*/false);
}

double probe_loss(const Tensor<float>& logits, const Volume& gt, int classes,
                  Tensor<float>* grad) {
    if (logits.rank() != 4 || logits.size(0) != classes)
        throw ConfigError("logit channel count does not match class count");
    const size_t vox = size_t(logits.size(1)) * logits.size(2) * logits.size(3);
    if (vox != gt.data.size()) throw ConfigError("logit/label shape mismatch");
    // softmax probabilities, gt hits, per-class soft-dice accumulators
    Tensor<float> prob(logits.shape());
    std::vector<int> gtc(vox);
    for (size_t i = 0; i < vox; ++i) {
        const int c = int(gt.data[i]);
        if (c < 0 || c >= classes)
            throw ConfigError("label id outside the configured class count");
        gtc[i] = c;
    }
    double ce = 0;
    for (size_t i = 0; i < vox; ++i) {
        float mx = logits.data()[i];
        for (int c = 1; c < classes; ++c)
            mx = std::max(mx, logits.data()[size_t(c) * vox + i]);
        double sum = 0;
        for (int c = 0; c < classes; ++c) {
            const double e = std::exp(double(logits.data()[size_t(c) * vox + i]) - mx);
            prob.data()[size_t(c) * vox + i] = float(e);
            sum += e;
        }
        for (int c = 0; c < classes; ++c) prob.data()[size_t(c) * vox + i] /= float(sum);
        ce -= std::log(std::max(double(prob.data()[size_t(gtc[i]) * vox + i]), 1e-30));
    }
    ce /= double(vox);
    const double eps = 1e-5;
    std::vector<double> inter(size_t(classes), 0), psum(size_t(classes), 0),
        gsum(size_t(classes), 0);
    for (size_t i = 0; i < vox; ++i) {
        for (int c = 1; c < classes; ++c) psum[size_t(c)] += prob.data()[size_t(c) * vox + i];
        inter[size_t(gtc[i])] += prob.data()[size_t(gtc[i]) * vox + i];
        gsum[size_t(gtc[i])] += 1;
    }
    double dice_sum = 0;
    for (int c = 1; c < classes; ++c)
        dice_sum += (2 * inter[size_t(c)] + eps) / (psum[size_t(c)] + gsum[size_t(c)] + eps);
    const int fg = classes - 1;
    const double dice_loss = 1.0 - dice_sum / fg;
    const double loss = 0.5 * ce + 0.5 * dice_loss;
    if (grad) {
        *grad = Tensor<float>(logits.shape());
        // d(dice)/d(prob) first, then both terms through softmax
        for (size_t i = 0; i < vox; ++i) {
            double dldp[32];
            for (int c = 0; c < classes; ++c) {
                if (c == 0) {
                    dldp[c] = 0;
                    continue;
                }
                const double denom = psum[size_t(c)] + gsum[size_t(c)] + eps;
                const double g = gtc[i] == c ? 1.0 : 0.0;
                const double ddice =
                    (2 * g * denom - (2 * inter[size_t(c)] + eps)) / (denom * denom);
                dldp[c] = -0.5 * ddice / fg;
            }
            double dot = 0;
            for (int c = 0; c < classes; ++c)
                dot += dldp[c] * double(prob.data()[size_t(c) * vox + i]);
            for (int c = 0; c < classes; ++c) {
                const double p = prob.data()[size_t(c) * vox + i];
                const double g_dice = p * (dldp[c] - dot);
                const double g_ce =
                    0.5 * (p - (gtc[i] == c ? 1.0 : 0.0)) / double(vox);
                grad->data()[size_t(c) * vox + i] = float(g_ce + g_dice);
            }
        }
    }
    return loss;
}

TrainedProbe train_probe(const std::vector<const FeatureVolume*>& features,
                         const std::vector<const Volume*>& labels, const ProbeConfig& cfg) {
    if (features.empty() || features.size() != labels.size())
        throw ConfigError("probe training needs paired feature and label volumes");
    if (cfg.classes < 2) throw ConfigError("probe needs at least 2 classes");
    if (cfg.classes > 32) throw ConfigError("probe supports at most 32 classes");
    const int ch = features.front()->channels();
    if (ch < 1) throw ConfigError("features have zero channels");
    for (size_t i = 0; i < features.size(); ++i) {
        if (features[i]->channels() != ch)
            throw ConfigError("inconsistent feature channel counts");
        if (features[i]->shape != labels[i]->shape)
            throw ConfigError("feature/label shape mismatch");
        if (labels[i]->kind != VolKind::label)
            throw ConfigError("probe targets must be label volumes");
        const float* fd = features[i]->data.data();
        for (int64_t k = 0; k < features[i]->data.numel(); ++k)
            if (!std::isfinite(fd[k]))
                throw NumericError("non-finite feature value in volume " + std::to_string(i));
    }
    // Per-channel standardization statistics over the training features.
    // Channels from different pyramid levels and timesteps arrive on very
    // different scales; training on x_hat = (x - mu) / sd and folding the
    // affine into the first pointwise conv afterwards keeps the returned
    // head consuming raw features while the optimizer sees balanced inputs.
    std::vector<double> mu(size_t(ch), 0.0), sd(size_t(ch), 0.0);
    double count = 0;
    for (const auto* f : features) {
        const int64_t vox = f->data.numel() / ch;
        for (int c = 0; c < ch; ++c) {
            const float* p = f->data.data() + int64_t(c) * vox;
            double s = 0;
            for (int64_t k = 0; k < vox; ++k) s += p[k];
            mu[size_t(c)] += s;
        }
        count += double(vox);
    }
    for (int c = 0; c < ch; ++c) mu[size_t(c)] /= count;
    for (const auto* f : features) {
        const int64_t vox = f->data.numel() / ch;
        for (int c = 0; c < ch; ++c) {
            const float* p = f->data.data() + int64_t(c) * vox;
            double s = 0;
            for (int64_t k = 0; k < vox; ++k) {
                const double d = p[k] - mu[size_t(c)];
                s += d * d;
            }
            sd[size_t(c)] += s;
        }
    }
    for (int c = 0; c < ch; ++c)
        sd[size_t(c)] = std::max(std::sqrt(sd[size_t(c)] / count), 1e-6);

    Rng rng(cfg.seed);
    TrainedProbe out;
    out.head = ProbeHead(ch, cfg.hidden, cfg.classes);
    out.head.init(rng);
    auto params = out.head.params();
    Adam<float> opt(cfg.learning_rate);
    std::vector<size_t> order(features.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(rng.uniform_int(0, int(i) - 1))]);
        for (size_t oi = 0; oi < order.size(); ++oi) {
            const size_t vi = order[oi];
            const Tensor<float>& raw = features[vi]->data;
            Tensor<float> xhat(raw.shape());
            const int64_t vox = raw.numel() / ch;
            for (int c = 0; c < ch; ++c) {
                const float* src = raw.data() + int64_t(c) * vox;
                float* dst = xhat.data() + int64_t(c) * vox;
                const float m = float(mu[size_t(c)]);
                const float inv = float(1.0 / sd[size_t(c)]);
                for (int64_t k = 0; k < vox; ++k) dst[k] = (src[k] - m) * inv;
            }
            Tensor<float> logits = out.head.forward(xhat);
            Tensor<float> grad;
            const double loss = probe_loss(logits, *labels[vi], cfg.classes, &grad);
            if (!std::isfinite(loss))
                throw NumericError("non-finite probe loss on volume " + std::to_string(vi));
            opt.zero_grad(params);
            out.head.backward(grad);
            opt.step(params);
            out.final_loss = loss;
        }
    }

    // fold the standardization: w' = w / sd, b' = b - sum_c w_c mu_c / sd_c
    Tensor<float>* w = nullptr;
    Tensor<float>* b = nullptr;
    for (auto& p : params) {
        if (p.name == "c1.w") w = p.value;
        if (p.name == "c1.b") b = p.value;
    }
    for (int h = 0; h < w->size(0); ++h) {
        double shift = 0;
        for (int c = 0; c < ch; ++c) {
            float& wv = (*w)[int64_t(h) * ch + c];
            shift += double(wv) * mu[size_t(c)] / sd[size_t(c)];
            wv = float(double(wv) / sd[size_t(c)]);
        }
        (*b)[size_t(h)] -= float(shift);
    }
    return out;
}

Volume segment(ProbeHead& head, const FeatureVolume& features) {
    Tensor<float> logits = head.forward(features.data);
    const int classes = logits.size(0);
    const size_t vox = size_t(logits.size(1)) * logits.size(2) * logits.size(3);
    Volume out = Volume::make(features.shape, features.spacing, VolKind::label);
    for (size_t i = 0; i < vox; ++i) {
        int best = 0;
        float bv = logits.data()[i];
        for (int c = 1; c < classes; ++c) {
            const float v = logits.data()[size_t(c) * vox + i];
            if (v > bv) {
                bv = v;
                best = c;
            }
        }
        out.data[i] = float(best);
    }
    return out;
}

double dice(const Volume& pred, const Volume& gt, int class_id) {
    if (pred.shape != gt.shape) throw ConfigError("dice requires matching shapes");
    size_t p = 0, g = 0, both = 0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const bool ip = int(pred.data[i]) == class_id;
        const bool ig = int(gt.data[i]) == class_id;
        p += ip;
        g += ig;
        both += ip && ig;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * double(both) / double(p + g);
}

DiceReport group_report(const std::map<int, double>& per_class,
                        const std::map<int, std::string>& grouping) {
    DiceReport rep;
    rep.per_class = per_class;
    std::map<std::string, std::pair<double, int>> acc;
    double total = 0;
    for (const auto& [cls, d] : per_class) {
        auto it = grouping.find(cls);
        if (it == grouping.end())
            throw ConfigError("class " + std::to_string(cls) + " has no size group");
        acc[it->second].first += d;
        acc[it->second].second += 1;
        total += d;
    }
    for (const auto& [name, pr] : acc) rep.group_mean[name] = pr.first / pr.second;
    rep.avg = per_class.empty() ? 0.0 : total / double(per_class.size());
    return rep;
}

std::map<int, double> per_class_dice(const Volume& pred, const Volume& gt,
                                     const std::vector<ClassInfo>& classes) {
    std::map<int, double> out;
    for (const auto& c : classes)
        if (c.id != 0) out[c.id] = dice(pred, gt, c.id);
    return out;
}

std::map<int, std::string> grouping_of(const std::vector<ClassInfo>& classes) {
    std::map<int, std::string> out;
    for (const auto& c : classes)
        if (c.id != 0) out[c.id] = c.group;
    return out;
}

// ----------------------------------------------------------------------
// Report writers
// ----------------------------------------------------------------------

namespace {

std::vector<std::string> distinct_columns(const std::vector<ClassInfo>& classes) {
    std::vector<std::string> cols;
    for (const auto& c : classes) {
        if (c.id == 0) continue;
        if (std::find(cols.begin(), cols.end(), c.column) == cols.end())
            cols.push_back(c.column);
    }
    return cols;
}

double column_value(const std::string& col, const std::vector<ClassInfo>& classes,
                    const DiceReport& rep) {
    double sum = 0;
    int n = 0;
    for (const auto& c : classes) {
        if (c.id == 0 || c.column != col) continue;
        auto it = rep.per_class.find(c.id);
        if (it == rep.per_class.end())
            throw ConfigError("report is missing class " + std::to_string(c.id));
        sum += it->second;
        ++n;
    }
    return sum / n;
}

std::string fmt(double v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

double group_or_zero(const DiceReport& rep, const char* name) {
    auto it = rep.group_mean.find(name);
    return it == rep.group_mean.end() ? 0.0 : it->second;
}

}  // namespace

void write_report_csv(const std::string& path, const std::vector<ClassInfo>& classes,
                      const std::vector<std::pair<std::string, DiceReport>>& rows) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << "method";
    for (const auto& col : distinct_columns(classes)) f << ',' << col;
    f << ",Small,Medium,Big,Avg\n";
    for (const auto& [name, rep] : rows) {
        f << name;
        for (const auto& col : distinct_columns(classes))
            f << ',' << fmt(column_value(col, classes, rep));
        f << ',' << fmt(group_or_zero(rep, "Small")) << ',' << fmt(group_or_zero(rep, "Medium"))
          << ',' << fmt(group_or_zero(rep, "Big")) << ',' << fmt(rep.avg) << '\n';
    }
}

void write_report_markdown(const std::string& path, const std::vector<ClassInfo>& classes,
                           const std::vector<std::pair<std::string, DiceReport>>& rows) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    const auto cols = distinct_columns(classes);
    f << "| method |";
    for (const auto& col : cols) f << ' ' << col << " |";
    f << " Small | Medium | Big | Avg |\n";
    f << "|---|";
    for (size_t i = 0; i < cols.size() + 4; ++i) f << "---|";
    f << '\n';
    for (const auto& [name, rep] : rows) {
        f << "| " << name << " |";
        for (const auto& col : cols) f << ' ' << fmt(column_value(col, classes, rep)) << " |";
        f << ' ' << fmt(group_or_zero(rep, "Small")) << " | " << fmt(group_or_zero(rep, "Medium"))
          << " | " << fmt(group_or_zero(rep, "Big")) << " | " << fmt(rep.avg) << " |\n";
    }
}

// ----------------------------------------------------------------------
// Timestep ablation
// ----------------------------------------------------------------------

std::vector<AblationRow> ablate_timesteps(
    const std::string& checkpoint_path, const std::vector<Volume>& train_images,
    const std::vector<Volume>& train_labels, const std::vector<Volume>& test_images,
    const std::vector<Volume>& test_labels, const std::vector<ClassInfo>& classes,
    const std::vector<int>& t_candidates, const ProbeConfig& probe_cfg,
    const ExtractOptions& extract_opt, BprModel* bpr) {
    if (train_images.size() != train_labels.size() ||
        test_images.size() != test_labels.size())
        throw ConfigError("image/label list length mismatch");
    if (t_candidates.empty()) throw ConfigError("no candidate timesteps");
    const auto grouping = grouping_of(classes);
    std::vector<AblationRow> rows;
    for (int t : t_candidates) {
        ExtractOptions opt = extract_opt;
        opt.timesteps = {t};
        std::vector<FeatureVolume> train_feats;
        train_feats.reserve(train_images.size());
        for (const auto& v : train_images)
            train_feats.push_back(extract_features(checkpoint_path, v, opt, bpr));
        std::vector<const FeatureVolume*> fp;
        std::vector<const Volume*> lp;
        for (size_t i = 0; i < train_feats.size(); ++i) {
            fp.push_back(&train_feats[i]);
            lp.push_back(&train_labels[i]);
        }
        ProbeConfig pc = probe_cfg;
        pc.seed = derive_seed(probe_cfg.seed, uint64_t(t));
        TrainedProbe probe = train_probe(fp, lp, pc);
        train_feats.clear();
        std::map<int, double> dice_sum;
        for (size_t i = 0; i < test_images.size(); ++i) {
            FeatureVolume f = extract_features(checkpoint_path, test_images[i], opt, bpr);
            Volume pred = segment(probe.head, f);
            for (const auto& [cls, d] : per_class_dice(pred, test_labels[i], classes))
                dice_sum[cls] += d;
        }
        for (auto& [cls, d] : dice_sum) d /= double(test_images.size());
        DiceReport rep = group_report(dice_sum, grouping);
        AblationRow row;
        row.t = t;
        row.small = group_or_zero(rep, "Small");
        row.medium = group_or_zero(rep, "Medium");
        row.big = group_or_zero(rep, "Big");
        row.avg = rep.avg;
        rows.push_back(row);
    }
    return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << "t,Small,Medium,Big,Avg\n";
    for (const auto& r : rows)
        f << r.t << ',' << fmt(r.small) << ',' << fmt(r.medium) << ',' << fmt(r.big) << ','
          << fmt(r.avg) << '\n';
}

}  // namespace voxdiff
