#pragma once

#include <map>
#include <string>
#include <vector>

#include "voxdiff/bpr.hpp"
#include "voxdiff/features.hpp"
#include "voxdiff/nn.hpp"
#include "voxdiff/volume.hpp"

namespace voxdiff {

// Per-class metadata for reports: `group` is one of Small/Medium/Big and
// `column` names the report column (paired organs share a column and are
// averaged into it).
struct ClassInfo {
    int id = 0;
    std::string name;
    std::string group;
    std::string column;
};

struct ProbeConfig {
    int hidden = 64;
    int classes = 0;  // including background class 0
    int epochs = 6;
    double learning_rate = 1e-3;
    uint64_t seed = 11;
};

// Non-linear probe: pointwise conv -> ReLU -> 3x3x3 conv -> ReLU ->
// pointwise conv to class logits. Trained on frozen features.
class ProbeHead {
public:
    ProbeHead() = default;
    ProbeHead(int in_channels, int hidden, int classes);

    void init(Rng& rng);
    std::vector<ParamRef<float>> params();

    Tensor<float> forward(const Tensor<float>& features);
    void backward(const Tensor<float>& grad_logits);

    int in_channels() const { return in_channels_; }
    int classes() const { return classes_; }

private:
    int in_channels_ = 0, hidden_ = 0, classes_ = 0;
    Conv3d<float> c1_, c2_, c3_;
    ReLU<float> r1_, r2_;
};

// 0.5 * cross-entropy + 0.5 * (1 - mean soft Dice over foreground classes).
// When grad is non-null it receives d(loss)/d(logits).
double probe_loss(const Tensor<float>& logits, const Volume& gt, int classes,
                  Tensor<float>* grad);

struct TrainedProbe {
    ProbeHead head;
    double final_loss = 0;
};

// Optimizes on per-channel standardized features (statistics taken from the
// training set, then folded into the first conv), so the returned head is
// applied to raw features as-is.
TrainedProbe train_probe(const std::vector<const FeatureVolume*>& features,
                         const std::vector<const Volume*>& labels, const ProbeConfig& cfg);

// argmax over class logits; ties go to the lower class index
Volume segment(ProbeHead& head, const FeatureVolume& features);

// 2|P∩G| / (|P| + |G|); 1.0 when both masks are empty
double dice(const Volume& pred, const Volume& gt, int class_id);

struct DiceReport {
    std::map<int, double> per_class;          // foreground classes
    std::map<std::string, double> group_mean; // Small / Medium / Big
    double avg = 0;                           // mean over all foreground classes
};

DiceReport group_report(const std::map<int, double>& per_class,
                        const std::map<int, std::string>& grouping);

// convenience: per-class dice of a prediction against ground truth for every
// foreground class listed in `classes`
std::map<int, double> per_class_dice(const Volume& pred, const Volume& gt,
                                     const std::vector<ClassInfo>& classes);

std::map<int, std::string> grouping_of(const std::vector<ClassInfo>& classes);

// Report writers. Rows are (label, report) pairs; columns are the distinct
// class columns in catalog order, then Small/Medium/Big, then Avg.
void write_report_csv(const std::string& path, const std::vector<ClassInfo>& classes,
                      const std::vector<std::pair<std::string, DiceReport>>& rows);
void write_report_markdown(const std::string& path, const std::vector<ClassInfo>& classes,
                           const std::vector<std::pair<std::string, DiceReport>>& rows);

struct AblationRow {
    int t = 0;
    double small = 0, medium = 0, big = 0, avg = 0;
};

// For each candidate timestep: extract single-t features, train a fresh
// probe (seed derived from t, so duplicate candidates give identical rows),
// and evaluate on the held-out volumes.
std::vector<AblationRow> ablate_timesteps(
    const std::string& checkpoint_path, const std::vector<Volume>& train_images,
    const std::vector<Volume>& train_labels, const std::vector<Volume>& test_images,
    const std::vector<Volume>& test_labels, const std::vector<ClassInfo>& classes,
    const std::vector<int>& t_candidates, const ProbeConfig& probe_cfg,
    const ExtractOptions& extract_opt, BprModel* bpr);

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);

}  // namespace voxdiff
