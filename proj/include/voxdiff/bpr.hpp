#pragma once

#include <string>
#include <vector>

#include "voxdiff/nn.hpp"
#include "voxdiff/rng.hpp"
#include "voxdiff/tensor.hpp"
#include "voxdiff/volume.hpp"

namespace voxdiff {

// Slice-score network: four strided 2D convolutions (run as 3D convs with a
// flat z kernel so a whole stack of slices scores in one pass), global
// average pooling per slice, then a scalar linear head.
template <typename T>
class BprNet {
public:
    BprNet();
    void init(Rng& rng);
    std::vector<ParamRef<T>> params();

    // slab is (1, n_slices, y, x); returns one score per slice
    Tensor<T> forward(const Tensor<T>& slab);
    void backward(const Tensor<T>& grad_scores);

private:
    Conv3d<T> conv_[4];
    SiLU<T> act_[4];
    Linear<T> head_;
    Tensor<T> pooled_;  // (n_slices, channels) cached for backward
    std::array<int, 3> conv_out_sp_{0, 0, 0};
};

struct BprLosses {
    double order = 0;
    double dist = 0;
    double total() const { return order + dist; }
};

// Ranking losses over scores of m equidistant slices (constant index gap,
// head-to-tail order): order = -sum log sigmoid(s_{j+1} - s_j),
// dist = sum smoothL1((s_{j+2} - s_{j+1}) - (s_{j+1} - s_j)).
BprLosses bpr_losses(const std::vector<double>& scores, int slice_gap);
BprLosses bpr_losses_grad(const std::vector<double>& scores, int slice_gap,
                          std::vector<double>& grad);

struct BprConfig {
    int steps = 400;
    double learning_rate = 1e-3;
    int slices_per_sample = 8;  // m
    int gap_min = 2;
    int gap_max = 4;
    uint64_t seed = 1;
};

struct BprModel {
    BprNet<float> net;
    double score_min = -1.0;
    double score_max = 1.0;

    // normalized, clamped coordinate for a raw slice score
    double normalize_score(double s) const;
};

BprModel train_bpr(const std::vector<Volume>& volumes, const BprConfig& cfg);

// raw per-slice scores for every axial slice of a volume
std::vector<double> slice_scores(BprNet<float>& net, const Volume& v);

// Per-voxel coordinate channel: the slice score, normalized to [-1, 1] and
// broadcast across its slice. Input must be a normalized image.
Volume coordinate_map(BprModel& model, const Volume& v);

void save_bpr(BprModel& model, const std::string& path);
BprModel load_bpr(const std::string& path);

}  // namespace voxdiff
