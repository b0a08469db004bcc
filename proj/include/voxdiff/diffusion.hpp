#pragma once

#include <vector>

#include "voxdiff/rng.hpp"
#include "voxdiff/tensor.hpp"

namespace voxdiff {

// Diffusion constants for T steps, all double precision. Arrays are
// 0-indexed internally; public step indices t run 1..T.
struct NoiseSchedule {
    int T = 0;
    double beta_min = 0.0, beta_max = 0.0;
    std::vector<double> beta;       // beta_t
    std::vector<double> alpha;      // 1 - beta_t
    std::vector<double> alpha_bar;  // prod_{s<=t} alpha_s
    std::vector<double> sigma;      // sqrt(beta_t)

    double abar(int t) const { return alpha_bar[static_cast<size_t>(t - 1)]; }
    void check_t(int t) const;
};

// Linear beta schedule over [beta_min, beta_max].
NoiseSchedule make_schedule(int T, double beta_min, double beta_max);

// Standard T=1000 range (1e-4, 0.02) rescaled by 1000/T, so that the
// cumulative signal decay at step t matches the reference schedule at
// step t*1000/T.
std::pair<double, double> scaled_beta_range(int T);

// Noise prediction network interface: epsilon_theta(x_t, t, cond).
// Stub models in tests and the full denoiser both implement it.
template <typename T>
class EpsilonModel {
public:
    virtual ~EpsilonModel() = default;
    virtual int in_channels() const = 0;
    // x_t: (1, Z, Y, X); cond: optional (1, Z, Y, X); returns (1, Z, Y, X)
    virtual Tensor<T> forward_eps(const Tensor<T>& x_t, int t, const Tensor<T>* cond) = 0;
    // Accumulates parameter gradients for the preceding forward_eps call.
    virtual void backward_eps(const Tensor<T>& grad_eps) { (void)grad_eps; }
};

// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps, elementwise.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched);

// Draws eps from rng, computes x_t, runs the model and returns the mean
// squared error between eps and the prediction. With backprop=true the
// loss gradient is pushed into the model's parameter gradients.
template <typename T>
T ddpm_loss(EpsilonModel<T>& model, const Tensor<T>& x0, int t, const Tensor<T>* cond,
            const NoiseSchedule& sched, Rng& rng, bool backprop = false);

// One reverse step:
//   x_{t-1} = (x_t - beta_t / sqrt(1-abar_t) * eps_theta) / sqrt(alpha_t)
//             + sigma_t * z,  z ~ N(0,I) for t > 1, z = 0 at t = 1.
template <typename T>
Tensor<T> p_step(EpsilonModel<T>& model, const Tensor<T>& x_t, int t, const Tensor<T>* cond,
                 const NoiseSchedule& sched, Rng& rng);

// Full reverse chain from x_T ~ N(0, I) down to the x_0 estimate.
template <typename T>
Tensor<T> sample(EpsilonModel<T>& model, const std::array<int, 3>& patch_shape,
                 const Tensor<T>* cond, const NoiseSchedule& sched, Rng& rng);

}  // namespace voxdiff
