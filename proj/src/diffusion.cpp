#include "voxdiff/diffusion.hpp"

#include <cmath>

#include "voxdiff/common.hpp"

namespace voxdiff {

void NoiseSchedule::check_t(int t) const {
    if (t < 1 || t > T)
        throw ConfigError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) +
                          "]");
}

NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
    if (T < 1) throw ConfigError("schedule needs T >= 1");
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
        throw ConfigError("schedule needs 0 < beta_min <= beta_max < 1");

    NoiseSchedule s;
    s.T = T;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    s.sigma.resize(static_cast<size_t>(T));

    double abar = 1.0;
    for (int i = 0; i < T; ++i) {
        double b = (T == 1) ? beta_min : beta_min + (beta_max - beta_min) * i / (T - 1);
        s.beta[static_cast<size_t>(i)] = b;
        s.alpha[static_cast<size_t>(i)] = 1.0 - b;
        abar *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(i)] = abar;
        s.sigma[static_cast<size_t>(i)] = std::sqrt(b);
    }
    return s;
}

std::pair<double, double> scaled_beta_range(int T) {
    double scale = 1000.0 / T;
    return {1e-4 * scale, 0.02 * scale};
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    sched.check_t(t);
    if (!x0.same_shape(eps)) throw ConfigError("q_sample: eps shape must match x0");
    double ab = sched.abar(t);
    T c0 = static_cast<T>(std::sqrt(ab));
    T c1 = static_cast<T>(std::sqrt(1.0 - ab));
    Tensor<T> out(x0.shape());
    const T* x0p = x0.data();
    const T* ep = eps.data();
    T* op = out.data();
    for (int64_t i = 0, n = x0.numel(); i < n; ++i) op[i] = c0 * x0p[i] + c1 * ep[i];
    return out;
}

template <typename T>
T ddpm_loss(EpsilonModel<T>& model, const Tensor<T>& x0, int t, const Tensor<T>* cond,
            const NoiseSchedule& sched, Rng& rng, bool backprop) {
    int expected = 1 + (cond ? 1 : 0);
    if (model.in_channels() != expected)
        throw ConfigError("ddpm_loss: model expects " + std::to_string(model.in_channels()) +
                          " input channels, got " + std::to_string(expected));

    Tensor<T> eps = Tensor<T>::randn(x0.shape(), rng);
    Tensor<T> x_t = q_sample(x0, t, eps, sched);
    Tensor<T> pred = model.forward_eps(x_t, t, cond);
    if (!pred.same_shape(x0)) throw NumericError("ddpm_loss: prediction shape mismatch");

    const int64_t n = x0.numel();
    double acc = 0.0;
    const T* pp = pred.data();
    const T* ep = eps.data();
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(pp[i]) - static_cast<double>(ep[i]);
        acc += d * d;
    }
    T loss = static_cast<T>(acc / static_cast<double>(n));

    if (backprop) {
        Tensor<T> grad(pred.shape());
        T scale = static_cast<T>(2.0 / static_cast<double>(n));
        T* gp = grad.data();
        for (int64_t i = 0; i < n; ++i) gp[i] = scale * (pp[i] - ep[i]);
        model.backward_eps(grad);
    }
    return loss;
}

template <typename T>
Tensor<T> p_step(EpsilonModel<T>& model, const Tensor<T>& x_t, int t, const Tensor<T>* cond,
                 const NoiseSchedule& sched, Rng& rng) {
    sched.check_t(t);
    size_t i = static_cast<size_t>(t - 1);
    Tensor<T> eps = model.forward_eps(x_t, t, cond);

    double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[i]);
    double eps_coef = sched.beta[i] / std::sqrt(1.0 - sched.alpha_bar[i]);
    double sigma = sched.sigma[i];

    Tensor<T> out(x_t.shape());
    const T* xp = x_t.data();
    const T* ep = eps.data();
    T* op = out.data();
    for (int64_t k = 0, n = x_t.numel(); k < n; ++k) {
        double mu = inv_sqrt_alpha * (static_cast<double>(xp[k]) - eps_coef * ep[k]);
        double z = (t > 1) ? rng.normal() : 0.0;
        op[k] = static_cast<T>(mu + sigma * z);
    }
    return out;
}

template <typename T>
Tensor<T> sample(EpsilonModel<T>& model, const std::array<int, 3>& patch_shape,
                 const Tensor<T>* cond, const NoiseSchedule& sched, Rng& rng) {
    Tensor<T> x = Tensor<T>::randn({1, patch_shape[0], patch_shape[1], patch_shape[2]}, rng);
    for (int t = sched.T; t >= 1; --t) x = p_step(model, x, t, cond, sched, rng);
    return x;
}

template Tensor<float> q_sample(const Tensor<float>&, int, const Tensor<float>&,
                                const NoiseSchedule&);
template Tensor<double> q_sample(const Tensor<double>&, int, const Tensor<double>&,
                                 const NoiseSchedule&);
template float ddpm_loss(EpsilonModel<float>&, const Tensor<float>&, int, const Tensor<float>*,
                         const NoiseSchedule&, Rng&, bool);
template double ddpm_loss(EpsilonModel<double>&, const Tensor<double>&, int, const Tensor<double>*,
                          const NoiseSchedule&, Rng&, bool);
template Tensor<float> p_step(EpsilonModel<float>&, const Tensor<float>&, int, const Tensor<float>*,
                              const NoiseSchedule&, Rng&);
template Tensor<double> p_step(EpsilonModel<double>&, const Tensor<double>&, int,
                               const Tensor<double>*, const NoiseSchedule&, Rng&);
template Tensor<float> sample(EpsilonModel<float>&, const std::array<int, 3>&, const Tensor<float>*,
                              const NoiseSchedule&, Rng&);
template Tensor<double> sample(EpsilonModel<double>&, const std::array<int, 3>&,
                               const Tensor<double>*, const NoiseSchedule&, Rng&);

}  // namespace voxdiff
