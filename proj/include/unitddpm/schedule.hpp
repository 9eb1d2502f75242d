#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "unitddpm/errors.hpp"
#include "unitddpm/ops.hpp"
#include "unitddpm/tensor.hpp"

namespace unitddpm {

// Scaling in front of the posterior mean. `standard` is 1/sqrt(alpha_t);
// `as_printed` reproduces the 1/sqrt(1 - alpha_t) variant of the inference
// pseudocode for comparison runs.
enum class PosteriorVariant { standard, as_printed };

// Tables indexed by timestep t in 1..T (use the accessors; storage is 0-based).
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;
  PosteriorVariant variant = PosteriorVariant::standard;

  void check_t(std::size_t t) const {
    require(t >= 1 && t <= T, "timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
  double alpha_at(std::size_t t) const { check_t(t); return alpha[t - 1]; }
  double alpha_bar_at(std::size_t t) const { check_t(t); return alpha_bar[t - 1]; }
  double sigma_at(std::size_t t) const { check_t(t); return sigma[t - 1]; }
};

// alpha decreases linearly from alpha_first (t = 1) to alpha_last (t = T).
inline NoiseSchedule make_linear_schedule(std::size_t T, double alpha_first, double alpha_last) {
  require_config(T >= 1, "schedule: T must be at least 1");
  require_config(alpha_last > 0.0 && alpha_first < 1.0 && alpha_last <= alpha_first,
                 "schedule: need 0 < alpha_last <= alpha_first < 1");
  NoiseSchedule s;
  s.T = T;
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.sigma.resize(T);
  s.alpha[0] = alpha_first;
  for (std::size_t i = 1; i < T; ++i)
    s.alpha[i] = alpha_first - static_cast<double>(i) * (alpha_first - alpha_last) / static_cast<double>(T - 1);
  if (T > 1) s.alpha[T - 1] = alpha_last;
  for (std::size_t i = 0; i < T; ++i) {
    s.alpha_bar[i] = i == 0 ? s.alpha[0] : s.alpha_bar[i - 1] * s.alpha[i];
    s.sigma[i] = std::sqrt(1.0 - s.alpha[i]);
  }
  return s;
}

// Endpoints for a shorter chain: the per-step noise 1 - alpha is scaled by
// reference_T / T so the chain still ends near pure noise.
struct AlphaEndpoints {
  double first;
  double last;
};

inline AlphaEndpoints rescale_endpoints(double alpha_first, double alpha_last, std::size_t reference_T,
                                        std::size_t T) {
  require_config(T >= 1 && reference_T >= 1, "rescale_endpoints: chain lengths must be positive");
  const double factor = static_cast<double>(reference_T) / static_cast<double>(T);
  const AlphaEndpoints e{1.0 - (1.0 - alpha_first) * factor, 1.0 - (1.0 - alpha_last) * factor};
  require_config(e.last > 0.0, "rescale_endpoints: rescaled alpha_last is not positive");
  return e;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; differentiable in x0 and eps.
inline Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& s) {
  require(x0.shape() == eps.shape(),
          "q_sample: noise shape " + shape_str(eps.shape()) + " differs from " + shape_str(x0.shape()));
  const double ab = s.alpha_bar_at(t);
  return axpby(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps);
}

inline double posterior_mean_scale(std::size_t t, const NoiseSchedule& s) {
  const double a = s.alpha_at(t);
  return s.variant == PosteriorVariant::standard ? 1.0 / std::sqrt(a) : 1.0 / std::sqrt(1.0 - a);
}

// mu = c_t (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat)
inline Tensor posterior_mean(const Tensor& x_t, const Tensor& eps_hat, std::size_t t, const NoiseSchedule& s) {
  require(x_t.shape() == eps_hat.shape(), "posterior_mean: shape mismatch " + shape_str(x_t.shape()) + " vs " +
                                              shape_str(eps_hat.shape()));
  const double a = s.alpha_at(t);
  const double c = posterior_mean_scale(t, s);
  return axpby(c, x_t, -c * (1.0 - a) / std::sqrt(1.0 - s.alpha_bar_at(t)), eps_hat);
}

// x_{t-1} = mu + sigma_t z. Callers pass z = 0 at t = 1.
inline Tensor reverse_step(const Tensor& x_t, const Tensor& eps_hat, const Tensor& z, std::size_t t,
                           const NoiseSchedule& s) {
  require(z.shape() == x_t.shape(), "reverse_step: noise shape mismatch");
  return axpby(1.0, posterior_mean(x_t, eps_hat, t, s), s.sigma_at(t), z);
}

}  // namespace unitddpm
