#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "unitddpm/errors.hpp"
#include "unitddpm/tensor.hpp"

namespace unitddpm {

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step_count = 0;

  // Zero moments shaped like `params`.
  static AdamState for_params(std::span<const Tensor> params) {
    AdamState s;
    for (const auto& p : params) {
      s.first_moment.emplace_back(p.numel(), 0.0);
      s.second_moment.emplace_back(p.numel(), 0.0);
    }
    return s;
  }
};

inline void validate(const AdamConfig& cfg) {
  require_config(cfg.lr >= 0.0, "adam: learning rate must be non-negative");
  require_config(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0, "adam: beta1 must lie in [0, 1)");
  require_config(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0, "adam: beta2 must lie in [0, 1)");
  require_config(cfg.eps > 0.0, "adam: eps must be positive");
}

// One bias-corrected Adam update over parallel spans of parameters and
// gradients. The step counter is shared by every tensor in the group.
inline void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
                      AdamState& state, const AdamConfig& cfg) {
  validate(cfg);
  require(params.size() == grads.size(), "adam_step: parameter/gradient count mismatch");
  require(state.first_moment.size() == params.size() && state.second_moment.size() == params.size(),
          "adam_step: optimiser state does not match parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].size() == grads[i].size() && state.first_moment[i].size() == params[i].size() &&
                state.second_moment[i].size() == params[i].size(),
            "adam_step: shape mismatch in parameter " + std::to_string(i));
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double g = grads[i][j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[j] / bias1;
      const double v_hat = v[j] / bias2;
      params[i][j] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

// Tensor form: reads each parameter's accumulated gradient.
inline void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& cfg) {
  std::vector<std::span<double>> ps;
  std::vector<std::span<const double>> gs;
  for (auto& p : params) {
    ps.push_back(p.mutable_values());
    gs.push_back(p.grad());
  }
  adam_step(std::span<const std::span<double>>(ps), std::span<const std::span<const double>>(gs), state, cfg);
}

}  // namespace unitddpm
