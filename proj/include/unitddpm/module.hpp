#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "unitddpm/ops.hpp"
#include "unitddpm/rng.hpp"
#include "unitddpm/tensor.hpp"

namespace unitddpm {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using NamedTensors = std::vector<NamedTensor>;

// Anything that predicts the injected noise from (x_self, x_cond, t).
template <class M>
concept NoisePredictor = requires(M m, const Tensor& x, std::size_t t, NormMode mode) {
  { m.forward(x, x, t) } -> std::same_as<Tensor>;
  { m.named_parameters() } -> std::same_as<NamedTensors>;
  { m.named_buffers() } -> std::same_as<NamedTensors>;
  m.set_norm_mode(mode);
};

// Clean-image map from one domain to the other.
template <class M>
concept DomainTranslator = requires(M m, const Tensor& x, NormMode mode) {
  { m.forward(x) } -> std::same_as<Tensor>;
  { m.named_parameters() } -> std::same_as<NamedTensors>;
  { m.named_buffers() } -> std::same_as<NamedTensors>;
  m.set_norm_mode(mode);
};

template <class M>
std::vector<Tensor> parameters_of(M& model) {
  std::vector<Tensor> out;
  for (auto& nt : model.named_parameters()) out.push_back(nt.tensor);
  return out;
}

// Turns gradient tracking off for a model's parameters for the guard's
// lifetime, restoring the previous flags afterwards.
class FreezeGuard {
 public:
  template <class M>
  explicit FreezeGuard(M& model) {
    for (auto& nt : model.named_parameters()) {
      saved_.emplace_back(nt.tensor, nt.tensor.requires_grad());
      nt.tensor.set_requires_grad(false);
    }
  }
  ~FreezeGuard() {
    for (auto& [t, flag] : saved_) t.set_requires_grad(flag);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<std::pair<Tensor, bool>> saved_;
};

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t(std::move(shape), 0.0, true);
  for (double& v : t.mutable_values()) v = bound * (2.0 * rng.uniform() - 1.0);
  return t;
}

struct Conv2d {
  Tensor weight;  // [Cout, Cin, k, k]
  Tensor bias;    // [Cout]
  std::size_t stride = 1;
  std::size_t padding = 0;

  static Conv2d make(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
                     std::size_t padding, Rng& rng) {
    const std::size_t fan_in = cin * kernel * kernel;
    return {fan_in_uniform({cout, cin, kernel, kernel}, fan_in, rng), fan_in_uniform({cout}, fan_in, rng), stride,
            padding};
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }

  void collect(const std::string& prefix, NamedTensors& params) const {
    params.push_back({prefix + "weight", weight});
    params.push_back({prefix + "bias", bias});
  }
};

struct ConvTranspose2d {
  Tensor weight;  // [Cin, Cout, k, k]
  Tensor bias;    // [Cout]
  std::size_t stride = 1;
  std::size_t padding = 0;

  static ConvTranspose2d make(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
                              std::size_t padding, Rng& rng) {
    const std::size_t fan_in = cin * kernel * kernel;
    return {fan_in_uniform({cin, cout, kernel, kernel}, fan_in, rng), fan_in_uniform({cout}, fan_in, rng), stride,
            padding};
  }

  Tensor operator()(const Tensor& x) const { return conv_transpose2d(x, weight, bias, stride, padding); }

  void collect(const std::string& prefix, NamedTensors& params) const {
    params.push_back({prefix + "weight", weight});
    params.push_back({prefix + "bias", bias});
  }
};

struct BatchNorm2d {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  static BatchNorm2d make(std::size_t channels) {
    return {Tensor({channels}, 1.0, true), Tensor({channels}, 0.0, true), Tensor({channels}, 0.0),
            Tensor({channels}, 1.0)};
  }

  Tensor operator()(const Tensor& x, NormMode mode, const BatchNormOptions& opt) {
    return batch_norm(x, gamma, beta, running_mean, running_var, mode, opt);
  }

  void collect(const std::string& prefix, NamedTensors& params) const {
    params.push_back({prefix + "gamma", gamma});
    params.push_back({prefix + "beta", beta});
  }
  void collect_buffers(const std::string& prefix, NamedTensors& buffers) const {
    buffers.push_back({prefix + "running_mean", running_mean});
    buffers.push_back({prefix + "running_var", running_var});
  }
};

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  static Linear make(std::size_t in, std::size_t out, Rng& rng) {
    return {fan_in_uniform({out, in}, in, rng), fan_in_uniform({out}, in, rng)};
  }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, NamedTensors& params) const {
    params.push_back({prefix + "weight", weight});
    params.push_back({prefix + "bias", bias});
  }
};

}  // namespace unitddpm
