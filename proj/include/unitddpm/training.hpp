#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "unitddpm/adam.hpp"
#include "unitddpm/checkpoint.hpp"
#include "unitddpm/data_io.hpp"
#include "unitddpm/errors.hpp"
#include "unitddpm/module.hpp"
#include "unitddpm/networks.hpp"
#include "unitddpm/ops.hpp"
#include "unitddpm/rng.hpp"
#include "unitddpm/schedule.hpp"

namespace unitddpm {

enum class CycleNorm { L1, L2 };

inline CycleNorm parse_cycle_norm(const std::string& s) {
  if (s == "L1" || s == "l1") return CycleNorm::L1;
  if (s == "L2" || s == "l2") return CycleNorm::L2;
  throw ConfigError("unknown cycle norm '" + s + "' (expected L1 or L2)");
}

inline std::string to_string(CycleNorm n) { return n == CycleNorm::L1 ? "L1" : "L2"; }

struct TrainConfig {
  double lambda_cyc = 10.0;
  std::size_t batch_size = 16;
  AdamConfig adam{};
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // overrides epochs when non-zero
  std::uint64_t seed = 0;
  CycleNorm cycle_norm = CycleNorm::L1;
};

inline void validate(const TrainConfig& cfg) {
  require_config(cfg.lambda_cyc >= 0.0, "lambda_cyc must be non-negative");
  require_config(cfg.batch_size >= 1, "batch_size must be positive");
  require_config(cfg.epochs >= 1 || cfg.max_steps >= 1, "epochs or max_steps must be positive");
  validate(cfg.adam);
}

// Random-stream identifiers. Every stochastic quantity is derived from the
// root generator by splitting, so any step can be recomputed in isolation.
namespace streams {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t step = 2;
inline constexpr std::uint64_t shuffle_a = 3;
inline constexpr std::uint64_t shuffle_b = 4;
inline constexpr std::uint64_t sampler = 5;
}  // namespace streams

// The t's and noises shared by both phases of one step.
struct StepSample {
  std::size_t t_a = 1;
  std::size_t t_b = 1;
  Tensor eps_a;
  Tensor eps_b;
};

inline std::size_t sample_timestep(Rng& rng, std::size_t T) { return 1 + static_cast<std::size_t>(rng.uniform_int(T)); }

inline StepSample draw_step_sample(Rng& rng, const Shape& batch_shape, std::size_t T) {
  StepSample s;
  s.t_a = sample_timestep(rng, T);
  s.t_b = sample_timestep(rng, T);
  s.eps_a = gaussian_sample(batch_shape, rng);
  s.eps_b = gaussian_sample(batch_shape, rng);
  return s;
}

namespace detail {

inline Tensor cycle_distance(const Tensor& a, const Tensor& b, CycleNorm n) {
  return n == CycleNorm::L1 ? mean_abs_error(a, b) : mean_squared_error(a, b);
}

inline void require_batches(const Tensor& xa, const Tensor& xb, const StepSample& s, const NoiseSchedule& sched) {
  require(xa.rank() == 4 && xa.shape() == xb.shape(),
          "training: batches " + shape_str(xa.shape()) + " and " + shape_str(xb.shape()) + " must match");
  require(s.eps_a.shape() == xa.shape() && s.eps_b.shape() == xa.shape(), "training: noise shape mismatch");
  sched.check_t(s.t_a);
  sched.check_t(s.t_b);
}

inline void require_finite(const Tensor& loss, const char* what) {
  if (!std::isfinite(loss.item())) throw NumericError(std::string("non-finite ") + what + " loss");
}

}  // namespace detail

// Conditional DSM objective for the denoisers. Squared norms are per-element
// means. Translator outputs are treated as data.
template <NoisePredictor D, DomainTranslator G>
Tensor denoising_loss(D& theta_a, D& theta_b, G& phi_a, G& phi_b, const Tensor& xa, const Tensor& xb,
                      const StepSample& s, const NoiseSchedule& sched) {
  detail::require_batches(xa, xb, s, sched);
  Tensor fake_b, fake_a;
  {
    NoGradGuard ng;
    fake_b = phi_a.forward(xa);
    fake_a = phi_b.forward(xb);
  }
  const Tensor pred_a = theta_a.forward(q_sample(xa, s.t_a, s.eps_a, sched), q_sample(fake_b, s.t_a, s.eps_b, sched),
                                        s.t_a);
  const Tensor pred_b = theta_b.forward(q_sample(xb, s.t_b, s.eps_b, sched), q_sample(fake_a, s.t_b, s.eps_a, sched),
                                        s.t_b);
  return add(mean_squared_error(s.eps_a, pred_a), mean_squared_error(s.eps_b, pred_b));
}

struct TranslationLoss {
  Tensor total;
  Tensor dsm;
  Tensor cycle;  // unweighted
};

// Four-term DSM objective through the translated images plus lambda_cyc times
// the two cycle terms.
template <NoisePredictor D, DomainTranslator G>
TranslationLoss translation_loss(D& theta_a, D& theta_b, G& phi_a, G& phi_b, const Tensor& xa, const Tensor& xb,
                                 const StepSample& s, const NoiseSchedule& sched, double lambda_cyc,
                                 CycleNorm cycle_norm) {
  detail::require_batches(xa, xb, s, sched);
  const Tensor fake_b = phi_a.forward(xa);
  const Tensor fake_a = phi_b.forward(xb);

  const Tensor xa_ta = q_sample(xa, s.t_a, s.eps_a, sched);
  const Tensor xb_tb = q_sample(xb, s.t_b, s.eps_b, sched);
  const Tensor fake_b_ta = q_sample(fake_b, s.t_a, s.eps_b, sched);
  const Tensor fake_a_tb = q_sample(fake_a, s.t_b, s.eps_a, sched);

  Tensor dsm = mean_squared_error(s.eps_a, theta_a.forward(xa_ta, fake_b_ta, s.t_a));
  dsm = add(dsm, mean_squared_error(s.eps_a, theta_a.forward(fake_a_tb, xb_tb, s.t_b)));
  dsm = add(dsm, mean_squared_error(s.eps_b, theta_b.forward(xb_tb, fake_a_tb, s.t_b)));
  dsm = add(dsm, mean_squared_error(s.eps_b, theta_b.forward(fake_b_ta, xa_ta, s.t_a)));

  const Tensor cycle = add(detail::cycle_distance(phi_b.forward(fake_b), xa, cycle_norm),
                           detail::cycle_distance(phi_a.forward(fake_a), xb, cycle_norm));
  return {add(dsm, scale(cycle, lambda_cyc)), dsm, cycle};
}

template <NoisePredictor D, DomainTranslator G>
struct TrainState {
  D theta_a;
  D theta_b;
  G phi_a;
  G phi_b;
  AdamState adam_theta_a;
  AdamState adam_theta_b;
  AdamState adam_phi_a;
  AdamState adam_phi_b;
  std::uint64_t step = 0;
  Rng rng{0};

  TrainState(D ta, D tb, G pa, G pb, Rng root)
      : theta_a(std::move(ta)), theta_b(std::move(tb)), phi_a(std::move(pa)), phi_b(std::move(pb)), rng(root) {
    adam_theta_a = AdamState::for_params(parameters_of(theta_a));
    adam_theta_b = AdamState::for_params(parameters_of(theta_b));
    adam_phi_a = AdamState::for_params(parameters_of(phi_a));
    adam_phi_b = AdamState::for_params(parameters_of(phi_b));
  }

  // Randomness consumed by step `k` (0-based).
  Rng step_rng(std::uint64_t k) const { return rng.split(streams::step).split(k); }
};

using UnitState = TrainState<UNetDenoiser, ResNetTranslator>;

// Fresh models from one seed: four independent initialisation streams.
inline UnitState make_train_state(const DenoiserConfig& dcfg, const TranslatorConfig& gcfg, std::uint64_t seed) {
  const Rng root(seed);
  const Rng init = root.split(streams::init);
  Rng r0 = init.split(0), r1 = init.split(1), r2 = init.split(2), r3 = init.split(3);
  return UnitState(UNetDenoiser(dcfg, r0), UNetDenoiser(dcfg, r1), ResNetTranslator(gcfg, r2),
                   ResNetTranslator(gcfg, r3), root);
}

struct StepLosses {
  double theta = 0.0;
  double phi = 0.0;
  double cycle = 0.0;
};

namespace detail {

template <class M>
void zero_grads(M& model) {
  for (auto& nt : model.named_parameters()) nt.tensor.zero_grad();
}

template <class M>
void adam_update(M& model, AdamState& state, const AdamConfig& cfg) {
  auto params = parameters_of(model);
  adam_step(std::span<Tensor>(params), state, cfg);
}

}  // namespace detail

// Denoiser update with the translators frozen; returns the denoising loss.
template <NoisePredictor D, DomainTranslator G>
double theta_phase(TrainState<D, G>& st, const Tensor& xa, const Tensor& xb, const TrainConfig& cfg,
                   const NoiseSchedule& sched, const StepSample& sample) {
  FreezeGuard fa(st.phi_a), fb(st.phi_b);
  st.theta_a.set_norm_mode(NormMode::train);
  st.theta_b.set_norm_mode(NormMode::train);
  st.phi_a.set_norm_mode(NormMode::batch_no_update);
  st.phi_b.set_norm_mode(NormMode::batch_no_update);
  const Tensor loss = denoising_loss(st.theta_a, st.theta_b, st.phi_a, st.phi_b, xa, xb, sample, sched);
  detail::require_finite(loss, "denoising");
  detail::zero_grads(st.theta_a);
  detail::zero_grads(st.theta_b);
  backward(loss);
  detail::adam_update(st.theta_a, st.adam_theta_a, cfg.adam);
  detail::adam_update(st.theta_b, st.adam_theta_b, cfg.adam);
  return loss.item();
}

// Translator update against frozen denoisers whose batch-norm layers use
// their running statistics.
template <NoisePredictor D, DomainTranslator G>
TranslationLoss phi_phase(TrainState<D, G>& st, const Tensor& xa, const Tensor& xb, const TrainConfig& cfg,
                          const NoiseSchedule& sched, const StepSample& sample) {
  FreezeGuard ta(st.theta_a), tb(st.theta_b);
  st.theta_a.set_norm_mode(NormMode::eval);
  st.theta_b.set_norm_mode(NormMode::eval);
  st.phi_a.set_norm_mode(NormMode::train);
  st.phi_b.set_norm_mode(NormMode::train);
  TranslationLoss loss = translation_loss(st.theta_a, st.theta_b, st.phi_a, st.phi_b, xa, xb, sample, sched,
                                          cfg.lambda_cyc, cfg.cycle_norm);
  detail::require_finite(loss.total, "translation");
  detail::zero_grads(st.phi_a);
  detail::zero_grads(st.phi_b);
  backward(loss.total);
  detail::adam_update(st.phi_a, st.adam_phi_a, cfg.adam);
  detail::adam_update(st.phi_b, st.adam_phi_b, cfg.adam);
  return loss;
}

// One iteration of the alternating scheme: the denoisers are updated first,
// then the translators against the updated denoisers. Both phases share
// `sample`.
template <NoisePredictor D, DomainTranslator G>
StepLosses train_step(TrainState<D, G>& st, const Tensor& xa, const Tensor& xb, const TrainConfig& cfg,
                      const NoiseSchedule& sched, const StepSample& sample) {
  StepLosses out;
  out.theta = theta_phase(st, xa, xb, cfg, sched, sample);
  const TranslationLoss phi = phi_phase(st, xa, xb, cfg, sched, sample);
  out.phi = phi.total.item();
  out.cycle = phi.cycle.item();
  ++st.step;
  return out;
}

template <NoisePredictor D, DomainTranslator G>
StepLosses train_step(TrainState<D, G>& st, const Tensor& xa, const Tensor& xb, const TrainConfig& cfg,
                      const NoiseSchedule& sched) {
  Rng r = st.step_rng(st.step);
  return train_step(st, xa, xb, cfg, sched, draw_step_sample(r, xa.shape(), sched.T));
}

// ------------------------------------------------------------------ batching

inline std::size_t steps_per_epoch(std::size_t n_a, std::size_t n_b, std::size_t batch) {
  const std::size_t n = std::min(n_a, n_b);
  return (n + batch - 1) / batch;
}

inline std::size_t total_steps(const TrainConfig& cfg, std::size_t n_a, std::size_t n_b) {
  return cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * steps_per_epoch(n_a, n_b, cfg.batch_size);
}

// Fisher-Yates with the library generator, so permutations are identical on
// every platform.
inline std::vector<std::size_t> permutation(std::size_t n, Rng rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[static_cast<std::size_t>(rng.uniform_int(i))]);
  return p;
}

struct BatchIndices {
  std::vector<std::size_t> a;
  std::vector<std::size_t> b;
};

// Items used by step k: each domain is shuffled independently per epoch and
// the epoch ends when the smaller dataset is exhausted.
inline BatchIndices batch_indices(const Rng& root, std::uint64_t k, std::size_t n_a, std::size_t n_b,
                                  std::size_t batch) {
  require_config(n_a >= 1 && n_b >= 1, "training needs non-empty datasets");
  const std::size_t spe = steps_per_epoch(n_a, n_b, batch);
  const std::uint64_t epoch = k / spe;
  const std::size_t i = static_cast<std::size_t>(k % spe);
  const std::size_t n = std::min(n_a, n_b);
  const auto pa = permutation(n_a, root.split(streams::shuffle_a).split(epoch));
  const auto pb = permutation(n_b, root.split(streams::shuffle_b).split(epoch));
  BatchIndices out;
  for (std::size_t j = i * batch; j < std::min(n, (i + 1) * batch); ++j) {
    out.a.push_back(pa[j]);
    out.b.push_back(pb[j]);
  }
  return out;
}

// ------------------------------------------------------------- persistence

namespace detail {

template <class M>
void add_model(TensorContainer& c, const std::string& prefix, const M& model) {
  for (const auto& nt : model.named_parameters()) c.add(prefix + nt.name, nt.tensor);
  for (const auto& nt : model.named_buffers()) c.add(prefix + nt.name, nt.tensor);
}

template <class M>
void add_adam(TensorContainer& c, const std::string& prefix, const M& model, const AdamState& s) {
  const auto params = model.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& shape = params[i].tensor.shape();
    c.records.push_back({prefix + "m/" + params[i].name, shape, s.first_moment[i]});
    c.records.push_back({prefix + "v/" + params[i].name, shape, s.second_moment[i]});
  }
  c.records.push_back({prefix + "step_count", {1}, {static_cast<double>(s.step_count)}});
}

template <class M>
void load_model(const TensorContainer& c, const std::string& prefix, M& model) {
  for (auto& nt : model.named_parameters()) load_into(c, prefix + nt.name, nt.tensor);
  for (auto& nt : model.named_buffers()) load_into(c, prefix + nt.name, nt.tensor);
}

template <class M>
void load_adam(const TensorContainer& c, const std::string& prefix, const M& model, AdamState& s) {
  const auto params = model.named_parameters();
  s = AdamState::for_params(parameters_of(model));
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (auto [tag, dst] : {std::pair{"m/", &s.first_moment[i]}, std::pair{"v/", &s.second_moment[i]}}) {
      const auto& r = c.at(prefix + tag + params[i].name);
      if (r.values.size() != dst->size())
        throw IoError("record '" + r.name + "' has " + std::to_string(r.values.size()) + " values, expected " +
                      std::to_string(dst->size()));
      *dst = r.values;
    }
  }
  s.step_count = static_cast<std::int64_t>(c.at(prefix + "step_count").values.at(0));
}

}  // namespace detail

template <NoisePredictor D, DomainTranslator G>
TensorContainer to_container(const TrainState<D, G>& st, const std::string& config_text) {
  TensorContainer c;
  c.step = st.step;
  c.config = config_text;
  c.rng = st.rng.state();
  detail::add_model(c, "theta_A/", st.theta_a);
  detail::add_model(c, "theta_B/", st.theta_b);
  detail::add_model(c, "phi_A/", st.phi_a);
  detail::add_model(c, "phi_B/", st.phi_b);
  detail::add_adam(c, "adam/theta_A/", st.theta_a, st.adam_theta_a);
  detail::add_adam(c, "adam/theta_B/", st.theta_b, st.adam_theta_b);
  detail::add_adam(c, "adam/phi_A/", st.phi_a, st.adam_phi_a);
  detail::add_adam(c, "adam/phi_B/", st.phi_b, st.adam_phi_b);
  return c;
}

// Restores parameters, buffers, optimiser moments, step and generator into
// models that already have the checkpoint's architecture.
template <NoisePredictor D, DomainTranslator G>
void from_container(const TensorContainer& c, TrainState<D, G>& st) {
  detail::load_model(c, "theta_A/", st.theta_a);
  detail::load_model(c, "theta_B/", st.theta_b);
  detail::load_model(c, "phi_A/", st.phi_a);
  detail::load_model(c, "phi_B/", st.phi_b);
  detail::load_adam(c, "adam/theta_A/", st.theta_a, st.adam_theta_a);
  detail::load_adam(c, "adam/theta_B/", st.theta_b, st.adam_theta_b);
  detail::load_adam(c, "adam/phi_A/", st.phi_a, st.adam_phi_a);
  detail::load_adam(c, "adam/phi_B/", st.phi_b, st.adam_phi_b);
  st.step = c.step;
  st.rng = Rng::from_state(c.rng);
}

template <NoisePredictor D, DomainTranslator G>
void save_train_state(const std::filesystem::path& path, const TrainState<D, G>& st, const std::string& config_text) {
  write_container(path, to_container(st, config_text));
}

template <NoisePredictor D, DomainTranslator G>
void load_train_state(const std::filesystem::path& path, TrainState<D, G>& st) {
  from_container(read_container(path), st);
}

// ------------------------------------------------------------------- loop

inline std::string checkpoint_name(std::uint64_t step) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "checkpoint_%06llu.ckpt", static_cast<unsigned long long>(step));
  return buf;
}

inline std::string format_metrics_row(std::uint64_t step, const StepLosses& l) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%llu, %.17g, %.17g, %.17g", static_cast<unsigned long long>(step), l.theta, l.phi,
                l.cycle);
  return buf;
}

struct LoopOptions {
  std::filesystem::path out_dir;     // empty: no files are written
  std::size_t checkpoint_every = 0;  // 0: initial and final checkpoints only
  std::string config_text;           // echoed into every checkpoint
  std::function<void(std::uint64_t, const StepLosses&)> on_step;
};

namespace detail {

// Keeps only rows up to `step`, so a resumed run rewrites the tail.
inline void trim_metrics(const std::filesystem::path& path, std::uint64_t step) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) <= step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

}  // namespace detail

// Runs from st.step up to the configured step count. Returns the losses of
// the last executed step (all zero if none ran).
template <NoisePredictor D, DomainTranslator G>
StepLosses train_loop(TrainState<D, G>& st, const ImageDataset& a, const ImageDataset& b, const TrainConfig& cfg,
                      const NoiseSchedule& sched, const LoopOptions& opt = {}) {
  validate(cfg);
  require_config(!a.empty() && !b.empty(), "training needs non-empty datasets for both domains");
  require_config(a.image_shape() == b.image_shape(), "domain A images " + shape_str(a.image_shape()) +
                                                         " and domain B images " + shape_str(b.image_shape()) +
                                                         " differ in shape");
  const std::size_t steps = total_steps(cfg, a.size(), b.size());
  const bool files = !opt.out_dir.empty();
  std::ofstream metrics;
  if (files) {
    std::filesystem::create_directories(opt.out_dir);
    const auto mpath = opt.out_dir / "metrics.txt";
    if (st.step == 0) {
      metrics.open(mpath, std::ios::trunc);
    } else {
      detail::trim_metrics(mpath, st.step);
      metrics.open(mpath, std::ios::app);
    }
    if (!metrics) throw IoError("cannot open '" + mpath.string() + "' for writing");
    if (st.step == 0) save_train_state(opt.out_dir / checkpoint_name(0), st, opt.config_text);
  }
  StepLosses last;
  while (st.step < steps) {
    const auto idx = batch_indices(st.rng, st.step, a.size(), b.size(), cfg.batch_size);
    const Tensor xa = stack_batch(a, idx.a), xb = stack_batch(b, idx.b);
    try {
      last = train_step(st, xa, xb, cfg, sched);
    } catch (const NumericError& e) {
      if (!files) throw;
      const auto dump = opt.out_dir / "nan_dump.ckpt";
      save_train_state(dump, st, opt.config_text);
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(st.step + 1) + "; state written to '" +
                         dump.string() + "'");
    }
    if (files) {
      metrics << format_metrics_row(st.step, last) << "\n" << std::flush;
      const bool periodic = opt.checkpoint_every > 0 && st.step % opt.checkpoint_every == 0;
      if (periodic || st.step == steps) save_train_state(opt.out_dir / checkpoint_name(st.step), st, opt.config_text);
    }
    if (opt.on_step) opt.on_step(st.step, last);
  }
  return last;
}

}  // namespace unitddpm
