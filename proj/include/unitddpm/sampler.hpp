#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "unitddpm/checkpoint.hpp"
#include "unitddpm/errors.hpp"
#include "unitddpm/module.hpp"
#include "unitddpm/ops.hpp"
#include "unitddpm/rng.hpp"
#include "unitddpm/schedule.hpp"

namespace unitddpm {

struct SamplerConfig {
  std::size_t t_r = 1;
  std::uint64_t seed = 0;
  bool record_trajectory = false;  // fills the caller's Trajectory when one is passed
  std::filesystem::path failure_dump;  // trajectory written here on non-finite states
};

// One side of the chain, indexed by t = 0..T. `eps_hat[t]` and `z[t]` are set
// where states[t-1] came from a reverse step at t; `q_noise[t]` is set where
// states[t] was drawn from the forward process around the clean input.
struct SideTrajectory {
  std::vector<Tensor> states;
  std::vector<Tensor> eps_hat;
  std::vector<Tensor> z;
  std::vector<Tensor> q_noise;

  explicit SideTrajectory(std::size_t T = 0) : states(T + 1), eps_hat(T + 1), z(T + 1), q_noise(T + 1) {}
};

struct Trajectory {
  std::size_t T = 0;
  std::size_t t_r = 1;
  SideTrajectory source;
  SideTrajectory target;
};

inline void write_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
  TensorContainer c;
  c.step = 0;
  c.config = "T = " + std::to_string(traj.T) + "\nt_r = " + std::to_string(traj.t_r) + "\n";
  auto add_side = [&](const std::string& side, const SideTrajectory& s) {
    for (std::size_t t = 0; t < s.states.size(); ++t) {
      char tag[16];
      std::snprintf(tag, sizeof(tag), "t%04zu", t);
      const std::string base = side + "/" + tag + "/";
      if (s.states[t].defined()) c.add(base + "state", s.states[t]);
      if (s.eps_hat[t].defined()) c.add(base + "eps_hat", s.eps_hat[t]);
      if (s.z[t].defined()) c.add(base + "z", s.z[t]);
      if (s.q_noise[t].defined()) c.add(base + "q_noise", s.q_noise[t]);
    }
  };
  add_side("source", traj.source);
  add_side("target", traj.target);
  write_container(path, c);
}

namespace detail {

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace detail

// Release-time-conditioned reverse chain from the source domain into the
// target domain.
//
// For t = T..t_r+1 the source state is redrawn around the clean input with
// fresh noise while the target takes a reverse step conditioned on it. The
// source state at t_r is then drawn the same way, and for t = t_r..1 both
// sides take reverse steps, each conditioned on the other's state at t.
// Noise is zero on the final step.
template <NoisePredictor D>
Tensor translate(D& theta_src, D& theta_tgt, const Tensor& x_src0, const SamplerConfig& cfg,
                 const NoiseSchedule& sched, Trajectory* trajectory = nullptr) {
  const std::size_t T = sched.T;
  require_config(cfg.t_r >= 1 && cfg.t_r <= T,
                 "release time " + std::to_string(cfg.t_r) + " outside [1, " + std::to_string(T) + "]");
  require(x_src0.rank() == 4, "translate: expected a [B,C,H,W] batch, got " + shape_str(x_src0.shape()));
  NoGradGuard ng;
  theta_src.set_norm_mode(NormMode::eval);
  theta_tgt.set_norm_mode(NormMode::eval);

  const bool record = (cfg.record_trajectory && trajectory) || !cfg.failure_dump.empty();
  Trajectory traj{T, cfg.t_r, SideTrajectory(record ? T : 0), SideTrajectory(record ? T : 0)};
  const Shape shape = x_src0.shape();
  const Tensor zero(shape, 0.0);
  Rng rng(cfg.seed);

  auto check = [&](const Tensor& x, const char* side, std::size_t t) {
    if (detail::all_finite(x)) return;
    std::string msg = std::string("non-finite ") + side + " state at t = " + std::to_string(t);
    if (!cfg.failure_dump.empty()) {
      write_trajectory(cfg.failure_dump, traj);
      msg += "; trajectory written to '" + cfg.failure_dump.string() + "'";
    }
    throw NumericError(msg);
  };

  Tensor tgt = gaussian_sample(shape, rng);
  Tensor src;
  if (record) traj.target.states[T] = tgt;

  for (std::size_t t = T; t > cfg.t_r; --t) {
    const Tensor eps_a = gaussian_sample(shape, rng);
    const Tensor eps_b = gaussian_sample(shape, rng);
    src = q_sample(x_src0, t, eps_a, sched);
    const Tensor eps_hat = theta_tgt.forward(tgt, src, t);
    const Tensor next = reverse_step(tgt, eps_hat, eps_b, t, sched);
    if (record) {
      traj.source.states[t] = src;
      traj.source.q_noise[t] = eps_a;
      traj.target.eps_hat[t] = eps_hat;
      traj.target.z[t] = eps_b;
      traj.target.states[t - 1] = next;
    }
    tgt = next;
    check(tgt, "target", t - 1);
  }

  {
    const Tensor eps = gaussian_sample(shape, rng);
    src = q_sample(x_src0, cfg.t_r, eps, sched);
    if (record) {
      traj.source.states[cfg.t_r] = src;
      traj.source.q_noise[cfg.t_r] = eps;
    }
  }

  for (std::size_t t = cfg.t_r; t >= 1; --t) {
    Tensor z_a = zero, z_b = zero;
    if (t > 1) {
      z_a = gaussian_sample(shape, rng);
      z_b = gaussian_sample(shape, rng);
    }
    const Tensor eh_a = theta_src.forward(src, tgt, t);
    const Tensor eh_b = theta_tgt.forward(tgt, src, t);
    const Tensor src_next = reverse_step(src, eh_a, z_a, t, sched);
    const Tensor tgt_next = reverse_step(tgt, eh_b, z_b, t, sched);
    if (record) {
      traj.source.eps_hat[t] = eh_a;
      traj.source.z[t] = z_a;
      traj.source.states[t - 1] = src_next;
      traj.target.eps_hat[t] = eh_b;
      traj.target.z[t] = z_b;
      traj.target.states[t - 1] = tgt_next;
    }
    src = src_next;
    tgt = tgt_next;
    check(src, "source", t - 1);
    check(tgt, "target", t - 1);
  }

  if (trajectory) *trajectory = std::move(traj);
  return tgt;
}

// B -> A: the same chain with the roles of the two denoisers exchanged.
template <NoisePredictor D>
Tensor translate_reverse_direction(D& theta_a, D& theta_b, const Tensor& x_b0, const SamplerConfig& cfg,
                                   const NoiseSchedule& sched, Trajectory* trajectory = nullptr) {
  return translate(theta_b, theta_a, x_b0, cfg, sched, trajectory);
}

// ------------------------------------------------------------- ablation

struct AblationRow {
  std::size_t t_r = 1;
  double metric = 0.0;
};

// {1, 100, 300, 500, 700, 900} rescaled from a 1000-step chain to T.
inline std::vector<std::size_t> default_release_times(std::size_t T) {
  std::vector<std::size_t> out;
  for (double v : {1.0, 100.0, 300.0, 500.0, 700.0, 900.0}) {
    const auto t = static_cast<std::size_t>(std::llround(v * static_cast<double>(T) / 1000.0));
    out.push_back(std::clamp<std::size_t>(t, 1, T));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Translates `sources` once per release time with the same seed and scores
// each output set with `eval_fn`. Rows come back sorted by t_r.
template <NoisePredictor D>
std::vector<AblationRow> ablate_release_time(D& theta_src, D& theta_tgt, const Tensor& sources,
                                             std::vector<std::size_t> t_r_list, const NoiseSchedule& sched,
                                             const std::function<double(const Tensor&)>& eval_fn,
                                             std::uint64_t seed) {
  require_config(!t_r_list.empty(), "ablation needs at least one release time");
  for (auto t : t_r_list)
    require_config(t >= 1 && t <= sched.T,
                   "release time " + std::to_string(t) + " outside [1, " + std::to_string(sched.T) + "]");
  std::sort(t_r_list.begin(), t_r_list.end());
  t_r_list.erase(std::unique(t_r_list.begin(), t_r_list.end()), t_r_list.end());
  std::vector<AblationRow> rows;
  for (auto t_r : t_r_list) {
    SamplerConfig cfg;
    cfg.t_r = t_r;
    cfg.seed = seed;
    rows.push_back({t_r, eval_fn(translate(theta_src, theta_tgt, sources, cfg, sched))});
  }
  return rows;
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows, const std::string& metric_name) {
  std::string out = "t_r, " + metric_name + "\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu, %.10g\n", r.t_r, r.metric);
    out += buf;
  }
  return out;
}

// Table as text plus a whitespace-separated data file for plotting.
inline void write_ablation(const std::filesystem::path& table_path, const std::filesystem::path& data_path,
                           const std::vector<AblationRow>& rows, const std::string& metric_name) {
  for (const auto& p : {table_path, data_path})
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream table(table_path, std::ios::trunc);
  std::ofstream data(data_path, std::ios::trunc);
  if (!table || !data) throw IoError("cannot write ablation output next to '" + table_path.string() + "'");
  table << format_ablation_table(rows, metric_name);
  data << "# t_r " << metric_name << "\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu %.17g\n", r.t_r, r.metric);
    data << buf;
  }
}

}  // namespace unitddpm
