#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "unitddpm/checkpoint.hpp"
#include "unitddpm/config.hpp"
#include "unitddpm/data_io.hpp"
#include "unitddpm/errors.hpp"
#include "unitddpm/evaluation.hpp"
#include "unitddpm/sampler.hpp"
#include "unitddpm/training.hpp"

namespace unitddpm {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumeric = 2;

namespace detail {

inline void require_key(const std::string& value, const std::string& key, const std::string& hint) {
  if (value.empty()) throw ConfigError("missing required key '" + key + "' (" + hint + ")");
}

inline std::filesystem::path require_out(const std::filesystem::path& out, const std::string& command) {
  if (out.empty()) throw ConfigError(command + ": --out DIR is required");
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec || !std::filesystem::is_directory(out)) throw IoError("cannot create output directory '" + out.string() + "'");
  return out;
}

inline std::string config_banner(const std::string& command, const RunConfig& cfg) {
  return "# unitddpm " + std::string(kVersion) + "\n# command: " + command +
         "\n# seed: " + std::to_string(cfg.train.seed) + "\n";
}

inline void write_echo(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg) {
  std::ofstream os(dir / "config.txt", std::ios::trunc);
  if (!os) throw IoError("cannot write '" + (dir / "config.txt").string() + "'");
  os << config_banner(command, cfg) << echo_config(cfg);
}

inline std::string stem_of(const std::string& name) { return std::filesystem::path(name).stem().string(); }

}  // namespace detail

// Models plus the configuration they were trained with.
struct LoadedCheckpoint {
  RunConfig model_cfg;
  UnitState state;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorContainer c = read_container(path);
  RunConfig mc;
  apply_config_text(mc, c.config, path.string() + " (embedded config)");
  validate(mc);
  UnitState st = make_train_state(denoiser_config_from(mc), translator_config_from(mc), mc.train.seed);
  from_container(c, st);
  return {std::move(mc), std::move(st)};
}

// Runs the chain over `sources` in chunks; chunk k uses its own derived seed.
inline Tensor translate_all(UnitState& st, const Tensor& sources, bool a_to_b, std::size_t t_r, std::uint64_t seed,
                            std::size_t chunk, const NoiseSchedule& sched) {
  const std::size_t n = sources.dim(0);
  const std::size_t per = sources.numel() / n;
  std::vector<double> out;
  out.reserve(sources.numel());
  for (std::size_t k = 0; k * chunk < n; ++k) {
    const std::size_t lo = k * chunk, hi = std::min(n, lo + chunk);
    Tensor part({hi - lo, sources.dim(1), sources.dim(2), sources.dim(3)},
                std::vector<double>(sources.values().begin() + static_cast<std::ptrdiff_t>(lo * per),
                                    sources.values().begin() + static_cast<std::ptrdiff_t>(hi * per)));
    SamplerConfig sc;
    sc.t_r = t_r;
    Rng derive = Rng(seed).split(streams::sampler).split(k);
    sc.seed = derive.next_u64();
    const Tensor y = a_to_b ? translate(st.theta_a, st.theta_b, part, sc, sched)
                            : translate_reverse_direction(st.theta_a, st.theta_b, part, sc, sched);
    out.insert(out.end(), y.values().begin(), y.values().end());
  }
  return Tensor(sources.shape(), std::move(out));
}

inline int cmd_train(const RunConfig& cfg, const std::filesystem::path& out_arg) {
  validate(cfg);
  detail::require_key(cfg.data_root, "data_root", "directory holding trainA/ and trainB/");
  const auto out = detail::require_out(out_arg, "train");
  const std::filesystem::path root(cfg.data_root);
  for (const char* sub : {"trainA", "trainB"})
    if (!std::filesystem::is_directory(root / sub))
      throw IoError("data_root = " + cfg.data_root + ": '" + (root / sub).string() + "' is not a directory");
  const ImageDataset a = load_folder(root / "trainA", cfg.image_size, cfg.channels, 'A');
  const ImageDataset b = load_folder(root / "trainB", cfg.image_size, cfg.channels, 'B');
  const NoiseSchedule sched = schedule_from(cfg);

  UnitState st = make_train_state(denoiser_config_from(cfg), translator_config_from(cfg), cfg.train.seed);
  if (!cfg.checkpoint.empty()) {
    load_train_state(cfg.checkpoint, st);
    std::cout << "resuming from '" << cfg.checkpoint << "' at step " << st.step << "\n";
  }
  detail::write_echo(out, "train", cfg);
  const std::string echo = detail::config_banner("train", cfg) + echo_config(cfg);
  const std::size_t steps = total_steps(cfg.train, a.size(), b.size());
  std::cout << "train: " << a.size() << " A images, " << b.size() << " B images, " << steps << " steps\n";

  LoopOptions opt;
  opt.out_dir = out;
  opt.checkpoint_every = cfg.checkpoint_every;
  opt.config_text = echo;
  opt.on_step = [steps](std::uint64_t step, const StepLosses& l) {
    if (step % 100 == 0 || step == steps) {
      std::printf("step %llu/%zu  loss_theta %.6f  loss_phi %.6f  loss_cyc %.6f\n",
                  static_cast<unsigned long long>(step), steps, l.theta, l.phi, l.cycle);
      std::fflush(stdout);
    }
  };
  train_loop(st, a, b, cfg.train, sched, opt);
  std::cout << "wrote " << (out / checkpoint_name(st.step)).string() << "\n";
  return kExitOk;
}

inline int cmd_translate(const RunConfig& cfg, const std::filesystem::path& out_arg) {
  detail::require_key(cfg.checkpoint, "checkpoint", "trained checkpoint file");
  detail::require_key(cfg.input_dir, "input_dir", "directory of source images");
  const auto out = detail::require_out(out_arg, "translate");
  LoadedCheckpoint ck = load_checkpoint(cfg.checkpoint);
  const RunConfig& mc = ck.model_cfg;
  require_config(cfg.t_r >= 1 && cfg.t_r <= mc.T,
                 "t_r = " + std::to_string(cfg.t_r) + " outside [1, " + std::to_string(mc.T) + "]");
  const ImageDataset src = load_folder_native(cfg.input_dir, mc.channels);
  const Shape expected{mc.channels, mc.image_size, mc.image_size};
  if (src.image_shape() != expected)
    throw ConfigError("input images are " + shape_str(src.image_shape()) + " but the checkpoint expects " +
                      shape_str(expected));
  const NoiseSchedule sched = schedule_from(mc);
  const bool a2b = cfg.direction == "A2B";
  const Tensor y = translate_all(ck.state, stack_all(src), a2b, cfg.t_r, cfg.train.seed, cfg.translate_batch, sched);
  std::vector<std::string> names;
  for (const auto& n : src.names) names.push_back(detail::stem_of(n) + "_" + cfg.direction);
  save_images(unstack(y), out, "", names);
  detail::write_echo(out, "translate", cfg);
  std::cout << "translated " << src.size() << " images (" << cfg.direction << ", t_r = " << cfg.t_r << ") into '"
            << out.string() << "'\n";
  return kExitOk;
}

inline int cmd_eval(const RunConfig& cfg, const std::filesystem::path& out_arg) {
  detail::require_key(cfg.real_dir, "real_dir", "reference image directory");
  detail::require_key(cfg.gen_dir, "gen_dir", "generated image directory");
  std::filesystem::path report_path;
  if (!out_arg.empty()) report_path = detail::require_out(out_arg, "eval") / "fid_report.txt";
  const FidReport r = fid_report(cfg.real_dir, cfg.gen_dir, cfg.extractor, report_path, cfg.direction, cfg.channels);
  for (const auto& s : r.skipped) std::cerr << "skipped: " << s << "\n";
  std::cout << format_fid_row(r) << "\n";
  if (!out_arg.empty()) detail::write_echo(out_arg, "eval", cfg);
  return kExitOk;
}

inline int cmd_ablate_tr(const RunConfig& cfg, const std::filesystem::path& out_arg) {
  detail::require_key(cfg.checkpoint, "checkpoint", "trained checkpoint file");
  detail::require_key(cfg.input_dir, "input_dir", "directory of source images");
  detail::require_key(cfg.real_dir, "real_dir", "target-domain reference images");
  const auto out = detail::require_out(out_arg, "ablate-tr");
  LoadedCheckpoint ck = load_checkpoint(cfg.checkpoint);
  const RunConfig& mc = ck.model_cfg;
  const ImageDataset src = load_folder(cfg.input_dir, mc.image_size, mc.channels);
  const ImageDataset real = load_folder(cfg.real_dir, mc.image_size, mc.channels);
  const NoiseSchedule sched = schedule_from(mc);
  const std::vector<std::size_t> list = cfg.ablate_t_r.empty() ? default_release_times(mc.T) : cfg.ablate_t_r;
  const Tensor sources = stack_all(src), reference = stack_all(real);
  const bool a2b = cfg.direction == "A2B";

  std::vector<std::size_t> sorted = list;
  for (auto t : sorted)
    require_config(t >= 1 && t <= mc.T, "ablate_t_r: " + std::to_string(t) + " outside [1, " + std::to_string(mc.T) + "]");
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<AblationRow> rows;
  for (auto t_r : sorted) {
    const Tensor y = translate_all(ck.state, sources, a2b, t_r, cfg.train.seed, cfg.translate_batch, sched);
    rows.push_back({t_r, fid_between(reference, y, cfg.extractor).distance});
    std::printf("t_r %zu: FID %.6f\n", t_r, rows.back().metric);
    std::fflush(stdout);
  }
  write_ablation(out / "ablation.txt", out / "ablation.dat", rows, "FID_" + to_string(cfg.extractor));
  detail::write_echo(out, "ablate-tr", cfg);
  std::cout << format_ablation_table(rows, "FID_" + to_string(cfg.extractor));
  return kExitOk;
}

inline int cmd_make_synth(const RunConfig& cfg, const std::filesystem::path& out_arg) {
  const auto out = detail::require_out(out_arg, "make-synth");
  const SyntheticDomains train = make_synthetic_domains(cfg.synth_kind, cfg.synth_n, cfg.synth_size, cfg.train.seed);
  const SyntheticDomains test =
      make_synthetic_test_split(cfg.synth_kind, cfg.synth_test_n, cfg.synth_size, cfg.train.seed);
  save_images(train.a.items, out / "trainA", "", train.a.names);
  save_images(train.b.items, out / "trainB", "", train.b.names);
  save_images(test.a.items, out / "testA", "", test.a.names);
  save_images(test.b.items, out / "testB", "", test.b.names);
  detail::write_echo(out, "make-synth", cfg);
  std::cout << "wrote " << cfg.synth_n << " + " << cfg.synth_n << " training and " << cfg.synth_test_n << " + "
            << cfg.synth_test_n << " test images (" << to_string(cfg.synth_kind) << ") under '" << out.string()
            << "'\n";
  return kExitOk;
}

}  // namespace unitddpm
