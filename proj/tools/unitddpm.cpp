#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "unitddpm.hpp"

namespace {

struct CommonFlags {
  std::string preset = "desk";
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  long long seed = -1;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--preset", f.preset, "built-in defaults: desk or paper")->capture_default_str();
  sub->add_option("--config", f.config, "flat key = value config file");
  sub->add_option("--set", f.sets, "override one key (key=value); repeatable")->allow_extra_args(false);
  sub->add_option("--seed", f.seed, "root random seed (overrides the seed key)");
  sub->add_option("--out", f.out, "output directory");
}

unitddpm::RunConfig effective_config(const CommonFlags& f) {
  unitddpm::RunConfig cfg = unitddpm::preset(f.preset);
  if (!f.config.empty()) unitddpm::apply_config_file(cfg, f.config);
  for (const auto& s : f.sets) unitddpm::apply_override(cfg, s);
  if (f.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(f.seed);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UNIT-DDPM: unpaired image translation with denoising diffusion models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(unitddpm::kVersion));

  using Command = std::function<int(const unitddpm::RunConfig&, const std::filesystem::path&)>;
  const std::vector<std::tuple<std::string, std::string, Command>> table = {
      {"train", "train denoisers and translators on data_root/trainA, data_root/trainB", unitddpm::cmd_train},
      {"translate", "translate input_dir with a checkpoint (direction, t_r)", unitddpm::cmd_translate},
      {"eval", "FID-style distance between real_dir and gen_dir", unitddpm::cmd_eval},
      {"ablate-tr", "release-time sweep over ablate_t_r", unitddpm::cmd_ablate_tr},
      {"make-synth", "write a synthetic trainA/trainB/testA/testB dataset", unitddpm::cmd_make_synth},
      {"show-config", "print the effective configuration and every key",
       [](const unitddpm::RunConfig& c, const std::filesystem::path&) {
         std::cout << unitddpm::echo_config(c) << "\nkeys:\n" << unitddpm::describe_keys();
         return unitddpm::kExitOk;
       }},
  };

  CommonFlags flags;
  std::map<CLI::App*, Command> handlers;
  for (const auto& [name, help, fn] : table) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub, flags);
    handlers[sub] = fn;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? unitddpm::kExitOk : unitddpm::kExitUsage;
  }

  try {
    for (auto& [sub, fn] : handlers)
      if (sub->parsed()) return fn(effective_config(flags), flags.out);
  } catch (const unitddpm::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return unitddpm::kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return unitddpm::kExitUsage;
  }
  return unitddpm::kExitUsage;
}
