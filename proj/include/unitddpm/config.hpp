#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "unitddpm/errors.hpp"
#include "unitddpm/evaluation.hpp"
#include "unitddpm/networks.hpp"
#include "unitddpm/schedule.hpp"
#include "unitddpm/training.hpp"

namespace unitddpm {

inline constexpr const char* kVersion = "1.0.0";

// Everything a command needs, as one flat record. Every field has a key in
// the table built by config_keys().
struct RunConfig {
  // data
  std::string data_root;
  std::size_t image_size = 16;
  std::size_t channels = 1;
  // schedule
  std::size_t T = 50;
  double alpha_first = 0.9999;
  double alpha_last = 0.98;
  std::size_t alpha_reference_T = 1000;
  PosteriorVariant posterior_variant = PosteriorVariant::standard;
  // denoiser
  std::vector<std::size_t> denoiser_widths{16, 32, 64};
  std::size_t embedding_dim = 32;
  double embedding_max_period = 10000.0;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  // translator
  std::size_t translator_width = 16;
  std::size_t translator_blocks = 3;
  bool translator_tanh = true;
  // training
  TrainConfig train{};
  std::size_t checkpoint_every = 500;
  // sampling and evaluation
  std::size_t t_r = 1;
  std::vector<std::size_t> ablate_t_r{};
  Extractor extractor = Extractor::fixed_random_conv;
  std::string checkpoint;
  std::string input_dir;
  std::string real_dir;
  std::string gen_dir;
  std::string direction = "A2B";
  std::size_t translate_batch = 64;
  // synthetic data
  SyntheticKind synth_kind = SyntheticKind::invert;
  std::size_t synth_n = 256;
  std::size_t synth_test_n = 64;
  std::size_t synth_size = 16;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::size_t parse_size(const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

inline double parse_double(const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string& v) {
  std::vector<std::size_t> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v + ",");
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (item.empty()) throw ConfigError("empty entry in list '" + v + "'");
    out.push_back(parse_size(item));
  }
  return out;
}

inline std::string format_size_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::string doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto size_key = [&](const char* name, const char* doc, std::size_t RunConfig::*m) {
      k.push_back({name, doc, [m](RunConfig& c, const std::string& v) { c.*m = parse_size(v); },
                   [m](const RunConfig& c) { return std::to_string(c.*m); }});
    };
    auto double_key = [&](const char* name, const char* doc, double RunConfig::*m) {
      k.push_back({name, doc, [m](RunConfig& c, const std::string& v) { c.*m = parse_double(v); },
                   [m](const RunConfig& c) { return format_double(c.*m); }});
    };
    auto string_key = [&](const char* name, const char* doc, std::string RunConfig::*m) {
      k.push_back({name, doc, [m](RunConfig& c, const std::string& v) { c.*m = v; },
                   [m](const RunConfig& c) { return c.*m; }});
    };

    string_key("data_root", "dataset root holding trainA/ trainB/ testA/ testB/", &RunConfig::data_root);
    size_key("image_size", "images are resized to image_size x image_size", &RunConfig::image_size);
    size_key("channels", "1 (gray) or 3 (RGB)", &RunConfig::channels);

    size_key("T", "diffusion chain length", &RunConfig::T);
    double_key("alpha_first", "alpha_1 of the reference chain", &RunConfig::alpha_first);
    double_key("alpha_last", "alpha_T of the reference chain", &RunConfig::alpha_last);
    size_key("alpha_reference_T", "chain length the endpoints refer to; 1 - alpha is rescaled to T",
             &RunConfig::alpha_reference_T);
    k.push_back({"posterior_variant", "standard (1/sqrt(alpha_t)) or as_printed (1/sqrt(1 - alpha_t))",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "standard") c.posterior_variant = PosteriorVariant::standard;
                   else if (v == "as_printed") c.posterior_variant = PosteriorVariant::as_printed;
                   else throw ConfigError("expected standard or as_printed, got '" + v + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.posterior_variant == PosteriorVariant::standard ? "standard" : "as_printed");
                 }});

    k.push_back({"denoiser_widths", "comma-separated U-Net level widths",
                 [](RunConfig& c, const std::string& v) { c.denoiser_widths = parse_size_list(v); },
                 [](const RunConfig& c) { return format_size_list(c.denoiser_widths); }});
    size_key("embedding_dim", "sinusoidal timestep embedding size (even)", &RunConfig::embedding_dim);
    double_key("embedding_max_period", "embedding frequency base", &RunConfig::embedding_max_period);
    double_key("bn_momentum", "batch-norm running-statistics momentum", &RunConfig::bn_momentum);
    double_key("bn_eps", "batch-norm epsilon", &RunConfig::bn_eps);

    size_key("translator_width", "translator feature width", &RunConfig::translator_width);
    size_key("translator_blocks", "translator residual blocks", &RunConfig::translator_blocks);
    k.push_back({"translator_tanh", "tanh on the translator output",
                 [](RunConfig& c, const std::string& v) { c.translator_tanh = parse_bool(v); },
                 [](const RunConfig& c) { return std::string(c.translator_tanh ? "true" : "false"); }});

    k.push_back({"lambda_cyc", "cycle-consistency weight",
                 [](RunConfig& c, const std::string& v) { c.train.lambda_cyc = parse_double(v); },
                 [](const RunConfig& c) { return format_double(c.train.lambda_cyc); }});
    k.push_back({"batch_size", "images per domain per step",
                 [](RunConfig& c, const std::string& v) { c.train.batch_size = parse_size(v); },
                 [](const RunConfig& c) { return std::to_string(c.train.batch_size); }});
    k.push_back({"lr", "Adam learning rate",
                 [](RunConfig& c, const std::string& v) { c.train.adam.lr = parse_double(v); },
                 [](const RunConfig& c) { return format_double(c.train.adam.lr); }});
    k.push_back({"beta1", "Adam beta1",
                 [](RunConfig& c, const std::string& v) { c.train.adam.beta1 = parse_double(v); },
                 [](const RunConfig& c) { return format_double(c.train.adam.beta1); }});
    k.push_back({"beta2", "Adam beta2",
                 [](RunConfig& c, const std::string& v) { c.train.adam.beta2 = parse_double(v); },
                 [](const RunConfig& c) { return format_double(c.train.adam.beta2); }});
    k.push_back({"adam_eps", "Adam epsilon",
                 [](RunConfig& c, const std::string& v) { c.train.adam.eps = parse_double(v); },
                 [](const RunConfig& c) { return format_double(c.train.adam.eps); }});
    k.push_back({"epochs", "passes over the smaller training set (ignored when max_steps > 0)",
                 [](RunConfig& c, const std::string& v) { c.train.epochs = parse_size(v); },
                 [](const RunConfig& c) { return std::to_string(c.train.epochs); }});
    k.push_back({"max_steps", "training steps; 0 uses epochs",
                 [](RunConfig& c, const std::string& v) { c.train.max_steps = parse_size(v); },
                 [](const RunConfig& c) { return std::to_string(c.train.max_steps); }});
    k.push_back({"seed", "root random seed",
                 [](RunConfig& c, const std::string& v) { c.train.seed = parse_size(v); },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    k.push_back({"cycle_norm", "L1 or L2",
                 [](RunConfig& c, const std::string& v) { c.train.cycle_norm = parse_cycle_norm(v); },
                 [](const RunConfig& c) { return to_string(c.train.cycle_norm); }});
    size_key("checkpoint_every", "steps between checkpoints; 0 writes initial and final only",
             &RunConfig::checkpoint_every);

    size_key("t_r", "release time for translate", &RunConfig::t_r);
    k.push_back({"ablate_t_r", "comma-separated release times; empty uses the rescaled default sweep",
                 [](RunConfig& c, const std::string& v) { c.ablate_t_r = parse_size_list(v); },
                 [](const RunConfig& c) { return format_size_list(c.ablate_t_r); }});
    k.push_back({"extractor", "raw_pixels, pooled_stats or fixed_random_conv",
                 [](RunConfig& c, const std::string& v) { c.extractor = parse_extractor(v); },
                 [](const RunConfig& c) { return to_string(c.extractor); }});
    string_key("checkpoint", "checkpoint file for translate and ablate-tr", &RunConfig::checkpoint);
    string_key("input_dir", "source images for translate and ablate-tr", &RunConfig::input_dir);
    string_key("real_dir", "reference images for eval and ablate-tr", &RunConfig::real_dir);
    string_key("gen_dir", "generated images for eval", &RunConfig::gen_dir);
    k.push_back({"direction", "A2B or B2A",
                 [](RunConfig& c, const std::string& v) {
                   if (v != "A2B" && v != "B2A") throw ConfigError("expected A2B or B2A, got '" + v + "'");
                   c.direction = v;
                 },
                 [](const RunConfig& c) { return c.direction; }});
    size_key("translate_batch", "images per sampling chain batch", &RunConfig::translate_batch);

    k.push_back({"synth_kind", "invert, shift_bright or blobs_to_edges",
                 [](RunConfig& c, const std::string& v) { c.synth_kind = parse_synthetic_kind(v); },
                 [](const RunConfig& c) { return to_string(c.synth_kind); }});
    size_key("synth_n", "training images per synthetic domain", &RunConfig::synth_n);
    size_key("synth_test_n", "paired test images", &RunConfig::synth_test_n);
    size_key("synth_size", "synthetic image size", &RunConfig::synth_size);
    return k;
  }();
  return keys;
}

inline const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

inline void set_value(RunConfig& cfg, const std::string& key, const std::string& value,
                      const std::string& where = "") {
  const std::string at = where.empty() ? "" : where + ": ";
  const ConfigKey* k = find_key(key);
  if (!k) throw ConfigError(at + "unknown key '" + key + "'");
  try {
    k->set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError(at + key + ": " + e.what());
  }
}

// "key=value" as given to --set.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  set_value(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)),
            "--set " + assignment);
}

// `key = value` lines; `#` starts a comment.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source) {
  std::stringstream ss(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(ss, line);) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
    set_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)), where);
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  apply_config_text(cfg, ss.str(), path.string());
}

inline RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "desk") {
    c.train.batch_size = 8;
    c.train.max_steps = 2000;
    c.train.adam.lr = 2e-4;
    return c;
  }
  if (name == "paper") {
    c.image_size = 64;
    c.channels = 3;
    c.T = 1000;
    c.denoiser_widths = {64, 128, 256, 512};
    c.translator_width = 64;
    c.translator_blocks = 4;
    c.train.batch_size = 16;
    c.train.adam.lr = 1e-5;
    c.train.epochs = 20000;
    c.train.max_steps = 0;
    c.checkpoint_every = 10000;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

// Every key, in table order; parsing the result reproduces `cfg`.
inline std::string echo_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline std::string describe_keys() {
  std::string out;
  const RunConfig d = preset("desk");
  for (const auto& k : config_keys()) out += "  " + k.name + " (desk default: " + k.get(d) + ")\n      " + k.doc + "\n";
  return out;
}

// --------------------------------------------------------- derived pieces

inline NoiseSchedule schedule_from(const RunConfig& c) {
  require_config(c.T >= 1, "T must be at least 1");
  AlphaEndpoints e{c.alpha_first, c.alpha_last};
  if (c.T != c.alpha_reference_T) e = rescale_endpoints(c.alpha_first, c.alpha_last, c.alpha_reference_T, c.T);
  NoiseSchedule s = make_linear_schedule(c.T, e.first, e.last);
  s.variant = c.posterior_variant;
  return s;
}

inline BatchNormOptions norm_from(const RunConfig& c) {
  BatchNormOptions o;
  o.momentum = c.bn_momentum;
  o.eps = c.bn_eps;
  return o;
}

inline DenoiserConfig denoiser_config_from(const RunConfig& c) {
  DenoiserConfig d;
  d.channels = c.channels;
  d.widths = c.denoiser_widths;
  d.embedding.dim = c.embedding_dim;
  d.embedding.max_period = c.embedding_max_period;
  d.norm = norm_from(c);
  return d;
}

inline TranslatorConfig translator_config_from(const RunConfig& c) {
  TranslatorConfig t;
  t.channels = c.channels;
  t.width = c.translator_width;
  t.blocks = c.translator_blocks;
  t.final_tanh = c.translator_tanh;
  t.norm = norm_from(c);
  return t;
}

inline void validate(const RunConfig& c) {
  require_config(c.channels == 1 || c.channels == 3, "channels must be 1 or 3");
  require_config(c.image_size >= 1, "image_size must be positive");
  require_config(!c.denoiser_widths.empty(), "denoiser_widths must list at least one width");
  const std::size_t m = std::size_t{1} << (c.denoiser_widths.size() - 1);
  require_config(c.image_size % m == 0, "image_size " + std::to_string(c.image_size) + " is not divisible by " +
                                            std::to_string(m) + " (denoiser depth " +
                                            std::to_string(c.denoiser_widths.size()) + ")");
  require_config(c.t_r >= 1 && c.t_r <= c.T, "t_r must lie in [1, T]");
  require_config(c.translate_batch >= 1, "translate_batch must be positive");
  validate(c.train);
}

}  // namespace unitddpm
