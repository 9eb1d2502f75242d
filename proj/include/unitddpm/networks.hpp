#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "unitddpm/errors.hpp"
#include "unitddpm/module.hpp"
#include "unitddpm/ops.hpp"
#include "unitddpm/rng.hpp"
#include "unitddpm/tensor.hpp"

namespace unitddpm {

struct TimestepEmbedding {
  std::size_t dim = 32;
  double max_period = 10000.0;
};

// Transformer-style sinusoid: [sin(t w_0..w_{d/2-1}), cos(t w_0..w_{d/2-1})],
// w_i = max_period^(-2i/dim).
inline std::vector<double> embed_timestep(std::size_t t, const TimestepEmbedding& emb) {
  require_config(emb.dim > 0 && emb.dim % 2 == 0,
                 "timestep embedding dimension must be even and positive, got " + std::to_string(emb.dim));
  const std::size_t half = emb.dim / 2;
  std::vector<double> out(emb.dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double omega =
        std::pow(emb.max_period, -2.0 * static_cast<double>(i) / static_cast<double>(emb.dim));
    out[i] = std::sin(static_cast<double>(t) * omega);
    out[half + i] = std::cos(static_cast<double>(t) * omega);
  }
  return out;
}

struct DenoiserConfig {
  std::size_t channels = 1;
  // One entry per resolution level; the spatial size halves between levels.
  std::vector<std::size_t> widths{32, 64, 128};
  TimestepEmbedding embedding{};
  BatchNormOptions norm{};
};

struct TranslatorConfig {
  std::size_t channels = 1;
  std::size_t width = 32;
  std::size_t blocks = 3;
  bool final_tanh = true;
  BatchNormOptions norm{};
};

namespace detail {

// BatchNorm -> ReLU -> conv, the ordering used throughout the U-Net.
struct PreActDown {
  BatchNorm2d norm;
  Conv2d conv;
};

struct PreActUp {
  BatchNorm2d norm;
  ConvTranspose2d conv;
};

struct TimeResBlock {
  BatchNorm2d norm1;
  Conv2d conv1;
  Linear time_proj;
  BatchNorm2d norm2;
  Conv2d conv2;
  std::optional<Conv2d> skip;

  static TimeResBlock make(std::size_t in, std::size_t out, std::size_t emb_dim, Rng& rng) {
    TimeResBlock b{BatchNorm2d::make(in),  Conv2d::make(in, out, 3, 1, 1, rng), Linear::make(emb_dim, out, rng),
                   BatchNorm2d::make(out), Conv2d::make(out, out, 3, 1, 1, rng), std::nullopt};
    if (in != out) b.skip = Conv2d::make(in, out, 1, 1, 0, rng);
    return b;
  }

  Tensor forward(const Tensor& x, const Tensor& emb, NormMode mode, const BatchNormOptions& opt) {
    Tensor h = conv1(relu(norm1(x, mode, opt)));
    h = add_channel_bias(h, time_proj(emb).reshape({conv1.weight.dim(0)}));
    h = conv2(relu(norm2(h, mode, opt)));
    return add(skip ? (*skip)(x) : x, h);
  }

  void collect(const std::string& p, NamedTensors& params) const {
    norm1.collect(p + "norm1.", params);
    conv1.collect(p + "conv1.", params);
    time_proj.collect(p + "time_proj.", params);
    norm2.collect(p + "norm2.", params);
    conv2.collect(p + "conv2.", params);
    if (skip) skip->collect(p + "skip.", params);
  }
  void collect_buffers(const std::string& p, NamedTensors& buffers) const {
    norm1.collect_buffers(p + "norm1.", buffers);
    norm2.collect_buffers(p + "norm2.", buffers);
  }
};

}  // namespace detail

// Conditional noise predictor. The self-domain image and the conditioning
// image are concatenated along channels at the input; the timestep enters
// each residual block through a learned projection of its sinusoid.
class UNetDenoiser {
 public:
  UNetDenoiser(DenoiserConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    require_config(cfg_.channels >= 1, "denoiser: channels must be positive");
    require_config(!cfg_.widths.empty(), "denoiser: at least one level width is required");
    for (auto w : cfg_.widths) require_config(w >= 1, "denoiser: level widths must be positive");
    embed_timestep(0, cfg_.embedding);  // validates the embedding size
    const auto& w = cfg_.widths;
    const std::size_t levels = w.size();
    const std::size_t emb = cfg_.embedding.dim;
    stem_ = Conv2d::make(2 * cfg_.channels, w[0], 3, 1, 1, rng);
    for (std::size_t i = 0; i < levels; ++i) {
      down_blocks_.push_back(detail::TimeResBlock::make(w[i], w[i], emb, rng));
      if (i + 1 < levels)
        downsamplers_.push_back({BatchNorm2d::make(w[i]), Conv2d::make(w[i], w[i + 1], 4, 2, 1, rng)});
    }
    for (std::size_t lvl = levels - 1; lvl-- > 0;) {
      upsamplers_.push_back({BatchNorm2d::make(w[lvl + 1]), ConvTranspose2d::make(w[lvl + 1], w[lvl], 4, 2, 1, rng)});
      up_blocks_.push_back(detail::TimeResBlock::make(2 * w[lvl], w[lvl], emb, rng));
    }
    out_norm_ = BatchNorm2d::make(w[0]);
    out_conv_ = Conv2d::make(w[0], cfg_.channels, 3, 1, 1, rng);
  }

  const DenoiserConfig& config() const { return cfg_; }
  NormMode norm_mode() const { return mode_; }
  void set_norm_mode(NormMode mode) { mode_ = mode; }

  std::size_t spatial_multiple() const { return std::size_t{1} << (cfg_.widths.size() - 1); }

  Tensor forward(const Tensor& x_self, const Tensor& x_cond, std::size_t t) {
    require(x_self.rank() == 4 && x_self.shape() == x_cond.shape(),
            "denoiser: x_self " + shape_str(x_self.shape()) + " and x_cond " + shape_str(x_cond.shape()) +
                " must be equal [B,C,H,W] shapes");
    require(x_self.dim(1) == cfg_.channels, "denoiser: expected " + std::to_string(cfg_.channels) +
                                                " channels, got " + shape_str(x_self.shape()));
    const std::size_t m = spatial_multiple();
    require_config(x_self.dim(2) % m == 0 && x_self.dim(3) % m == 0,
                   "denoiser: spatial size " + std::to_string(x_self.dim(2)) + "x" + std::to_string(x_self.dim(3)) +
                       " is not divisible by " + std::to_string(m));
    const Tensor emb({1, cfg_.embedding.dim}, embed_timestep(t, cfg_.embedding));
    const auto& opt = cfg_.norm;

    Tensor h = stem_(concat_channels(x_self, x_cond));
    std::vector<Tensor> skips;
    for (std::size_t i = 0; i < down_blocks_.size(); ++i) {
      h = down_blocks_[i].forward(h, emb, mode_, opt);
      if (i < downsamplers_.size()) {
        skips.push_back(h);
        h = downsamplers_[i].conv(relu(downsamplers_[i].norm(h, mode_, opt)));
      }
    }
    for (std::size_t j = 0; j < up_blocks_.size(); ++j) {
      h = upsamplers_[j].conv(relu(upsamplers_[j].norm(h, mode_, opt)));
      h = concat_channels(h, skips[skips.size() - 1 - j]);
      h = up_blocks_[j].forward(h, emb, mode_, opt);
    }
    return out_conv_(relu(out_norm_(h, mode_, opt)));
  }

  NamedTensors named_parameters() const {
    NamedTensors p;
    stem_.collect("stem.", p);
    for (std::size_t i = 0; i < down_blocks_.size(); ++i) {
      down_blocks_[i].collect("down." + std::to_string(i) + ".", p);
      if (i < downsamplers_.size()) {
        downsamplers_[i].norm.collect("downsample." + std::to_string(i) + ".norm.", p);
        downsamplers_[i].conv.collect("downsample." + std::to_string(i) + ".conv.", p);
      }
    }
    for (std::size_t j = 0; j < up_blocks_.size(); ++j) {
      upsamplers_[j].norm.collect("upsample." + std::to_string(j) + ".norm.", p);
      upsamplers_[j].conv.collect("upsample." + std::to_string(j) + ".conv.", p);
      up_blocks_[j].collect("up." + std::to_string(j) + ".", p);
    }
    out_norm_.collect("out.norm.", p);
    out_conv_.collect("out.conv.", p);
    return p;
  }

  NamedTensors named_buffers() const {
    NamedTensors b;
    for (std::size_t i = 0; i < down_blocks_.size(); ++i) {
      down_blocks_[i].collect_buffers("down." + std::to_string(i) + ".", b);
      if (i < downsamplers_.size())
        downsamplers_[i].norm.collect_buffers("downsample." + std::to_string(i) + ".norm.", b);
    }
    for (std::size_t j = 0; j < up_blocks_.size(); ++j) {
      upsamplers_[j].norm.collect_buffers("upsample." + std::to_string(j) + ".norm.", b);
      up_blocks_[j].collect_buffers("up." + std::to_string(j) + ".", b);
    }
    out_norm_.collect_buffers("out.norm.", b);
    return b;
  }

 private:
  DenoiserConfig cfg_;
  NormMode mode_ = NormMode::train;
  Conv2d stem_;
  std::vector<detail::TimeResBlock> down_blocks_;
  std::vector<detail::PreActDown> downsamplers_;
  std::vector<detail::PreActUp> upsamplers_;
  std::vector<detail::TimeResBlock> up_blocks_;
  BatchNorm2d out_norm_;
  Conv2d out_conv_;
};

// Residual clean-image translator: entry conv, `blocks` residual blocks
// (conv-BN-ReLU-conv-BN plus identity), exit conv, optional tanh.
class ResNetTranslator {
 public:
  ResNetTranslator(TranslatorConfig cfg, Rng& rng) : cfg_(cfg) {
    require_config(cfg_.channels >= 1 && cfg_.width >= 1, "translator: channels and width must be positive");
    entry_ = Conv2d::make(cfg_.channels, cfg_.width, 3, 1, 1, rng);
    for (std::size_t i = 0; i < cfg_.blocks; ++i)
      blocks_.push_back({Conv2d::make(cfg_.width, cfg_.width, 3, 1, 1, rng), BatchNorm2d::make(cfg_.width),
                         Conv2d::make(cfg_.width, cfg_.width, 3, 1, 1, rng), BatchNorm2d::make(cfg_.width)});
    exit_ = Conv2d::make(cfg_.width, cfg_.channels, 3, 1, 1, rng);
  }

  const TranslatorConfig& config() const { return cfg_; }
  NormMode norm_mode() const { return mode_; }
  void set_norm_mode(NormMode mode) { mode_ = mode; }

  Tensor forward(const Tensor& x) {
    require(x.rank() == 4 && x.dim(1) == cfg_.channels,
            "translator: expected [B," + std::to_string(cfg_.channels) + ",H,W], got " + shape_str(x.shape()));
    Tensor h = entry_(x);
    for (auto& b : blocks_) {
      Tensor r = b.norm2(b.conv2(relu(b.norm1(b.conv1(h), mode_, cfg_.norm))), mode_, cfg_.norm);
      h = add(h, r);
    }
    Tensor out = exit_(h);
    return cfg_.final_tanh ? unitddpm::tanh(out) : out;
  }

  NamedTensors named_parameters() const {
    NamedTensors p;
    entry_.collect("entry.", p);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string pre = "block." + std::to_string(i) + ".";
      blocks_[i].conv1.collect(pre + "conv1.", p);
      blocks_[i].norm1.collect(pre + "norm1.", p);
      blocks_[i].conv2.collect(pre + "conv2.", p);
      blocks_[i].norm2.collect(pre + "norm2.", p);
    }
    exit_.collect("exit.", p);
    return p;
  }

  NamedTensors named_buffers() const {
    NamedTensors b;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string pre = "block." + std::to_string(i) + ".";
      blocks_[i].norm1.collect_buffers(pre + "norm1.", b);
      blocks_[i].norm2.collect_buffers(pre + "norm2.", b);
    }
    return b;
  }

 private:
  struct Block {
    Conv2d conv1;
    BatchNorm2d norm1;
    Conv2d conv2;
    BatchNorm2d norm2;
  };

  TranslatorConfig cfg_;
  NormMode mode_ = NormMode::train;
  Conv2d entry_;
  std::vector<Block> blocks_;
  Conv2d exit_;
};

static_assert(NoisePredictor<UNetDenoiser>);
static_assert(DomainTranslator<ResNetTranslator>);

}  // namespace unitddpm
