#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "unitddpm/errors.hpp"
#include "unitddpm/rng.hpp"
#include "unitddpm/tensor.hpp"

namespace unitddpm {

// Images [C,H,W] with values in [-1, 1].
struct ImageDataset {
  std::vector<Tensor> items;
  std::vector<std::string> names;
  char domain_tag = 'A';

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  Shape image_shape() const { return items.empty() ? Shape{} : items.front().shape(); }

  void validate() const {
    require(items.size() == names.size(), "dataset: item and name counts differ");
    for (std::size_t i = 0; i < items.size(); ++i) {
      require(items[i].rank() == 3 && items[i].shape() == items.front().shape(),
              "dataset: item '" + names[i] + "' has shape " + shape_str(items[i].shape()) + ", expected " +
                  shape_str(items.front().shape()));
      for (double v : items[i].values())
        require(v >= -1.0 && v <= 1.0, "dataset: item '" + names[i] + "' has values outside [-1, 1]");
    }
  }
};

// Stacks the selected items into a [B,C,H,W] batch.
inline Tensor stack_batch(const ImageDataset& ds, std::span<const std::size_t> indices) {
  require(!indices.empty(), "stack_batch: no indices");
  const Shape s = ds.image_shape();
  const std::size_t per = shape_numel(s);
  std::vector<double> out(indices.size() * per);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < ds.size(), "stack_batch: index out of range");
    std::copy_n(ds.items[indices[i]].values().data(), per, out.data() + i * per);
  }
  return Tensor({indices.size(), s[0], s[1], s[2]}, std::move(out));
}

inline Tensor stack_all(const ImageDataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return stack_batch(ds, idx);
}

// Splits a [B,C,H,W] batch back into [C,H,W] items.
inline std::vector<Tensor> unstack(const Tensor& batch) {
  require(batch.rank() == 4, "unstack: expected [B,C,H,W]");
  const std::size_t per = batch.numel() / batch.dim(0);
  std::vector<Tensor> out;
  for (std::size_t b = 0; b < batch.dim(0); ++b)
    out.emplace_back(Shape{batch.dim(1), batch.dim(2), batch.dim(3)},
                     std::vector<double>(batch.values().begin() + static_cast<std::ptrdiff_t>(b * per),
                                         batch.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * per)));
  return out;
}

// ------------------------------------------------------------------ 8-bit I/O

struct Image8 {
  std::size_t width = 0, height = 0, channels = 0;  // channels is 1 or 3
  std::vector<std::uint8_t> pixels;                 // row-major, interleaved
};

inline Image8 read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw IoError("cannot decode '" + path.string() + "': " + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out{img.width, img.height, color ? 3u : 1u, {}};
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  png_color background{0, 0, 0};
  if (!png_image_finish_read(&img, &background, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode '" + path.string() + "': " + msg);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image8& im) {
  require(im.channels == 1 || im.channels == 3, "write_png: only gray or RGB images are supported");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, im.pixels.data(), 0, nullptr))
    throw IoError("cannot write '" + path.string() + "': " + img.message);
}

// Bilinear resampling with half-pixel centres and edge clamping.
inline std::vector<double> resize_bilinear(std::span<const double> plane, std::size_t h, std::size_t w,
                                           std::size_t out_h, std::size_t out_w) {
  std::vector<double> out(out_h * out_w);
  if (h == out_h && w == out_w) {
    std::copy(plane.begin(), plane.end(), out.begin());
    return out;
  }
  auto sample_axis = [](std::size_t o, std::size_t in, std::size_t n_out, std::size_t& i0, std::size_t& i1,
                        double& frac) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(n_out) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(src));
    i1 = std::min(i0 + 1, in - 1);
    frac = src - static_cast<double>(i0);
  };
  for (std::size_t oi = 0; oi < out_h; ++oi) {
    std::size_t r0, r1;
    double fr;
    sample_axis(oi, h, out_h, r0, r1, fr);
    for (std::size_t oj = 0; oj < out_w; ++oj) {
      std::size_t c0, c1;
      double fc;
      sample_axis(oj, w, out_w, c0, c1, fc);
      const double top = (1 - fc) * plane[r0 * w + c0] + fc * plane[r0 * w + c1];
      const double bot = (1 - fc) * plane[r1 * w + c0] + fc * plane[r1 * w + c1];
      out[oi * out_w + oj] = (1 - fr) * top + fr * bot;
    }
  }
  return out;
}

inline double byte_to_unit(std::uint8_t p) { return static_cast<double>(p) / 127.5 - 1.0; }

// round((x + 1) * 127.5) with halves rounded up, clamped to [0, 255].
inline std::uint8_t unit_to_byte(double x) {
  const double v = std::floor((x + 1.0) * 127.5 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

// Decoded 8-bit image -> [channels, out_h, out_w] tensor in [-1, 1]. Colour
// input is averaged to gray when channels == 1; gray input is replicated
// when channels == 3.
inline Tensor image_to_tensor(const Image8& im, std::size_t out_h, std::size_t out_w, std::size_t channels) {
  require_config(channels == 1 || channels == 3, "channels must be 1 or 3");
  std::vector<std::vector<double>> planes(im.channels, std::vector<double>(im.width * im.height));
  for (std::size_t i = 0; i < im.width * im.height; ++i)
    for (std::size_t c = 0; c < im.channels; ++c) planes[c][i] = static_cast<double>(im.pixels[i * im.channels + c]);
  std::vector<std::vector<double>> src;
  if (channels == im.channels) {
    src = planes;
  } else if (channels == 1) {
    std::vector<double> g(im.width * im.height, 0.0);
    for (const auto& p : planes)
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += p[i] / static_cast<double>(planes.size());
    src.push_back(std::move(g));
  } else {
    src.assign(3, planes[0]);
  }
  std::vector<double> out;
  out.reserve(channels * out_h * out_w);
  for (auto& p : src) {
    auto r = resize_bilinear(p, im.height, im.width, out_h, out_w);
    for (double v : r) out.push_back(v / 127.5 - 1.0);
  }
  return Tensor({channels, out_h, out_w}, std::move(out));
}

inline Tensor image_to_tensor(const Image8& im, std::size_t size, std::size_t channels) {
  return image_to_tensor(im, size, size, channels);
}

inline Image8 tensor_to_image(const Tensor& img) {
  require(img.rank() == 3 && (img.dim(0) == 1 || img.dim(0) == 3),
          "tensor_to_image: expected [1|3,H,W], got " + shape_str(img.shape()));
  Image8 out{img.dim(2), img.dim(1), img.dim(0), {}};
  out.pixels.resize(img.numel());
  const std::size_t plane = out.width * out.height;
  for (std::size_t c = 0; c < out.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) out.pixels[i * out.channels + c] = unit_to_byte(img[c * plane + i]);
  return out;
}

struct LoadReport {
  std::vector<std::string> skipped;
};

namespace detail {

inline std::vector<std::filesystem::path> sorted_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a readable directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
  return files;
}

// size == 0 keeps each image's native extent; all images must then agree.
inline ImageDataset load_images(const std::filesystem::path& dir, std::size_t size, std::size_t channels,
                                char domain_tag, LoadReport* report) {
  ImageDataset ds;
  ds.domain_tag = domain_tag;
  for (const auto& f : sorted_files(dir)) {
    Image8 im;
    try {
      im = read_png(f);
    } catch (const IoError& e) {
      std::cerr << "warning: skipping " << e.what() << "\n";
      if (report) report->skipped.push_back(f.filename().string());
      continue;
    }
    Tensor t = size ? image_to_tensor(im, size, channels) : image_to_tensor(im, im.height, im.width, channels);
    if (!ds.empty() && t.shape() != ds.image_shape())
      throw ConfigError("image '" + f.filename().string() + "' has shape " + shape_str(t.shape()) + " but '" +
                        ds.names.front() + "' has " + shape_str(ds.image_shape()));
    ds.items.push_back(std::move(t));
    ds.names.push_back(f.filename().string());
  }
  if (ds.empty()) throw IoError("no decodable images in '" + dir.string() + "'");
  return ds;
}

}  // namespace detail

// Every decodable image in `dir`, resized to size x size, in lexicographic
// file-name order.
inline ImageDataset load_folder(const std::filesystem::path& dir, std::size_t size, std::size_t channels,
                                char domain_tag = 'A', LoadReport* report = nullptr) {
  require_config(size >= 1, "load_folder: size must be positive");
  return detail::load_images(dir, size, channels, domain_tag, report);
}

// As load_folder but without resampling; mixed image sizes are rejected.
inline ImageDataset load_folder_native(const std::filesystem::path& dir, std::size_t channels,
                                       LoadReport* report = nullptr) {
  return detail::load_images(dir, 0, channels, 'A', report);
}

// One PNG per item: `<prefix><name-or-index>.png`.
inline std::vector<std::filesystem::path> save_images(const std::vector<Tensor>& images,
                                                      const std::filesystem::path& dir, const std::string& prefix,
                                                      const std::vector<std::string>& names = {}) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::string stem;
    if (i < names.size()) {
      stem = names[i];
    } else {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%05zu", i);
      stem = buf;
    }
    const auto path = dir / (prefix + stem + ".png");
    write_png(path, tensor_to_image(images[i]));
    written.push_back(path);
  }
  return written;
}

// ------------------------------------------------------ synthetic domain pairs

enum class SyntheticKind { invert, shift_bright, blobs_to_edges };

inline SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "invert") return SyntheticKind::invert;
  if (s == "shift_bright") return SyntheticKind::shift_bright;
  if (s == "blobs_to_edges") return SyntheticKind::blobs_to_edges;
  throw ConfigError("unknown synthetic kind '" + s + "' (expected invert, shift_bright or blobs_to_edges)");
}

inline std::string to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::invert: return "invert";
    case SyntheticKind::shift_bright: return "shift_bright";
    case SyntheticKind::blobs_to_edges: return "blobs_to_edges";
  }
  return "?";
}

namespace detail {

// Sum of 1-3 Gaussian bumps, clipped to [0, 1].
inline std::vector<double> soft_blobs(Rng& rng, std::size_t size) {
  std::vector<double> v(size * size, 0.0);
  const double s = static_cast<double>(size);
  const auto count = 1 + rng.uniform_int(3);
  for (std::uint64_t k = 0; k < count; ++k) {
    const double cy = s * (0.15 + 0.7 * rng.uniform()), cx = s * (0.15 + 0.7 * rng.uniform());
    const double sigma = s * (0.1 + 0.15 * rng.uniform());
    const double amp = 0.6 + 0.4 * rng.uniform();
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        const double dy = static_cast<double>(i) + 0.5 - cy, dx = static_cast<double>(j) + 0.5 - cx;
        v[i * size + j] += amp * std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
      }
  }
  for (double& x : v) x = std::min(x, 1.0);
  return v;
}

// 1-3 filled discs, {0, 1}.
inline std::vector<double> hard_blobs(Rng& rng, std::size_t size) {
  std::vector<double> v(size * size, 0.0);
  const double s = static_cast<double>(size);
  const auto count = 1 + rng.uniform_int(3);
  for (std::uint64_t k = 0; k < count; ++k) {
    const double cy = s * (0.2 + 0.6 * rng.uniform()), cx = s * (0.2 + 0.6 * rng.uniform());
    const double r = s * (0.15 + 0.15 * rng.uniform());
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        const double dy = static_cast<double>(i) + 0.5 - cy, dx = static_cast<double>(j) + 0.5 - cx;
        if (dy * dy + dx * dx <= r * r) v[i * size + j] = 1.0;
      }
  }
  return v;
}

inline Tensor source_style_image(SyntheticKind kind, Rng& rng, std::size_t size) {
  std::vector<double> v;
  switch (kind) {
    case SyntheticKind::invert:
      v = soft_blobs(rng, size);
      for (double& x : v) x = -0.9 + 1.8 * x;
      break;
    case SyntheticKind::shift_bright:
      v = soft_blobs(rng, size);
      for (double& x : v) x = -1.0 + 1.5 * x;
      break;
    case SyntheticKind::blobs_to_edges:
      v = hard_blobs(rng, size);
      for (double& x : v) x = 2.0 * x - 1.0;
      break;
  }
  return Tensor({1, size, size}, std::move(v));
}

// Sobel gradient magnitude with replicated borders, mapped to
// 2 * min(1, |g| / 8) - 1.
inline void edge_filter_plane(const double* in, std::size_t h, std::size_t w, double* out) {
  auto at = [&](long i, long j) {
    i = std::clamp(i, 0L, static_cast<long>(h) - 1);
    j = std::clamp(j, 0L, static_cast<long>(w) - 1);
    return in[i * static_cast<long>(w) + j];
  };
  for (long i = 0; i < static_cast<long>(h); ++i)
    for (long j = 0; j < static_cast<long>(w); ++j) {
      const double gx = (at(i - 1, j + 1) + 2 * at(i, j + 1) + at(i + 1, j + 1)) -
                        (at(i - 1, j - 1) + 2 * at(i, j - 1) + at(i + 1, j - 1));
      const double gy = (at(i + 1, j - 1) + 2 * at(i + 1, j) + at(i + 1, j + 1)) -
                        (at(i - 1, j - 1) + 2 * at(i - 1, j) + at(i - 1, j + 1));
      out[i * static_cast<long>(w) + j] = 2.0 * std::min(1.0, std::sqrt(gx * gx + gy * gy) / 8.0) - 1.0;
    }
}

}  // namespace detail

// Ground-truth A -> B map for a synthetic pair. Works on [C,H,W] or [B,C,H,W].
inline Tensor apply_oracle(SyntheticKind kind, const Tensor& x) {
  require(x.rank() >= 2, "apply_oracle: need at least two dimensions");
  std::vector<double> out(x.values().begin(), x.values().end());
  switch (kind) {
    case SyntheticKind::invert:
      for (double& v : out) v = -v;
      break;
    case SyntheticKind::shift_bright:
      for (double& v : out) v = std::clamp(v + 0.5, -1.0, 1.0);
      break;
    case SyntheticKind::blobs_to_edges: {
      const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
      for (std::size_t p = 0; p < x.numel() / (h * w); ++p)
        detail::edge_filter_plane(x.values().data() + p * h * w, h, w, out.data() + p * h * w);
      break;
    }
  }
  return Tensor(x.shape(), std::move(out));
}

struct SyntheticDomains {
  SyntheticKind kind;
  ImageDataset a;
  ImageDataset b;

  Tensor oracle(const Tensor& x) const { return apply_oracle(kind, x); }
};

// Unpaired marginals: A and B images come from independent random streams,
// B being the oracle image of an A-style draw that never appears in A.
inline SyntheticDomains make_synthetic_domains(SyntheticKind kind, std::size_t n, std::size_t size,
                                               std::uint64_t seed) {
  require_config(n >= 2, "synthetic domains need n >= 2");
  require_config(size >= 4, "synthetic domains need size >= 4");
  const Rng root(seed);
  Rng ra = root.split(1), rb = root.split(2);
  SyntheticDomains d{kind, {}, {}};
  d.a.domain_tag = 'A';
  d.b.domain_tag = 'B';
  for (std::size_t i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu", i);
    d.a.items.push_back(detail::source_style_image(kind, ra, size));
    d.a.names.push_back(std::string("a_") + name);
    d.b.items.push_back(apply_oracle(kind, detail::source_style_image(kind, rb, size)));
    d.b.names.push_back(std::string("b_") + name);
  }
  return d;
}

// Held-out split with ground truth: b[i] = oracle(a[i]).
inline SyntheticDomains make_synthetic_test_split(SyntheticKind kind, std::size_t n, std::size_t size,
                                                  std::uint64_t seed) {
  require_config(n >= 2, "synthetic test split needs n >= 2");
  Rng ra = Rng(seed).split(3);
  SyntheticDomains d{kind, {}, {}};
  d.a.domain_tag = 'A';
  d.b.domain_tag = 'B';
  for (std::size_t i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu", i);
    d.a.items.push_back(detail::source_style_image(kind, ra, size));
    d.a.names.push_back(std::string("test_") + name);
    d.b.items.push_back(apply_oracle(kind, d.a.items.back()));
    d.b.names.push_back(std::string("test_") + name);
  }
  return d;
}

}  // namespace unitddpm
