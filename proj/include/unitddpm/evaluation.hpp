#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "unitddpm/data_io.hpp"
#include "unitddpm/errors.hpp"
#include "unitddpm/module.hpp"
#include "unitddpm/ops.hpp"
#include "unitddpm/rng.hpp"
#include "unitddpm/tensor.hpp"

namespace unitddpm {

// Gaussian summary of a feature set; covariance uses the N - 1 denominator.
struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  std::size_t count = 0;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

namespace detail {

// Pairwise (cascade) summation of f(i) over [lo, hi).
template <class F>
auto pairwise_sum(std::size_t lo, std::size_t hi, const F& f) -> decltype(f(lo)) {
  if (hi - lo <= 8) {
    auto acc = f(lo);
    for (std::size_t i = lo + 1; i < hi; ++i) acc += f(i);
    return acc;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  return pairwise_sum(lo, mid, f) + pairwise_sum(mid, hi, f);
}

}  // namespace detail

// Rows of a [N, d] feature tensor.
inline FeatureStats feature_stats(const Tensor& features) {
  require(features.rank() == 2, "feature_stats: expected [N, d], got " + shape_str(features.shape()));
  const std::size_t n = features.dim(0), d = features.dim(1);
  require_config(n >= 2, "feature statistics need at least 2 samples, got " + std::to_string(n));
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(
      features.values().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  FeatureStats s;
  s.count = n;
  s.mean = detail::pairwise_sum(0, n, [&](std::size_t i) -> Eigen::VectorXd {
             return x.row(static_cast<Eigen::Index>(i)).transpose();
           }) / static_cast<double>(n);
  s.covariance = detail::pairwise_sum(0, n, [&](std::size_t i) -> Eigen::MatrixXd {
                   const Eigen::VectorXd c = x.row(static_cast<Eigen::Index>(i)).transpose() - s.mean;
                   return c * c.transpose();
                 }) / static_cast<double>(n - 1);
  s.covariance = 0.5 * (s.covariance + s.covariance.transpose());
  return s;
}

// Symmetric PSD square root by eigendecomposition. Eigenvalues down to
// -1e-10 (relative to the largest magnitude, floor 1) are treated as zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  require(m.rows() == m.cols(), "psd_sqrt: matrix is not square");
  if (!m.allFinite()) throw NumericError("psd_sqrt: matrix has non-finite entries");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw NumericError("psd_sqrt: matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NumericError("psd_sqrt: eigendecomposition did not converge");
  const Eigen::VectorXd& lam = es.eigenvalues();
  const double tol = 1e-10 * std::max(1.0, lam.cwiseAbs().maxCoeff());
  if (lam.minCoeff() < -tol) {
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "psd_sqrt: matrix is not positive semidefinite (eigenvalues %.3e .. %.3e, condition number %.3e)",
                  lam.minCoeff(), lam.maxCoeff(), std::abs(lam.maxCoeff() / lam.minCoeff()));
    throw NumericError(buf);
  }
  const Eigen::VectorXd root = lam.cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

struct FrechetResult {
  double distance = 0.0;
  double ridge_a = 0.0;  // epsilon added to the diagonal of each covariance
  double ridge_b = 0.0;
};

namespace detail {

// eps = 1e-6 * trace / d when the covariance is close to singular.
inline double ridge_for(const Eigen::MatrixXd& cov) {
  const Eigen::Index d = cov.rows();
  const double tr = cov.trace();
  if (tr <= 0.0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
  const double lmin = es.eigenvalues().minCoeff(), lmax = es.eigenvalues().maxCoeff();
  if (lmin > 1e-10 * lmax) return 0.0;
  return 1e-6 * tr / static_cast<double>(d);
}

}  // namespace detail

// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)). The cross term is
// evaluated as tr sqrt(sqrt(S_a) S_b sqrt(S_a)), which is symmetric PSD.
inline FrechetResult frechet_distance_detailed(const FeatureStats& a, const FeatureStats& b) {
  require(a.dim() == b.dim(), "frechet_distance: feature dimensions " + std::to_string(a.dim()) + " and " +
                                  std::to_string(b.dim()) + " differ");
  FrechetResult r;
  r.ridge_a = detail::ridge_for(a.covariance);
  r.ridge_b = detail::ridge_for(b.covariance);
  const auto d = static_cast<Eigen::Index>(a.dim());
  const Eigen::MatrixXd sa = a.covariance + r.ridge_a * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd sb = b.covariance + r.ridge_b * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd ra = psd_sqrt(sa);
  Eigen::MatrixXd inner = ra * sb * ra;
  inner = 0.5 * (inner + inner.transpose());
  const double cross = psd_sqrt(inner).trace();
  const double value = (a.mean - b.mean).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross;
  const double tol = 1e-8 * std::max(1.0, sa.trace() + sb.trace());
  if (!std::isfinite(value) || value < -tol)
    throw NumericError("frechet_distance: evaluated to " + std::to_string(value));
  r.distance = std::max(0.0, value);
  return r;
}

inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  return frechet_distance_detailed(a, b).distance;
}

// -------------------------------------------------------------- extractors

enum class Extractor { raw_pixels, pooled_stats, fixed_random_conv };

inline Extractor parse_extractor(const std::string& s) {
  if (s == "raw_pixels") return Extractor::raw_pixels;
  if (s == "pooled_stats") return Extractor::pooled_stats;
  if (s == "fixed_random_conv") return Extractor::fixed_random_conv;
  throw ConfigError("unknown extractor '" + s + "' (expected raw_pixels, pooled_stats or fixed_random_conv)");
}

inline std::string to_string(Extractor e) {
  switch (e) {
    case Extractor::raw_pixels: return "raw_pixels";
    case Extractor::pooled_stats: return "pooled_stats";
    case Extractor::fixed_random_conv: return "fixed_random_conv";
  }
  return "?";
}

inline constexpr std::uint64_t kFeatureSeed = 20211011;

// Two frozen 3x3 conv + ReLU layers (C -> 8 -> 16); each output channel is
// summarised by its spatial mean and root mean square, giving d = 32.
inline Tensor fixed_random_conv_features(const Tensor& images, std::uint64_t seed = kFeatureSeed) {
  const std::size_t c = images.dim(1);
  Rng rng(seed);
  const Conv2d l1 = Conv2d::make(c, 8, 3, 1, 1, rng);
  const Conv2d l2 = Conv2d::make(8, 16, 3, 1, 1, rng);
  NoGradGuard ng;
  const Tensor h = relu(l2(relu(l1(images))));
  const std::size_t n = h.dim(0), ch = h.dim(1), plane = h.dim(2) * h.dim(3);
  std::vector<double> out(n * 2 * ch);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < ch; ++k) {
      const double* p = h.values().data() + (i * ch + k) * plane;
      double s = 0.0, s2 = 0.0;
      for (std::size_t j = 0; j < plane; ++j) {
        s += p[j];
        s2 += p[j] * p[j];
      }
      out[i * 2 * ch + k] = s / static_cast<double>(plane);
      out[i * 2 * ch + ch + k] = std::sqrt(s2 / static_cast<double>(plane));
    }
  return Tensor({n, 2 * ch}, std::move(out));
}

// Per channel: mean, variance and mean squared forward difference
// (horizontal plus vertical), d = 3C.
inline Tensor pooled_stats_features(const Tensor& images) {
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  std::vector<double> out(n * 3 * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      const double* p = images.values().data() + (i * c + k) * h * w;
      double s = 0.0;
      for (std::size_t j = 0; j < h * w; ++j) s += p[j];
      const double mu = s / static_cast<double>(h * w);
      double v = 0.0, g = 0.0;
      for (std::size_t j = 0; j < h * w; ++j) v += (p[j] - mu) * (p[j] - mu);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          if (x + 1 < w) g += std::pow(p[y * w + x + 1] - p[y * w + x], 2);
          if (y + 1 < h) g += std::pow(p[(y + 1) * w + x] - p[y * w + x], 2);
        }
      out[i * 3 * c + 3 * k] = mu;
      out[i * 3 * c + 3 * k + 1] = v / static_cast<double>(h * w);
      out[i * 3 * c + 3 * k + 2] = g / static_cast<double>(h * w);
    }
  return Tensor({n, 3 * c}, std::move(out));
}

inline Tensor extract_features(const Tensor& images, Extractor e, std::uint64_t seed = kFeatureSeed) {
  require(images.rank() == 4, "extract_features: expected [N,C,H,W], got " + shape_str(images.shape()));
  require_config(images.dim(0) >= 2, "feature extraction needs at least 2 images (covariance is undefined)");
  switch (e) {
    case Extractor::raw_pixels: return images.detach().reshape({images.dim(0), images.numel() / images.dim(0)});
    case Extractor::pooled_stats: return pooled_stats_features(images);
    case Extractor::fixed_random_conv: return fixed_random_conv_features(images, seed);
  }
  return {};
}

// Frechet distance between feature fits of two image batches.
inline FrechetResult fid_between(const Tensor& real, const Tensor& generated, Extractor e,
                                 std::uint64_t seed = kFeatureSeed) {
  require(real.rank() == 4 && generated.rank() == 4 && real.dim(1) == generated.dim(1) &&
              real.dim(2) == generated.dim(2) && real.dim(3) == generated.dim(3),
          "fid: image shapes " + shape_str(real.shape()) + " and " + shape_str(generated.shape()) + " differ");
  return frechet_distance_detailed(feature_stats(extract_features(real, e, seed)),
                                   feature_stats(extract_features(generated, e, seed)));
}

inline double fid_lite(const Tensor& real, const Tensor& generated) {
  return fid_between(real, generated, Extractor::fixed_random_conv).distance;
}

// ----------------------------------------------------------------- report

struct FidReport {
  std::string direction;
  Extractor extractor = Extractor::fixed_random_conv;
  std::size_t n_real = 0;
  std::size_t n_gen = 0;
  FrechetResult result;
  std::vector<std::string> skipped;
};

// "direction, extractor, N_real, N_gen, FID"
inline std::string format_fid_row(const FidReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s, %s, %zu, %zu, %.10g", r.direction.c_str(), to_string(r.extractor).c_str(),
                r.n_real, r.n_gen, r.result.distance);
  return buf;
}

inline FidReport fid_report(const std::filesystem::path& real_dir, const std::filesystem::path& gen_dir,
                            Extractor extractor, const std::filesystem::path& out_path,
                            const std::string& direction = "A2B", std::size_t channels = 1) {
  LoadReport lr_real, lr_gen;
  const ImageDataset real = load_folder_native(real_dir, channels, &lr_real);
  const ImageDataset gen = load_folder_native(gen_dir, channels, &lr_gen);
  if (real.image_shape() != gen.image_shape())
    throw ConfigError("real images are " + shape_str(real.image_shape()) + " but generated images are " +
                      shape_str(gen.image_shape()));
  require_config(real.size() >= 2 && gen.size() >= 2, "fid needs at least 2 images in each set");
  FidReport r;
  r.direction = direction;
  r.extractor = extractor;
  r.n_real = real.size();
  r.n_gen = gen.size();
  for (const auto& s : lr_real.skipped) r.skipped.push_back((real_dir / s).string());
  for (const auto& s : lr_gen.skipped) r.skipped.push_back((gen_dir / s).string());
  r.result = fid_between(stack_all(real), stack_all(gen), extractor);
  if (!out_path.empty()) {
    if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
    std::ofstream os(out_path, std::ios::trunc);
    if (!os) throw IoError("cannot write '" + out_path.string() + "'");
    os << format_fid_row(r) << "\n";
    if (r.result.ridge_a > 0 || r.result.ridge_b > 0) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "# ridge real %.6g, generated %.6g\n", r.result.ridge_a, r.result.ridge_b);
      os << buf;
    }
    for (const auto& s : r.skipped) os << "# skipped " << s << "\n";
  }
  return r;
}

}  // namespace unitddpm
