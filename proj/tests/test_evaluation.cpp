#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "unitddpm/data_io.hpp"
#include "unitddpm/evaluation.hpp"

using namespace unitddpm;
namespace fs = std::filesystem;

namespace {

// Denman-Beavers iteration; converges to the principal square root of an
// SPD matrix without any eigendecomposition.
Eigen::MatrixXd denman_beavers_sqrt(const Eigen::MatrixXd& a) {
  Eigen::MatrixXd y = a, z = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  for (int i = 0; i < 100; ++i) {
    const Eigen::MatrixXd yi = y.inverse(), zi = z.inverse();
    const Eigen::MatrixXd yn = 0.5 * (y + zi), zn = 0.5 * (z + yi);
    const double delta = (yn - y).norm();
    y = yn;
    z = zn;
    if (delta < 1e-15 * y.norm()) break;
  }
  return y;
}

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

FeatureStats gaussian_stats(Eigen::VectorXd mean, Eigen::MatrixXd cov) {
  FeatureStats s;
  s.mean = std::move(mean);
  s.covariance = std::move(cov);
  s.count = 100;
  return s;
}

Tensor blob_images(std::size_t n, std::uint64_t seed) {
  return stack_all(make_synthetic_domains(SyntheticKind::invert, n, 16, seed).a);
}

Tensor add_noise(const Tensor& x, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(x.values().begin(), x.values().end());
  for (double& e : v) e += sigma * rng.normal();
  return Tensor(x.shape(), std::move(v));
}

// 3x3 box blur with replicated borders.
Tensor box_blur(const Tensor& x) {
  const std::size_t h = x.dim(2), w = x.dim(3), planes = x.numel() / (h * w);
  std::vector<double> out(x.numel());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double s = 0;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const auto ii = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(i) + di, 0, h - 1));
            const auto jj = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(j) + dj, 0, w - 1));
            s += x[p * h * w + ii * w + jj];
          }
        out[p * h * w + i * w + j] = s / 9.0;
      }
  return Tensor(x.shape(), std::move(out));
}

Tensor reversed_batch(const Tensor& x) {
  const std::size_t n = x.dim(0), per = x.numel() / n;
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.values().data() + (n - 1 - i) * per, per, v.data() + i * per);
  return Tensor(x.shape(), std::move(v));
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("unitddpm_eval_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(PsdSqrt, IdentityAndDiagonal) {
  EXPECT_LE((psd_sqrt(Eigen::MatrixXd::Identity(5, 5)) - Eigen::MatrixXd::Identity(5, 5)).norm(), 1e-14);
  Eigen::MatrixXd d = Eigen::Vector3d(4.0, 9.0, 0.25).asDiagonal();
  Eigen::MatrixXd want = Eigen::Vector3d(2.0, 3.0, 0.5).asDiagonal();
  EXPECT_LE((psd_sqrt(d) - want).norm(), 1e-14);
}

TEST(PsdSqrt, SquaresBackOnRandomPsdMatrices) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index rank = trial % 2 ? 8 : 5;  // half are singular
    const Eigen::MatrixXd g = random_matrix(rng, 8, rank);
    const Eigen::MatrixXd m = g * g.transpose();
    const Eigen::MatrixXd r = psd_sqrt(m);
    EXPECT_LE((r * r - m).norm(), 1e-8) << trial;
    EXPECT_LE((r - r.transpose()).norm(), 1e-10) << trial;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-7) << trial;
  }
}

TEST(PsdSqrt, AgreesWithIterativeOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::MatrixXd g = random_matrix(rng, 4, 4);
    const Eigen::MatrixXd m = g * g.transpose() + 0.5 * Eigen::MatrixXd::Identity(4, 4);
    EXPECT_LE((psd_sqrt(m) - denman_beavers_sqrt(m)).cwiseAbs().maxCoeff(), 1e-8) << trial;
  }
}

TEST(PsdSqrt, RejectsIndefiniteAndAsymmetricInput) {
  Eigen::MatrixXd indefinite(2, 2);
  indefinite << 1.0, 0.0, 0.0, -1.0;
  try {
    psd_sqrt(indefinite);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("condition number"), std::string::npos);
  }
  Eigen::MatrixXd asym(2, 2);
  asym << 1.0, 0.5, 0.0, 1.0;
  EXPECT_THROW(psd_sqrt(asym), NumericError);
  Eigen::MatrixXd nan = Eigen::MatrixXd::Identity(2, 2);
  nan(0, 0) = std::nan("");
  EXPECT_THROW(psd_sqrt(nan), NumericError);
}

TEST(Frechet, OneDimensionalAnalyticCase) {
  const auto a = gaussian_stats(Eigen::VectorXd::Constant(1, 0.0), Eigen::MatrixXd::Constant(1, 1, 1.0));
  const auto b = gaussian_stats(Eigen::VectorXd::Constant(1, 1.0), Eigen::MatrixXd::Constant(1, 1, 1.0));
  EXPECT_NEAR(frechet_distance(a, b), 1.0, 1e-9);
}

TEST(Frechet, DiagonalClosedForm) {
  const Eigen::Vector3d va(1.0, 4.0, 0.5), vb(2.0, 1.0, 0.5);
  const Eigen::Vector3d ma(0.0, 1.0, -1.0), mb(0.5, 1.0, 0.0);
  const auto a = gaussian_stats(ma, va.asDiagonal().toDenseMatrix());
  const auto b = gaussian_stats(mb, vb.asDiagonal().toDenseMatrix());
  double want = (ma - mb).squaredNorm();
  for (int i = 0; i < 3; ++i) want += std::pow(std::sqrt(va[i]) - std::sqrt(vb[i]), 2);
  EXPECT_NEAR(frechet_distance(a, b), want, 1e-12);
}

TEST(Frechet, SymmetricAndNonNegative) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd ga = random_matrix(rng, 6, 6), gb = random_matrix(rng, 6, 6);
    const auto a = gaussian_stats(random_matrix(rng, 6, 1), ga * ga.transpose());
    const auto b = gaussian_stats(random_matrix(rng, 6, 1), gb * gb.transpose());
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-10 * std::max(1.0, ab));
  }
}

TEST(Frechet, RidgeOnlyForNearSingularCovariance) {
  Rng rng(4);
  const Eigen::MatrixXd g = random_matrix(rng, 6, 3);
  const Eigen::MatrixXd singular = g * g.transpose();
  const Eigen::MatrixXd full = singular + Eigen::MatrixXd::Identity(6, 6);
  const auto r = frechet_distance_detailed(gaussian_stats(Eigen::VectorXd::Zero(6), singular),
                                           gaussian_stats(Eigen::VectorXd::Zero(6), full));
  EXPECT_NEAR(r.ridge_a, 1e-6 * singular.trace() / 6.0, 1e-18);
  EXPECT_EQ(r.ridge_b, 0.0);
  EXPECT_THROW(frechet_distance(gaussian_stats(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)),
                                gaussian_stats(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3))),
               ContractViolation);
}

TEST(FeatureStats, MeanAndUnbiasedCovariance) {
  const Tensor f({3, 2}, {1.0, 2.0, 3.0, 6.0, 5.0, 4.0});
  const auto s = feature_stats(f);
  EXPECT_DOUBLE_EQ(s.mean[0], 3.0);
  EXPECT_DOUBLE_EQ(s.mean[1], 4.0);
  EXPECT_DOUBLE_EQ(s.covariance(0, 0), 4.0);
  EXPECT_DOUBLE_EQ(s.covariance(1, 1), 4.0);
  EXPECT_DOUBLE_EQ(s.covariance(0, 1), 2.0);
  EXPECT_EQ(s.count, 3u);
  EXPECT_THROW(feature_stats(Tensor({1, 2}, 0.0)), ConfigError);
}

TEST(FeatureStats, PairwiseSumMatchesExactIntegerSum) {
  const auto s = detail::pairwise_sum(0, 1001, [](std::size_t i) { return static_cast<double>(i); });
  EXPECT_EQ(s, 500500.0);
}

TEST(Extractors, DimensionsAndDeterminism) {
  const Tensor x = blob_images(4, 5);
  EXPECT_EQ(extract_features(x, Extractor::raw_pixels).shape(), (Shape{4, 256}));
  EXPECT_EQ(extract_features(x, Extractor::pooled_stats).shape(), (Shape{4, 3}));
  EXPECT_EQ(extract_features(x, Extractor::fixed_random_conv).shape(), (Shape{4, 32}));
  const Tensor f1 = fixed_random_conv_features(x), f2 = fixed_random_conv_features(x);
  EXPECT_TRUE(std::equal(f1.values().begin(), f1.values().end(), f2.values().begin()));
  const Tensor f3 = fixed_random_conv_features(x, kFeatureSeed + 1);
  EXPECT_FALSE(std::equal(f1.values().begin(), f1.values().end(), f3.values().begin()));
  EXPECT_THROW(extract_features(Tensor({1, 1, 4, 4}, 0.0), Extractor::pooled_stats), ConfigError);
  EXPECT_THROW(parse_extractor("inception"), ConfigError);
  for (auto e : {Extractor::raw_pixels, Extractor::pooled_stats, Extractor::fixed_random_conv})
    EXPECT_EQ(parse_extractor(to_string(e)), e);
}

TEST(Extractors, PooledStatsHandValues) {
  // [[0, 1], [2, 3]]: mean 1.5, variance 1.25, squared differences 1+1+4+4 over 4 pixels
  const Tensor x({1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  const Tensor f = pooled_stats_features(x);
  EXPECT_DOUBLE_EQ(f[0], 1.5);
  EXPECT_DOUBLE_EQ(f[1], 1.25);
  EXPECT_DOUBLE_EQ(f[2], 2.5);
}

TEST(FidLite, IdenticalSetsGiveZero) {
  const Tensor x = blob_images(32, 6);
  for (auto e : {Extractor::pooled_stats, Extractor::fixed_random_conv})
    EXPECT_LE(fid_between(x, x, e).distance, 1e-6) << to_string(e);
}

TEST(FidLite, GrowsWithNoiseAmplitude) {
  const Tensor x = blob_images(64, 7);
  double last = 0.0;
  for (double sigma : {0.05, 0.1, 0.3, 0.6, 1.0}) {
    const double d = fid_lite(x, add_noise(x, sigma, 9));
    EXPECT_GT(d, last) << sigma;
    last = d;
  }
}

TEST(FidLite, BlurredIsCloserThanNoise) {
  const Tensor x = blob_images(64, 10);
  Rng rng(11);
  const Tensor noise = gaussian_sample(x.shape(), rng);
  EXPECT_LT(fid_lite(x, box_blur(x)), fid_lite(x, noise));
}

TEST(FidLite, InvariantToSampleOrder) {
  const Tensor x = blob_images(40, 12), y = blob_images(40, 13);
  const double a = fid_lite(x, y), b = fid_lite(x, reversed_batch(y));
  EXPECT_NEAR(a, b, 1e-10 * std::max(1.0, a));
}

TEST(FidReport, WritesRowRidgeAndSkippedFiles) {
  const auto dir = fresh_dir("report");
  const auto x = make_synthetic_domains(SyntheticKind::invert, 6, 8, 14);
  save_images(x.a.items, dir / "real", "");
  save_images(x.b.items, dir / "gen", "");
  {
    std::ofstream junk(dir / "gen" / "notes.txt");
    junk << "not an image";
  }
  const auto out = dir / "fid_report.txt";
  const auto r = fid_report(dir / "real", dir / "gen", Extractor::fixed_random_conv, out, "A2B");
  EXPECT_EQ(r.n_real, 6u);
  EXPECT_EQ(r.n_gen, 6u);
  std::ifstream is(out);
  std::string first, line;
  std::getline(is, first);
  EXPECT_EQ(first, format_fid_row(r));
  EXPECT_EQ(first.rfind("A2B, fixed_random_conv, 6, 6, ", 0), 0u);
  bool saw_ridge = false, saw_skip = false;
  while (std::getline(is, line)) {
    saw_ridge = saw_ridge || line.rfind("# ridge", 0) == 0;
    saw_skip = saw_skip || (line.rfind("# skipped", 0) == 0 && line.find("notes.txt") != std::string::npos);
  }
  EXPECT_TRUE(saw_ridge);  // 6 samples in 32 dimensions
  EXPECT_TRUE(saw_skip);
}

TEST(FidReport, MismatchedImageSizesAreRejected) {
  const auto dir = fresh_dir("mismatch");
  save_images(make_synthetic_domains(SyntheticKind::invert, 3, 8, 15).a.items, dir / "real", "");
  save_images(make_synthetic_domains(SyntheticKind::invert, 3, 16, 15).a.items, dir / "gen", "");
  EXPECT_THROW(fid_report(dir / "real", dir / "gen", Extractor::pooled_stats, {}), ConfigError);
}

TEST(FidReport, FormatRow) {
  FidReport r;
  r.direction = "B2A";
  r.extractor = Extractor::pooled_stats;
  r.n_real = 10;
  r.n_gen = 12;
  r.result.distance = 0.125;
  EXPECT_EQ(format_fid_row(r), "B2A, pooled_stats, 10, 12, 0.125");
}
