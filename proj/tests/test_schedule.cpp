#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "support/toy_models.hpp"
#include "unitddpm/rng.hpp"
#include "unitddpm/schedule.hpp"

using namespace unitddpm;

namespace {

Tensor scalar_tensor(double v) { return Tensor({1}, v); }

// A one-entry schedule with chosen alpha and alpha_bar at t = 1.
NoiseSchedule single_step(double alpha, double alpha_bar) {
  NoiseSchedule s;
  s.T = 1;
  s.alpha = {alpha};
  s.alpha_bar = {alpha_bar};
  s.sigma = {std::sqrt(1.0 - alpha)};
  return s;
}

}  // namespace

TEST(LinearSchedule, ReferenceEndpointsAreExact) {
  const auto s = make_linear_schedule(1000, 0.9999, 0.98);
  EXPECT_EQ(s.alpha_at(1), 0.9999);
  EXPECT_EQ(s.alpha_at(1000), 0.98);
}

TEST(LinearSchedule, MidpointInterpolation) {
  const auto s = make_linear_schedule(1000, 0.9999, 0.98);
  EXPECT_NEAR(s.alpha_at(500), 0.9999 - 499.0 * 0.0199 / 999.0, 1e-15);
  EXPECT_NEAR(s.alpha_at(500), 0.98996, 5e-6);
}

TEST(LinearSchedule, SingleStepChain) {
  const auto s = make_linear_schedule(1, 0.9, 0.9);
  EXPECT_EQ(s.alpha_at(1), 0.9);
  EXPECT_EQ(s.alpha_bar_at(1), 0.9);
}

TEST(LinearSchedule, TableInvariants) {
  for (std::size_t T : {2u, 50u, 1000u}) {
    const auto s = make_linear_schedule(T, 0.9999, 0.98);
    EXPECT_EQ(s.alpha_bar_at(1), s.alpha_at(1));
    double log_sum = 0.0;
    for (std::size_t t = 1; t <= T; ++t) {
      EXPECT_GT(s.alpha_at(t), 0.0);
      EXPECT_LT(s.alpha_at(t), 1.0);
      EXPECT_NEAR(s.sigma_at(t) * s.sigma_at(t), 1.0 - s.alpha_at(t), 1e-15);
      if (t > 1) {
        EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
        EXPECT_EQ(s.alpha_bar_at(t), s.alpha_bar_at(t - 1) * s.alpha_at(t));
      }
      log_sum += std::log(s.alpha_at(t));
    }
    EXPECT_NEAR(s.alpha_bar_at(T), std::exp(log_sum), 1e-12);
  }
}

TEST(LinearSchedule, RejectsBadConfiguration) {
  EXPECT_THROW(make_linear_schedule(0, 0.9, 0.8), ConfigError);
  EXPECT_THROW(make_linear_schedule(10, 1.0, 0.8), ConfigError);
  EXPECT_THROW(make_linear_schedule(10, 0.9, 0.0), ConfigError);
  EXPECT_THROW(make_linear_schedule(10, 0.8, 0.9), ConfigError);
}

TEST(LinearSchedule, RescaledEndpointsForShortChain) {
  const auto e = rescale_endpoints(0.9999, 0.98, 1000, 50);
  EXPECT_NEAR(e.first, 0.998, 1e-12);
  EXPECT_NEAR(e.last, 0.6, 1e-12);
  EXPECT_THROW(rescale_endpoints(0.9999, 0.98, 1000, 10), ConfigError);
}

TEST(LinearSchedule, OutOfRangeTimestepIsContractViolation) {
  const auto s = make_linear_schedule(10, 0.99, 0.9);
  EXPECT_THROW(s.alpha_at(0), ContractViolation);
  EXPECT_THROW(s.alpha_at(11), ContractViolation);
  EXPECT_THROW(q_sample(scalar_tensor(1), 11, scalar_tensor(1), s), ContractViolation);
}

TEST(QSample, ReducesAtZeroNoiseAndZeroSignal) {
  const auto s = make_linear_schedule(10, 0.99, 0.9);
  const Tensor x({3}, {0.5, -1.0, 2.0});
  const Tensor zero({3}, 0.0);
  const Tensor eps({3}, {1.0, 0.3, -0.7});
  const auto a = q_sample(x, 7, zero, s);
  const auto b = q_sample(zero, 7, eps, s);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(a[i], std::sqrt(s.alpha_bar_at(7)) * x[i]);
    EXPECT_DOUBLE_EQ(b[i], std::sqrt(1.0 - s.alpha_bar_at(7)) * eps[i]);
  }
}

TEST(QSample, QuarterSignalExample) {
  const auto s = single_step(0.25, 0.25);
  EXPECT_NEAR(q_sample(scalar_tensor(1), 1, scalar_tensor(1), s).item(), 1.3660254, 1e-7);
}

TEST(QSample, RejectsNoiseShapeMismatch) {
  const auto s = make_linear_schedule(10, 0.99, 0.9);
  EXPECT_THROW(q_sample(Tensor({2}, 0.0), 1, Tensor({3}, 0.0), s), ContractViolation);
}

TEST(QSample, MomentsOverManyDraws) {
  const auto s = make_linear_schedule(50, 0.998, 0.6);
  const std::size_t t = 20, n = 200000;
  const double x0 = 0.7;
  Rng rng(11);
  const Tensor eps = gaussian_sample({n}, rng);
  const auto xt = q_sample(Tensor({n}, x0), t, eps, s);
  double m = 0, v = 0;
  for (double x : xt.values()) m += x;
  m /= n;
  for (double x : xt.values()) v += (x - m) * (x - m);
  v /= (n - 1);
  const double want_m = std::sqrt(s.alpha_bar_at(t)) * x0, want_v = 1.0 - s.alpha_bar_at(t);
  EXPECT_NEAR(m, want_m, 3.0 * std::sqrt(want_v / n));
  EXPECT_NEAR(v, want_v, 3.0 * want_v * std::sqrt(2.0 / (n - 1)));
}

TEST(PosteriorMean, ReducesWithoutNoisePrediction) {
  const auto s = make_linear_schedule(10, 0.99, 0.9);
  const Tensor x({2}, {1.0, -2.0});
  const Tensor zero({2}, 0.0);
  const auto m = posterior_mean(x, zero, 4, s);
  EXPECT_DOUBLE_EQ(m[0], x[0] / std::sqrt(s.alpha_at(4)));
  EXPECT_DOUBLE_EQ(m[1], x[1] / std::sqrt(s.alpha_at(4)));
  EXPECT_EQ(posterior_mean(zero, zero, 4, s)[0], 0.0);
}

TEST(PosteriorMean, FirstStepOfReferenceSchedule) {
  const auto s = make_linear_schedule(1000, 0.9999, 0.98);
  EXPECT_NEAR(posterior_mean(scalar_tensor(1), scalar_tensor(1), 1, s).item(), 0.990050, 1e-6);
}

TEST(PosteriorMean, AsPrintedVariantScalesByOneMinusAlpha) {
  auto s = single_step(0.5, 0.25);
  s.variant = PosteriorVariant::as_printed;
  const double want = (1.0 - 0.5 * 0.5 / std::sqrt(0.75)) / std::sqrt(0.5);
  EXPECT_NEAR(posterior_mean(scalar_tensor(1), scalar_tensor(0.5), 1, s).item(), want, 1e-15);
  s.alpha = {0.64};
  s.sigma = {0.6};
  EXPECT_NEAR(posterior_mean(scalar_tensor(1), scalar_tensor(0), 1, s).item(), 1.0 / 0.6, 1e-15);
}

TEST(ReverseStep, ZeroNoiseIsPosteriorMean) {
  const auto s = make_linear_schedule(10, 0.99, 0.9);
  const Tensor x({2}, {0.3, -0.4}), e({2}, {0.1, 0.2}), z({2}, 0.0);
  const auto a = reverse_step(x, e, z, 5, s), b = posterior_mean(x, e, 5, s);
  EXPECT_EQ(a.values()[0], b.values()[0]);
  EXPECT_EQ(a.values()[1], b.values()[1]);
}

TEST(ReverseStep, HandEvaluatedScalarCase) {
  const auto s = single_step(0.5, 0.25);
  EXPECT_NEAR(reverse_step(scalar_tensor(1), scalar_tensor(0.5), scalar_tensor(1), 1, s).item(), 1.7131, 5e-5);
}

TEST(ReverseStep, OracleChainPreservesStandardNormal) {
  const auto ep = rescale_endpoints(0.9999, 0.98, 1000, 50);
  const auto s = make_linear_schedule(50, ep.first, ep.last);
  auto eps_star = toy::gaussian_oracle(s);
  const std::size_t n = 10000;
  Rng rng(5);
  Tensor x = gaussian_sample({n, 1, 1, 1}, rng);
  const Tensor zero({n, 1, 1, 1}, 0.0);
  for (std::size_t t = s.T; t >= 1; --t) {
    const Tensor z = t > 1 ? gaussian_sample({n, 1, 1, 1}, rng) : zero;
    x = reverse_step(x, eps_star.forward(x, zero, t), z, t, s);
  }
  double m = 0, v = 0;
  for (double a : x.values()) m += a;
  m /= n;
  for (double a : x.values()) v += (a - m) * (a - m);
  v /= (n - 1);
  EXPECT_LE(std::abs(m), 0.05);
  EXPECT_LE(std::abs(v - 1.0), 0.1);
}
