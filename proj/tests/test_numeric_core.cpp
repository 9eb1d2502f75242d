#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "support/oracles.hpp"
#include "unitddpm/adam.hpp"
#include "unitddpm/ops.hpp"
#include "unitddpm/rng.hpp"
#include "unitddpm/tensor.hpp"

using namespace unitddpm;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  Tensor t = Tensor::randn(std::move(shape), rng);
  t.set_requires_grad(requires_grad);
  return t;
}

// Fixed random projection so every output element contributes to the loss.
Tensor project(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, Tensor::randn(y.shape(), rng)));
}

}  // namespace

TEST(Rng, PhiloxKnownAnswers) {
  // Random123 kat_vectors, philox4x32 with 10 rounds.
  const auto zero = philox4x32({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(zero[0], 0x6627e8d5u);
  EXPECT_EQ(zero[1], 0xe169c58du);
  EXPECT_EQ(zero[2], 0xbc57ac4cu);
  EXPECT_EQ(zero[3], 0x9b00dbd8u);
  const auto ones = philox4x32({~0u, ~0u, ~0u, ~0u}, {~0u, ~0u});
  EXPECT_EQ(ones[0], 0x408f276du);
  EXPECT_EQ(ones[1], 0x41c83b0eu);
  EXPECT_EQ(ones[2], 0xa20bc7c6u);
  EXPECT_EQ(ones[3], 0x6d5451fdu);
  const auto pi = philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(pi[0], 0xd16cfe09u);
  EXPECT_EQ(pi[1], 0x94fdccebu);
  EXPECT_EQ(pi[2], 0x5001e420u);
  EXPECT_EQ(pi[3], 0x24126ea1u);
}

TEST(Rng, GaussianSampleIsBitReproducible) {
  Rng a(1234), b(1234);
  const Tensor x = gaussian_sample({3, 5}, a);
  const Tensor y = gaussian_sample({3, 5}, b);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x[i], y[i]);
  Rng c(1235);
  EXPECT_NE(gaussian_sample({1}, c)[0], x[0]);
}

TEST(Rng, StateRoundTripContinuesStream) {
  Rng a(99);
  a.next_u64();
  a.next_u64();
  Rng b = Rng::from_state(a.state());
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, SplitStreamsDifferAndLeaveParentUntouched) {
  Rng parent(7);
  const auto before = parent.state();
  Rng s1 = parent.split(1), s2 = parent.split(2), s1b = parent.split(1);
  EXPECT_EQ(parent.state(), before);
  EXPECT_EQ(s1.next_u64(), s1b.next_u64());
  EXPECT_NE(Rng(7).split(1).next_u64(), s2.next_u64());
}

TEST(Rng, GaussianMomentsOverMillionDraws) {
  Rng rng(2024);
  const Tensor x = gaussian_sample({1000000}, rng);
  double m = 0.0;
  for (double v : x.values()) m += v;
  m /= static_cast<double>(x.numel());
  double var = 0.0;
  for (double v : x.values()) var += (v - m) * (v - m);
  var /= static_cast<double>(x.numel() - 1);
  EXPECT_LT(std::abs(m), 0.01);
  EXPECT_LT(std::abs(var - 1.0), 0.01);
}

TEST(Tensor, ValueCountMatchesShapeAndGradShape) {
  Tensor t({2, 3, 4}, 1.5, true);
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.grad().size(), t.numel());
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ContractViolation);
  EXPECT_THROW(Tensor({2, 0}), ContractViolation);
}

TEST(Backward, SquareAtThreeGivesSix) {
  Tensor x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, ConstantLossGivesZeroGradient) {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor c = Tensor::scalar(5.0);
  backward(add_scalar(c, 1.0));
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Backward, NonScalarLossIsRejected) {
  Tensor x({2}, 1.0, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractViolation);
}

TEST(Backward, FreshGraphsDoNotAccumulateUnlessAsked) {
  Tensor x = Tensor::scalar(2.0, true);
  backward(scale(x, 3.0));
  backward(scale(x, 3.0));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  backward(scale(x, 3.0), /*accumulate=*/true);
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::scalar(2.0, true);
  NoGradGuard guard;
  const Tensor y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, TwoLayerNetworkMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor w1 = random_tensor({5, 3}, rng, true), b1 = random_tensor({5}, rng, true);
  Tensor w2 = random_tensor({2, 5}, rng, true), b2 = random_tensor({2}, rng, true);
  auto loss = [&] { return project(unitddpm::tanh(linear(unitddpm::tanh(linear(x, w1, b1)), w2, b2)), 5); };
  const auto r = oracle::gradcheck(loss, {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}});
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_EQ(r.checked, 15u + 5u + 10u + 2u);
}

TEST(Conv2d, OneByOneReducesToScalarProduct) {
  const Tensor x({1, 1, 1, 1}, 2.5), w({1, 1, 1, 1}, -1.5);
  EXPECT_DOUBLE_EQ(conv2d(x, w, 1, 0).item(), -3.75);
}

TEST(Conv2d, CentredDeltaKernelIsIdentity) {
  Rng rng(3);
  const Tensor x = random_tensor({2, 1, 5, 6}, rng);
  Tensor w({1, 1, 3, 3}, 0.0);
  w.mutable_values()[4] = 1.0;
  const Tensor y = conv2d(x, w, 1, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, RandomCaseMatchesNestedLoopOracle) {
  Rng rng(17);
  const Tensor x = random_tensor({1, 2, 5, 5}, rng), w = random_tensor({3, 2, 3, 3}, rng);
  std::size_t ho, wo;
  const auto expected = oracle::conv2d({x.values().begin(), x.values().end()}, 1, 2, 5, 5,
                                       {w.values().begin(), w.values().end()}, 3, 3, 1, 0, ho, wo);
  const Tensor y = conv2d(x, w, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 3, ho, wo}));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_LE(oracle::rel_error(y[i], expected[i], 1.0), 1e-12);
}

TEST(Conv2d, SweepOfShapesMatchesOracle) {
  Rng rng(5);
  int cases = 0;
  for (std::size_t B : {1, 2})
    for (std::size_t C : {1, 3, 4})
      for (std::size_t H : {3, 5, 8})
        for (std::size_t k : {1, 2, 3, 4})
          for (std::size_t stride : {1, 2})
            for (std::size_t pad : {0, 1}) {
              if (H + 2 * pad < k || (H + 2 * pad - k) % stride != 0) continue;
              const std::size_t W = H;
              const Tensor x = random_tensor({B, C, H, W}, rng), w = random_tensor({2, C, k, k}, rng);
              std::size_t ho, wo;
              const auto expected = oracle::conv2d({x.values().begin(), x.values().end()}, B, C, H, W,
                                                   {w.values().begin(), w.values().end()}, 2, k, stride, pad, ho, wo);
              const Tensor y = conv2d(x, w, stride, pad);
              ASSERT_EQ(y.numel(), expected.size());
              for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(y[i], expected[i], 1e-12);
              ++cases;
            }
  EXPECT_GT(cases, 50);
}

TEST(Conv2d, RejectsInexactOutputSizeAndChannelMismatch) {
  const Tensor x({1, 1, 16, 16}, 0.0);
  EXPECT_THROW(conv2d(x, Tensor({1, 1, 3, 3}), 2, 1), ConfigError);
  EXPECT_THROW(conv2d(x, Tensor({1, 2, 3, 3}), 1, 1), ContractViolation);
  EXPECT_THROW(conv2d(Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 3}), 1, 0), ConfigError);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  Rng rng(21);
  Tensor x = random_tensor({2, 2, 6, 6}, rng), w = random_tensor({3, 2, 4, 4}, rng), b = random_tensor({3}, rng);
  const auto r = oracle::gradcheck([&] { return project(conv2d(x, w, b, 2, 1), 9); },
                                   {{"x", x}, {"w", w}, {"b", b}});
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(ConvTranspose2d, MatchesScatterOracle) {
  Rng rng(8);
  for (std::size_t stride : {1, 2})
    for (std::size_t k : {2, 3, 4})
      for (std::size_t pad : {0, 1}) {
        if ((4 - 1) * stride + k <= 2 * pad) continue;
        const Tensor x = random_tensor({2, 3, 4, 4}, rng), w = random_tensor({3, 2, k, k}, rng);
        std::size_t ho, wo;
        const auto expected = oracle::conv_transpose2d({x.values().begin(), x.values().end()}, 2, 3, 4, 4,
                                                       {w.values().begin(), w.values().end()}, 2, k, stride, pad, ho,
                                                       wo);
        const Tensor y = conv_transpose2d(x, w, Tensor(), stride, pad);
        ASSERT_EQ(y.shape(), (Shape{2, 2, ho, wo}));
        for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(y[i], expected[i], 1e-12);
      }
}

TEST(ConvTranspose2d, IsAdjointOfConv2d) {
  Rng rng(31);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng), w = random_tensor({4, 3, 4, 4}, rng);
  const Tensor y = random_tensor({2, 4, 4, 4}, rng);
  const double lhs = sum(mul(conv2d(x, w, 2, 1), y)).item();
  const double rhs = sum(mul(x, conv_transpose2d(y, w, Tensor(), 2, 1))).item();
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
}

TEST(ConvTranspose2d, GradientsMatchFiniteDifferences) {
  Rng rng(22);
  Tensor x = random_tensor({2, 3, 3, 3}, rng), w = random_tensor({3, 2, 4, 4}, rng), b = random_tensor({2}, rng);
  const auto r = oracle::gradcheck([&] { return project(conv_transpose2d(x, w, b, 2, 1), 4); },
                                   {{"x", x}, {"w", w}, {"b", b}});
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(BatchNorm, TrainingOutputIsStandardisedPerChannel) {
  Rng rng(4);
  Tensor x = scale(random_tensor({4, 3, 5, 5}, rng), 3.0);
  x = add_scalar(x, 2.0);
  Tensor rm({3}, 0.0), rv({3}, 1.0);
  const Tensor y = batch_norm(x, Tensor({3}, 1.0), Tensor({3}, 0.0), rm, rv, NormMode::train);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) m += y[(n * 3 + c) * 25 + i];
    m /= 100.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) v += std::pow(y[(n * 3 + c) * 25 + i] - m, 2);
    v /= 100.0;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(BatchNorm, RunningStatisticsFollowMomentum) {
  const Tensor x({2, 1, 1, 2}, std::vector<double>{1.0, 3.0, 5.0, 7.0});
  Tensor rm({1}, 0.0), rv({1}, 1.0);
  batch_norm(x, Tensor({1}, 1.0), Tensor({1}, 0.0), rm, rv, NormMode::train);
  // batch mean 4, unbiased variance 20/3
  EXPECT_DOUBLE_EQ(rm[0], 0.1 * 4.0);
  EXPECT_DOUBLE_EQ(rv[0], 0.9 + 0.1 * 20.0 / 3.0);
  batch_norm(x, Tensor({1}, 1.0), Tensor({1}, 0.0), rm, rv, NormMode::batch_no_update);
  batch_norm(x, Tensor({1}, 1.0), Tensor({1}, 0.0), rm, rv, NormMode::eval);
  EXPECT_DOUBLE_EQ(rm[0], 0.4);
}

TEST(BatchNorm, EvalModeUsesRunningStatistics) {
  const Tensor x({1, 1, 1, 2}, std::vector<double>{1.0, 3.0});
  Tensor rm({1}, 1.0), rv({1}, 4.0 - 1e-5);
  const Tensor y = batch_norm(x, Tensor({1}, 2.0), Tensor({1}, 0.5), rm, rv, NormMode::eval);
  EXPECT_NEAR(y[0], 0.5, 1e-12);
  EXPECT_NEAR(y[1], 2.0 * 1.0 + 0.5, 1e-12);
}

TEST(BatchNorm, GradientsMatchFiniteDifferencesInEveryMode) {
  for (NormMode mode : {NormMode::train, NormMode::batch_no_update, NormMode::eval}) {
    Rng rng(40);
    Tensor x = random_tensor({3, 2, 3, 3}, rng), g = random_tensor({2}, rng), b = random_tensor({2}, rng);
    Tensor rm({2}, 0.3), rv({2}, 1.7);
    const auto r = oracle::gradcheck([&] { return project(batch_norm(x, g, b, rm, rv, mode), 12); },
                                     {{"x", x}, {"gamma", g}, {"beta", b}});
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(Elementwise, ReluIsNonNegative) {
  Rng rng(9);
  const Tensor y = relu(random_tensor({1000}, rng));
  for (double v : y.values()) EXPECT_GE(v, 0.0);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Rng rng(41);
  Tensor a = random_tensor({2, 3, 2, 2}, rng), b = random_tensor({2, 3, 2, 2}, rng);
  Tensor c = random_tensor({2, 1, 2, 2}, rng), s = random_tensor({1}, rng), v = random_tensor({4}, rng);
  auto loss = [&] {
    Tensor h = add(mul(a, b), sub(unitddpm::tanh(a), relu(b)));
    h = axpby(0.7, h, -1.3, a);
    h = mul_by_scalar(h, s);
    h = add_broadcast_scalar(h, s);
    h = concat_channels(h, c);
    h = add_channel_bias(h, v);
    h = h.reshape({2, 16});
    return add(add(sq_l2_norm(h), l1_norm(h)), add(mean(square(h)), sum(abs(h))));
  };
  const auto r = oracle::gradcheck(loss, {{"a", a}, {"b", b}, {"c", c}, {"s", s}, {"v", v}});
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Elementwise, ShapeMismatchIsAContractViolation) {
  EXPECT_THROW(add(Tensor({2}), Tensor({3})), ContractViolation);
  EXPECT_THROW(concat_channels(Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 2})), ContractViolation);
}

TEST(Reductions, NormsOnKnownVector) {
  const Tensor x({3}, std::vector<double>{1.0, -2.0, 2.0});
  EXPECT_DOUBLE_EQ(l1_norm(x).item(), 5.0);
  EXPECT_DOUBLE_EQ(sq_l2_norm(x).item(), 9.0);
  EXPECT_DOUBLE_EQ(mean(x).item(), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(mean_abs_error(x, Tensor({3}, 0.0)).item(), 5.0 / 3.0);
  EXPECT_DOUBLE_EQ(mean_squared_error(x, Tensor({3}, 0.0)).item(), 3.0);
}

TEST(Adam, ZeroLearningRateLeavesParametersButCountsStep) {
  Tensor p({2}, std::vector<double>{1.0, -1.0}, true);
  p.mutable_grad()[0] = 0.3;
  p.mutable_grad()[1] = -0.7;
  std::vector<Tensor> params{p};
  auto state = AdamState::for_params(params);
  adam_step(params, state, {0.0, 0.5, 0.999, 1e-8});
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], -1.0);
  EXPECT_EQ(state.step_count, 1);
}

TEST(Adam, SingleBiasCorrectedStep) {
  Tensor p = Tensor::scalar(0.0, true);
  p.mutable_grad()[0] = 0.5;
  std::vector<Tensor> params{p};
  auto state = AdamState::for_params(params);
  adam_step(params, state, {1e-3, 0.5, 0.999, 1e-8});
  // m_hat = g, v_hat = g^2  =>  -lr * g / (|g| + eps)
  EXPECT_NEAR(p[0], -9.99999980e-4, 1e-15);
  for (double v : state.second_moment[0]) EXPECT_GE(v, 0.0);
}

TEST(Adam, ZeroGradientOnFreshStateIsNoOp) {
  Tensor p = Tensor::scalar(0.25, true);
  p.zero_grad();
  std::vector<Tensor> params{p};
  auto state = AdamState::for_params(params);
  adam_step(params, state, {1e-3, 0.5, 0.999, 1e-8});
  EXPECT_EQ(p[0], 0.25);
}

TEST(Adam, RejectsMismatchedStateAndBadBetas) {
  Tensor p({3}, 0.0, true);
  std::vector<Tensor> params{p};
  AdamState wrong;
  wrong.first_moment = {std::vector<double>(2)};
  wrong.second_moment = {std::vector<double>(2)};
  EXPECT_THROW(adam_step(params, wrong, {}), ContractViolation);
  auto state = AdamState::for_params(params);
  EXPECT_THROW(adam_step(params, state, {1e-3, 1.0, 0.999, 1e-8}), ConfigError);
}
