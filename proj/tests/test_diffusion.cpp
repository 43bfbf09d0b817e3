// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "sardiff/diffusion.hpp"

using namespace sardiff;

namespace {

struct Moments {
  double mean;
  double var;
};

Moments moments(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  const double m = s / static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, v / static_cast<double>(xs.size() - 1)};
}

}  // namespace

TEST(Schedule, ConstantBetaProducts) {
  const NoiseSchedule s = linear_schedule(3, 0.1, 0.1);
  EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar(2), 0.81, 1e-15);
  EXPECT_NEAR(s.alpha_bar(3), 0.729, 1e-15);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  EXPECT_EQ(linear_schedule(1, 0.5, 0.5).alpha_bar(1), 0.5);
}

TEST(Schedule, CumulativeProductOracle) {
  const NoiseSchedule s = linear_schedule(1000, 1e-4, 0.02);
  long double prod = 1.0L;
  for (int t = 1; t <= 1000; ++t) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(t - 1) / 999.0L;
    EXPECT_NEAR(s.beta(t), static_cast<double>(beta), 1e-17);
    prod *= 1.0L - beta;
  }
  EXPECT_NEAR(s.alpha_bar(1000) / static_cast<double>(prod), 1.0, 1e-12);
}

TEST(Schedule, Invariants) {
  const NoiseSchedule s = linear_schedule(1000);
  double ab = 1.0;
  for (int t = 1; t <= s.steps(); ++t) {
    EXPECT_GT(s.beta(t), 0.0);
    EXPECT_LT(s.beta(t), 1.0);
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    EXPECT_EQ(s.alpha(t), 1.0 - s.beta(t));
    ab *= s.alpha(t);
    EXPECT_NEAR(s.alpha_bar(t), ab, 1e-15);
  }
}

TEST(Schedule, RejectsInvalidRanges) {
  EXPECT_THROW(linear_schedule(0), std::invalid_argument);
  EXPECT_THROW(linear_schedule(10, 0.0, 0.02), std::invalid_argument);
  EXPECT_THROW(linear_schedule(10, 0.03, 0.02), std::invalid_argument);
  EXPECT_THROW(linear_schedule(10, 1e-4, 1.0), std::invalid_argument);
}

TEST(Schedule, JsonRoundTrip) {
  NoiseSchedule s = linear_schedule(50);
  s.variance_mode = VarianceMode::beta;
  const NoiseSchedule r = NoiseSchedule::from_json(s.to_json());
  EXPECT_EQ(r.betas(), s.betas());
  EXPECT_EQ(r.variance_mode, VarianceMode::beta);
}

TEST(DiffuseTo, ZeroNoiseAndLimits) {
  const NoiseSchedule s = linear_schedule(1000);
  const Tensor z0({2, 3}, std::vector<double>{1, -2, 3, 0.5, 0, -1});
  const Tensor zero({2, 3});
  const Tensor out = diffuse_to(z0, 400, zero, s);
  for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_EQ(out[i], std::sqrt(s.alpha_bar(400)) * z0[i]);

  Rng rng(1);
  const Tensor eps = rng.normal_tensor({2, 3});
  const Tensor late = diffuse_to(z0, 1000, eps, s);
  const double ab = s.alpha_bar(1000);
  for (std::size_t i = 0; i < z0.size(); ++i) {
    EXPECT_LE(std::abs(late[i] - eps[i]), std::sqrt(ab) * std::abs(z0[i]) + (1 - std::sqrt(1 - ab)) * std::abs(eps[i]) + 1e-15);
  }

  EXPECT_TRUE(bitwise_equal(diffuse_to(z0, 0, eps, s), z0));
  EXPECT_THROW(diffuse_to(z0, -1, zero, s), std::out_of_range);
  EXPECT_THROW(diffuse_to(z0, 1001, zero, s), std::out_of_range);
  EXPECT_THROW(diffuse_to(z0, 1, Tensor({3, 2}), s), ShapeError);
}

TEST(DiffuseTo, MonteCarloMoments) {
  const NoiseSchedule s = linear_schedule(1000);
  Rng rng(11);
  for (int t : {1, 500, 1000}) {
    const Tensor eps = rng.normal_tensor({100000});
    const Tensor z = diffuse_to(Tensor({100000}, 1.0), t, eps, s);
    const Moments m = moments(z.data());
    const double mean = std::sqrt(s.alpha_bar(t)), var = 1.0 - s.alpha_bar(t);
    EXPECT_NEAR(m.var / var, 1.0, 0.02) << t;
    // Relative 1% of a mean near zero is below Monte-Carlo resolution, so the
    // comparison is scaled by the larger of mean and standard deviation.
    EXPECT_LE(std::abs(m.mean - mean), 0.01 * std::max(mean, std::sqrt(var))) << t;
  }
}

TEST(DiffuseStep, VanishingBetaIsIdentity) {
  const NoiseSchedule s(std::vector<double>(3, 1e-12), 1e-12, 1e-12);
  Rng rng(2);
  const Tensor z({4}, std::vector<double>{1, -1, 0.5, 3});
  EXPECT_LE(max_abs_diff(diffuse_step(z, 2, s, rng), z), 1e-5);
}

TEST(DiffuseStep, ZeroInputMoments) {
  const NoiseSchedule s = linear_schedule(1000);
  Rng rng(3);
  const Tensor z = diffuse_step(Tensor({100000}), 700, s, rng);
  const Moments m = moments(z.data());
  EXPECT_NEAR(m.mean, 0.0, 4.0 * std::sqrt(s.beta(700) / 1e5));
  EXPECT_NEAR(m.var / s.beta(700), 1.0, 0.02);
}

TEST(DiffuseStep, MarkovCompositionMatchesClosedForm) {
  const NoiseSchedule s = linear_schedule(1000);
  Rng rng(4);
  Tensor z({100000}, 1.0);
  for (int t = 1; t <= 10; ++t) z = diffuse_step(z, t, s, rng);
  const Moments m = moments(z.data());
  EXPECT_NEAR(m.mean / std::sqrt(s.alpha_bar(10)), 1.0, 0.02);
  EXPECT_NEAR(m.var / (1.0 - s.alpha_bar(10)), 1.0, 0.02);
}

TEST(SampleStep, ExactInversionAtFirstStep) {
  const NoiseSchedule s = linear_schedule(1000);
  Rng rng(5);
  const Tensor z0 = rng.normal_tensor({3, 4});
  const Tensor eps = rng.normal_tensor({3, 4});
  const Tensor z1 = diffuse_to(z0, 1, eps, s);
  for (auto mode : {VarianceMode::beta, VarianceMode::posterior}) {
    EXPECT_LE(max_abs_diff(sample_step(z1, eps, 1, s, rng, mode), z0), 1e-10);
  }
}

TEST(SampleStep, ZeroInputsGiveZeroMean) {
  const NoiseSchedule s = linear_schedule(50);
  Rng rng(6);
  const Tensor zero({5});
  EXPECT_EQ(sample_step(zero, zero, 1, s, rng, VarianceMode::posterior).max_abs(), 0.0);
  // For t > 1 only the noise term remains; its spread is sigma_t.
  const Tensor draw = sample_step(Tensor({20000}), Tensor({20000}), 30, s, rng, VarianceMode::beta);
  const Moments m = moments(draw.data());
  EXPECT_NEAR(m.mean, 0.0, 4.0 * std::sqrt(s.beta(30) / 2e4));
  EXPECT_NEAR(m.var / s.beta(30), 1.0, 0.05);
  EXPECT_THROW(sample_step(zero, zero, 0, s, rng, VarianceMode::beta), std::out_of_range);
  EXPECT_THROW(sample_step(zero, Tensor({4}), 2, s, rng, VarianceMode::beta), ShapeError);
}

TEST(SampleStep, PosteriorVariance) {
  const NoiseSchedule s = linear_schedule(50);
  Rng rng(7);
  const int t = 20;
  const Tensor draw = sample_step(Tensor({40000}), Tensor({40000}), t, s, rng, VarianceMode::posterior);
  const double expected = s.beta(t) * (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t));
  EXPECT_NEAR(moments(draw.data()).var / expected, 1.0, 0.05);
}

TEST(Sample, OracleDenoiserRecoversConstant) {
  const NoiseSchedule s = linear_schedule(50);
  const double c = 0.7;
  const NoisePredictor oracle = [&](const Tensor& z, int t, int, int) {
    Tensor eps(z.shape());
    const double ab = s.alpha_bar(t);
    for (std::size_t i = 0; i < z.size(); ++i) eps[i] = (z[i] - std::sqrt(ab) * c) / std::sqrt(1 - ab);
    return eps;
  };
  Rng rng(8);
  const Tensor out = sample(oracle, {100, 1, 2, 2}, 50, s, rng);
  double se = 0.0;
  for (double v : out.data()) se += (v - c) * (v - c);
  EXPECT_LE(std::sqrt(se / static_cast<double>(out.size())), 0.05 * c);

  Rng rng2(8);
  const Tensor strided = sample(oracle, {100, 1, 2, 2}, 10, s, rng2);
  for (double v : strided.data()) EXPECT_NEAR(v, c, 0.05 * c);
}

TEST(Sample, ZeroStepsReturnsInitialNoise) {
  const NoiseSchedule s = linear_schedule(50);
  const NoisePredictor never = [](const Tensor&, int, int, int) -> Tensor { throw std::logic_error("called"); };
  Rng a(9), b(9);
  EXPECT_TRUE(bitwise_equal(sample(never, {2, 4}, 0, s, a), b.normal_tensor({2, 4})));
}

TEST(Sample, DeterministicGivenSeed) {
  const NoiseSchedule s = linear_schedule(50);
  const NoisePredictor shrink = [](const Tensor& z, int, int, int) { return 0.3 * z; };
  Rng a(10), b(10);
  EXPECT_TRUE(bitwise_equal(sample(shrink, {3, 5}, 20, s, a), sample(shrink, {3, 5}, 20, s, b)));
  Rng c(11);
  EXPECT_FALSE(bitwise_equal(sample(shrink, {3, 5}, 20, s, c), sample(shrink, {3, 5}, 20, s, b)));
  EXPECT_THROW(sample(shrink, {3, 5}, 51, s, a), std::invalid_argument);
}

TEST(Timesteps, StridedDescending) {
  EXPECT_EQ(strided_timesteps(10, 10), (std::vector<int>{10, 9, 8, 7, 6, 5, 4, 3, 2, 1}));
  const std::vector<int> ts = strided_timesteps(1000, 20);
  ASSERT_EQ(ts.size(), 20u);
  EXPECT_EQ(ts.front(), 1000);
  for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
  EXPECT_GE(ts.back(), 1);
  EXPECT_TRUE(strided_timesteps(100, 0).empty());
}

TEST(Timesteps, FullChainMatchesSampleSteps) {
  const NoiseSchedule s = linear_schedule(20);
  const NoisePredictor model = [](const Tensor& z, int t, int, int) { return (0.01 * t) * z; };
  Rng a(12), b(12);
  const Tensor start = Rng(13).normal_tensor({6});
  const Tensor chained = reverse_chain(start, strided_timesteps(20, 20), model, s, a);
  Tensor manual = start;
  for (int t = 20; t >= 1; --t) manual = sample_step(manual, model(manual, t, 0, 0), t, s, b, s.variance_mode);
  EXPECT_LE(max_abs_diff(chained, manual), 1e-12);
}
