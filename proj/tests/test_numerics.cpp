// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "sardiff/autodiff.hpp"
#include "sardiff/ops.hpp"
#include "sardiff/rng.hpp"
#include "sardiff/serialize.hpp"
#include "sardiff/tensor.hpp"

using namespace sardiff;

namespace {

Tensor uniform_tensor(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.storage()) v = 2.0 * rng.uniform() - 1.0;
  return t;
}

Tensor loop_conv(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), K = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Tensor y({B, O, Ho, Wo});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = b.empty() ? 0.0 : b[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ki = 0; ki < K; ++ki)
              for (std::size_t kj = 0; kj < K; ++kj) {
                const long yi = static_cast<long>(i * stride + ki) - pad;
                const long xj = static_cast<long>(j * stride + kj) - pad;
                if (yi < 0 || xj < 0 || yi >= static_cast<long>(H) || xj >= static_cast<long>(W)) continue;
                acc += x.at(n, c, yi, xj) * w.at(o, c, ki, kj);
              }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

}  // namespace

TEST(Tensor, ShapeAndFiniteness) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t({2, 2}, 1.0);
  EXPECT_EQ(t.size(), 4u);
  EXPECT_TRUE(t.all_finite());
  t[1] = std::nan("");
  EXPECT_THROW(t.check_finite("test"), NonFiniteError);
  EXPECT_THROW(Tensor({2}) + Tensor({3}), ShapeError);
}

TEST(Tensor, ShapeErrorNamesBothShapes) {
  try {
    ops::conv2d(Tensor({1, 2, 4, 4}), Tensor({1, 3, 3, 3}), nullptr, 1, 1);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1, 2, 4, 4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[1, 3, 3, 3]"), std::string::npos) << msg;
  }
}

TEST(Rng, ReproducibleAndSplittable) {
  Rng a(42, 3), b(42, 3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(42, 4);
  EXPECT_NE(Rng(42, 3).next_u64(), c.next_u64());
  Rng parent(7);
  Rng s1 = parent.split(5);
  parent.normal();
  Rng s2 = parent.split(5);
  EXPECT_EQ(s1.next_u64(), s2.next_u64());
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const auto k = a.uniform_int(-2, 2);
    ASSERT_GE(k, -2);
    ASSERT_LE(k, 2);
  }
}

TEST(Conv2d, ScalingKernelDoubles) {
  Tensor x({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w({1, 1, 1, 1}, 2.0);
  Tensor b({1}, 0.0);
  const Tensor y = ops::conv2d(x, w, &b, 1, 0);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y[i], 2.0 * x[i]);
}

TEST(Conv2d, ZeroWeightGivesBias) {
  Rng rng(1);
  const Tensor x = uniform_tensor({2, 3, 5, 5}, rng);
  Tensor w({4, 3, 3, 3});
  Tensor b({4}, std::vector<double>{0.5, -1, 2, 0});
  const Tensor y = ops::conv2d(x, w, &b, 1, 1);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y.at(n, o, i, j), b[o]);
}

TEST(Conv2d, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Tensor x = uniform_tensor({1, 2, 5, 5}, rng);
    const Tensor w = uniform_tensor({3, 2, 3, 3}, rng);
    const Tensor b = uniform_tensor({3}, rng);
    for (int stride : {1, 2}) {
      for (int pad : {0, 1}) {
        const Tensor y = ops::conv2d(x, w, &b, stride, pad);
        EXPECT_LE(max_abs_diff(y, loop_conv(x, w, b, stride, pad)), 1e-12);
      }
    }
  }
}

TEST(Linear, HandCases) {
  Tensor x({1, 2}, std::vector<double>{2, 3});
  Tensor w({1, 2}, std::vector<double>{1, 1});
  Tensor b({1}, 0.0);
  EXPECT_EQ(ops::linear(x, w, &b)[0], 5.0);
  Tensor eye({2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor zb({2});
  EXPECT_TRUE(bitwise_equal(ops::linear(x, eye, &zb), x));
}

TEST(Linear, MatchesTripleLoop) {
  Rng rng(9);
  const Tensor x = uniform_tensor({4, 7}, rng);
  const Tensor w = uniform_tensor({5, 7}, rng);
  const Tensor b = uniform_tensor({5}, rng);
  const Tensor y = ops::linear(x, w, &b);
  double err = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t o = 0; o < 5; ++o) {
      double acc = b[o];
      for (std::size_t k = 0; k < 7; ++k) acc += x[i * 7 + k] * w[o * 7 + k];
      err = std::max(err, std::abs(acc - y[i * 5 + o]));
    }
  EXPECT_LE(err, 1e-12);
  EXPECT_THROW(ops::linear(x, uniform_tensor({5, 6}, rng), nullptr), ShapeError);
}

TEST(Activations, Silu) {
  EXPECT_EQ(ops::silu(Tensor({1}, 0.0))[0], 0.0);
  EXPECT_NEAR(ops::silu(Tensor({1}, 2.0))[0], 2.0 / (1.0 + std::exp(-2.0)), 1e-15);
}

TEST(GroupNorm, NormalizesGroups) {
  Rng rng(3);
  Tensor x = uniform_tensor({2, 4, 3, 3}, rng);
  const Tensor gamma({4}, 1.0), beta({4}, 0.0);
  const Tensor y = ops::group_norm(x, 2, gamma, beta);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t g = 0; g < 2; ++g) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t c = 2 * g; c < 2 * g + 2; ++c)
        for (std::size_t i = 0; i < 9; ++i) {
          const double v = y[(n * 4 + c) * 9 + i];
          s += v;
          s2 += v * v;
        }
      EXPECT_NEAR(s / 18, 0.0, 1e-12);
      EXPECT_NEAR(s2 / 18, 1.0, 1e-3);
    }
  }
  EXPECT_THROW(ops::group_norm(x, 3, gamma, beta), std::invalid_argument);
}

TEST(Interpolate, ConstantsAndIdentity) {
  Rng rng(4);
  const Tensor x = uniform_tensor({1, 2, 3, 3}, rng);
  for (auto mode : {ops::InterpMode::nearest, ops::InterpMode::bilinear}) {
    EXPECT_TRUE(bitwise_equal(ops::interpolate2d(x, 1, mode), x));
    for (int f : {2, 3, 4}) {
      const Tensor y = ops::interpolate2d(Tensor({1, 1, 3, 3}, 0.7), f, mode);
      for (double v : y.data()) EXPECT_NEAR(v, 0.7, 1e-15);
    }
  }
}

TEST(Interpolate, BilinearHandTable) {
  const Tensor x({1, 1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  const Tensor y = ops::interpolate2d(x, 2, ops::InterpMode::bilinear);
  const double expected[16] = {0.0, 0.25, 0.75, 1.0,  0.5, 0.75, 1.25, 1.5,
                               1.5, 1.75, 2.25, 2.5, 2.0, 2.25, 2.75, 3.0};
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y[i], expected[i], 1e-15) << i;
}

TEST(GradCheck, Quadratic) {
  const Tensor x({2}, std::vector<double>{1, 2});
  Tape tape;
  const Var v = tape.leaf(x, true);
  tape.backward(ad::sum(tape, ad::square(tape, v)));
  EXPECT_EQ(tape.grad(v)[0], 2.0);
  EXPECT_EQ(tape.grad(v)[1], 4.0);
  const double err = grad_check([](Tape& t, std::span<const Var> in) { return ad::sum(t, ad::square(t, in[0])); },
                                std::span(&x, 1));
  EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, DetectsWrongBackward) {
  Rng rng(3);
  const Tensor x = rng.normal_tensor({4, 5});
  // sum(x^2) with one gradient entry scaled by 0.9 in the backward pass.
  const auto faulty = [](Tape& t, std::span<const Var> in) {
    const Var x = in[0];
    const Tensor& v = t.value(x);
    double s = 0.0;
    for (double e : v.data()) s += e * e;
    return t.record(Tensor::scalar(s), {x}, [x](Tape& tp, const Tensor& g) {
      Tensor d = tp.value(x);
      for (double& e : d.storage()) e *= 2.0 * g[0];
      d[7] *= 0.9;
      tp.accumulate(x, d);
    });
  };
  EXPECT_GT(grad_check(faulty, std::span(&x, 1)), 1e-2);
}

TEST(GradCheck, ConvAndGroupNorm) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(seed);
    const std::vector<Tensor> conv_in = {uniform_tensor({2, 2, 5, 5}, rng), uniform_tensor({3, 2, 3, 3}, rng),
                                         uniform_tensor({3}, rng), uniform_tensor({2, 3, 3, 3}, rng)};
    const double conv_err = grad_check(
        [](Tape& t, std::span<const Var> v) {
          const Var y = ad::conv2d(t, v[0], v[1], v[2], 2, 1);
          return ad::sum(t, ad::mul(t, y, v[3]));
        },
        conv_in, {.seed = seed});
    EXPECT_LT(conv_err, 1e-6);

    const std::vector<Tensor> gn_in = {uniform_tensor({2, 4, 3, 3}, rng), uniform_tensor({4}, rng),
                                       uniform_tensor({4}, rng), uniform_tensor({2, 4, 3, 3}, rng)};
    const double gn_err = grad_check(
        [](Tape& t, std::span<const Var> v) {
          return ad::sum(t, ad::mul(t, ad::group_norm(t, v[0], 2, v[1], v[2]), v[3]));
        },
        gn_in, {.seed = seed});
    EXPECT_LT(gn_err, 1e-5);
  }
}

TEST(GradCheck, EveryPrimitive) {
  // Random shapes per seed; each composition ends in a weighted sum.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const std::size_t b = 1 + rng.uniform_int(0, 1), c = 2 * (1 + rng.uniform_int(0, 1));
    const std::size_t h = 2 + rng.uniform_int(0, 3), n = 2 + rng.uniform_int(0, 4);
    const Shape img{b, c, h, h};
    const double eps_tol = 1e-5;

    const std::vector<Tensor> lin = {uniform_tensor({b, n}, rng), uniform_tensor({3, n}, rng),
                                     uniform_tensor({3}, rng), uniform_tensor({b, 3}, rng)};
    EXPECT_LT(grad_check([](Tape& t, std::span<const Var> v) {
      return ad::sum(t, ad::mul(t, ad::linear(t, v[0], v[1], v[2]), v[3]));
    }, lin), eps_tol) << "linear " << seed;

    const std::vector<Tensor> mm = {uniform_tensor({b, n}, rng), uniform_tensor({n, 3}, rng),
                                    uniform_tensor({b, 3}, rng)};
    EXPECT_LT(grad_check([](Tape& t, std::span<const Var> v) {
      return ad::sum(t, ad::mul(t, ad::matmul(t, v[0], v[1]), v[2]));
    }, mm), eps_tol) << "matmul " << seed;

    const std::vector<Tensor> act = {uniform_tensor(img, rng), uniform_tensor(img, rng)};
    EXPECT_LT(grad_check([](Tape& t, std::span<const Var> v) {
      const Var a = ad::add(t, ad::silu(t, v[0]), ad::sigmoid(t, v[0]));
      const Var e = ad::scale(t, ad::exp(t, ad::add_scalar(t, v[0], -0.5)), 0.3);
      return ad::sum(t, ad::mul(t, ad::sub(t, a, e), v[1]));
    }, act), eps_tol) << "activations " << seed;

    const std::vector<Tensor> cat = {uniform_tensor(img, rng), uniform_tensor(img, rng), uniform_tensor({b, 2 * c}, rng),
                                     uniform_tensor({b, 2 * c, h, h}, rng)};
    EXPECT_LT(grad_check([](Tape& t, std::span<const Var> v) {
      const Var y = ad::add_channel_bias(t, ad::concat_channels(t, v[0], v[1]), v[2]);
      return ad::sum(t, ad::mul(t, y, v[3]));
    }, cat), eps_tol) << "concat " << seed;

    for (auto mode : {ops::InterpMode::nearest, ops::InterpMode::bilinear}) {
      const std::vector<Tensor> up = {uniform_tensor(img, rng), uniform_tensor({b, c, 2 * h, 2 * h}, rng)};
      EXPECT_LT(grad_check([mode](Tape& t, std::span<const Var> v) {
        return ad::sum(t, ad::mul(t, ad::interpolate2d(t, v[0], 2, mode), v[1]));
      }, up), eps_tol) << "interpolate " << seed;
    }

    const std::vector<Tensor> loss = {uniform_tensor(img, rng), uniform_tensor(img, rng)};
    const std::size_t flat = shape_numel(img);
    EXPECT_LT(grad_check([flat](Tape& t, std::span<const Var> v) {
      const Var sq = ad::square(t, ad::reshape(t, v[0], {flat}));
      return ad::add(t, ad::mse(t, v[0], v[1]), ad::mean(t, sq));
    }, loss), eps_tol) << "mse " << seed;
  }
}

TEST(Tnsr, RoundTripBothDtypes) {
  Rng rng(5);
  const Tensor t = uniform_tensor({2, 3, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, t, DType::f64);
  EXPECT_TRUE(bitwise_equal(read_tensor(ss), t));
  std::stringstream s32;
  write_tensor(s32, t, DType::f32);
  const Tensor r = read_tensor(s32);
  EXPECT_EQ(r.shape(), t.shape());
  EXPECT_LE(max_abs_diff(r, t), 1e-7);
  std::stringstream header;
  write_tensor(header, Tensor({1}, 1.0));
  EXPECT_EQ(header.str().substr(0, 4), "TNSR");
}
