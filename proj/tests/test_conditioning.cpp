// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "canny_reference.hpp"
#include "sardiff/conditioning.hpp"

using namespace sardiff;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({1, 1, h, w});
  for (double& v : t.storage()) v = rng.uniform();
  return t;
}

}  // namespace

TEST(Canny, ConstantImageHasNoEdges) {
  for (double c : {0.0, 0.3, 1.0}) {
    const ConditionMap m = canny(Tensor({1, 1, 16, 16}, c));
    EXPECT_EQ(m.image.max_abs(), 0.0);
    EXPECT_EQ(m.kind, ControlKind::canny);
  }
}

TEST(Canny, VerticalStepGivesSingleColumn) {
  Tensor img({1, 1, 32, 32});
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 16; x < 32; ++x) img.at(0, 0, y, x) = 1.0;
  const Tensor& e = canny(img).image;
  std::vector<std::size_t> on_columns;
  for (std::size_t x = 0; x < 32; ++x) {
    std::size_t count = 0;
    for (std::size_t y = 0; y < 32; ++y) count += e.at(0, 0, y, x) == 1.0 ? 1 : 0;
    if (count > 0) {
      EXPECT_EQ(count, 32u) << "column " << x;
      on_columns.push_back(x);
    }
  }
  ASSERT_EQ(on_columns.size(), 1u);
  EXPECT_TRUE(on_columns[0] == 15 || on_columns[0] == 16) << on_columns[0];
}

TEST(Canny, OutputIsBinary) {
  const Tensor& e = canny(random_image(24, 24, 1)).image;
  for (double v : e.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST(Canny, InvariantToAffineIntensity) {
  const Tensor img = random_image(32, 32, 2);
  Tensor scaled(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) scaled[i] = 4.0 * img[i] + 0.25;
  EXPECT_TRUE(bitwise_equal(canny(img).image, canny(scaled).image));
}

TEST(Canny, MatchesReferenceImplementation) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tensor img = random_image(16, 16, 100 + seed);
    const CannyParams p{.sigma = 0.8 + 0.02 * static_cast<double>(seed % 10), .low = 0.1, .high = 0.3};
    const std::vector<double> plane(img.data().begin(), img.data().end());
    const std::vector<int> ref = test::canny_reference(plane, 16, 16, p.sigma, p.low, p.high);
    const Tensor& got = canny(img, p).image;
    for (std::size_t i = 0; i < 256; ++i) ASSERT_EQ(static_cast<int>(got[i]), ref[i]) << "seed " << seed << " px " << i;
  }
}

TEST(Canny, HysteresisFollowsEightConnectivity) {
  // 5x5 suppressed-magnitude map: one strong seed, a diagonal weak chain,
  // and an isolated weak pixel.
  std::vector<double> nms(25, 0.0);
  nms[0 * 5 + 0] = 1.0;
  nms[1 * 5 + 1] = 0.5;
  nms[2 * 5 + 2] = 0.5;
  nms[4 * 5 + 0] = 0.5;
  nms[3 * 5 + 4] = 0.05;
  const std::vector<double> e = canny_stages::hysteresis(nms, 5, 5, 0.2, 0.8);
  EXPECT_EQ(e[0], 1.0);
  EXPECT_EQ(e[6], 1.0);
  EXPECT_EQ(e[12], 1.0);
  EXPECT_EQ(e[20], 0.0);
  EXPECT_EQ(e[19], 0.0);
}

TEST(Canny, RejectsBadThresholds) {
  const Tensor img = random_image(8, 8, 3);
  EXPECT_THROW(canny(img, {.sigma = 1.0, .low = 0.3, .high = 0.2}), std::invalid_argument);
  EXPECT_THROW(canny(img, {.sigma = 0.0, .low = 0.1, .high = 0.2}), std::invalid_argument);
  EXPECT_THROW(canny(img, {.sigma = 1.0, .low = 0.0, .high = 0.2}), std::invalid_argument);
}

TEST(Tile, FactorOneIsIdentity) {
  const Tensor img = random_image(16, 16, 4);
  EXPECT_TRUE(bitwise_equal(tile_condition(img, 1).image, img));
}

TEST(Tile, ConstantUnchanged) {
  const Tensor img({1, 1, 16, 16}, 0.42);
  const ConditionMap c = tile_condition(img, 4);
  for (double v : c.image.data()) EXPECT_NEAR(v, 0.42, 1e-15);
}

TEST(Tile, CheckerboardAveragesToHalf) {
  Tensor img({1, 1, 8, 8});
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) img.at(0, 0, y, x) = static_cast<double>((x + y) % 2);
  for (auto mode : {ops::InterpMode::bilinear, ops::InterpMode::nearest}) {
    const ConditionMap c = tile_condition(img, 2, mode);
    for (double v : c.image.data()) EXPECT_EQ(v, 0.5);
  }
}

TEST(Tile, IdempotentOnBlockConstantImagesWithNearestUpsampling) {
  Tensor coarse = random_image(4, 4, 5);
  const Tensor img = ops::interpolate2d(coarse, 4, ops::InterpMode::nearest);
  const Tensor once = tile_condition(img, 4, ops::InterpMode::nearest).image;
  EXPECT_LE(max_abs_diff(once, img), 1e-15);
  const Tensor twice = tile_condition(once, 4, ops::InterpMode::nearest).image;
  EXPECT_LE(max_abs_diff(twice, once), 1e-15);
}

TEST(Tile, RangeAndErrors) {
  const Tensor img = random_image(16, 16, 6);
  const ConditionMap m = tile_condition(img, 4);
  EXPECT_EQ(m.image.shape(), img.shape());
  for (double v : m.image.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(tile_condition(img, 3), std::invalid_argument);
  EXPECT_THROW(tile_condition(img, 0), std::invalid_argument);
  EXPECT_NE(m.provenance.find("factor=4"), std::string::npos);
}
