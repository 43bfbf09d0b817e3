// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "sardiff/sar_synth.hpp"

using namespace sardiff;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

double variance(const Tensor& t) {
  const double m = t.mean();
  double v = 0.0;
  for (double x : t.data()) v += (x - m) * (x - m);
  return v / static_cast<double>(t.size() - 1);
}

}  // namespace

TEST(Render, EmptySceneIsBackground) {
  SceneSpec s;
  s.extent = 64;
  s.background = 0.2;
  for (const char* tier : {"sd40", "sd80", "sd160"}) {
    const Tensor r = render_reflectivity(s, tier);
    EXPECT_EQ(r.dim(2), 64u / static_cast<std::size_t>(tier_factor(tier)));
    for (double v : r.data()) EXPECT_NEAR(v, 0.2, 1e-15);
  }
}

TEST(Render, DeterministicAndBoxAveraged) {
  const SceneSpec s = random_scene(5, 128);
  const Tensor fine = render_reflectivity(s, "sd40");
  EXPECT_TRUE(bitwise_equal(fine, render_reflectivity(random_scene(5, 128), "sd40")));
  for (int f : {2, 4}) {
    const Tensor coarse = render_reflectivity(s, f == 2 ? "sd80" : "sd160");
    const std::size_t n = 128 / f;
    ASSERT_EQ(coarse.shape(), (Shape{1, 1, n, n}));
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        double acc = 0.0;
        for (int dy = 0; dy < f; ++dy)
          for (int dx = 0; dx < f; ++dx) acc += fine.at(0, 0, y * f + dy, x * f + dx);
        EXPECT_NEAR(coarse.at(0, 0, y, x), acc / (f * f), 1e-14);
      }
  }
  for (double v : fine.data()) EXPECT_GT(v, 0.0);
  for (SurfaceClass c : kSurfaceClasses) EXPECT_GT(class_style(c).mean, 0.0);
  EXPECT_THROW(render_reflectivity(s, "sd20"), std::invalid_argument);
}

TEST(Render, SceneValidation) {
  SceneSpec s;
  s.extent = 64;
  s.primitives.push_back({Primitive::Kind::rect, SurfaceClass::field, 10, 10, 80, 20});
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.primitives[0].x1 = 40;
  EXPECT_NO_THROW(s.validate());
  s.extent = 60;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Speckle, ExponentialMoments) {
  Rng rng(1);
  const double c = 0.3;
  const Tensor s = apply_speckle(Tensor({1000000}, c), 1, rng);
  EXPECT_NEAR(s.mean() / c, 1.0, 0.01);
  EXPECT_NEAR(variance(s) / (c * c), 1.0, 0.03);
  const Tensor s4 = apply_speckle(Tensor({1000000}, c), 4, rng);
  EXPECT_NEAR(variance(s4) / (c * c / 4), 1.0, 0.05);
}

TEST(Speckle, ZeroAndErrors) {
  Rng rng(2);
  EXPECT_EQ(apply_speckle(Tensor({100}), 3, rng).max_abs(), 0.0);
  EXPECT_THROW(apply_speckle(Tensor({1}, 1.0), 0, rng), std::invalid_argument);
  EXPECT_THROW(apply_speckle(Tensor({1}, -1.0), 1, rng), std::invalid_argument);
}

TEST(Speckle, SingleLookPassesKolmogorovSmirnov) {
  Rng rng(3);
  const std::size_t n = 100000;
  const Tensor s = apply_speckle(Tensor({n}, 1.0), 1, rng);
  std::vector<double> xs(s.data().begin(), s.data().end());
  std::sort(xs.begin(), xs.end());
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double cdf = 1.0 - std::exp(-xs[i]);
    d = std::max({d, cdf - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - cdf});
  }
  EXPECT_LT(d, 1.6276 / std::sqrt(static_cast<double>(n)));
}

TEST(Speckle, MultiLookVarianceScaling) {
  Rng rng(4);
  for (int looks : {1, 2, 4, 8}) {
    const Tensor s = apply_speckle(Tensor({200000}, 1.0), looks, rng);
    EXPECT_NEAR(variance(s) * looks, 1.0, 0.05) << looks;
  }
}

TEST(Standardize, Conventions) {
  EXPECT_EQ(standardize_dynamics(Tensor({1, 1, 4, 4})).max_abs(), 0.0);
  const Tensor flat = standardize_dynamics(Tensor({1, 1, 4, 4}, 0.3));
  for (double v : flat.data()) EXPECT_EQ(v, 1.0);
  Rng rng(5);
  Tensor img({1, 1, 32, 32});
  for (double& v : img.storage()) v = 10.0 * rng.exponential();
  for (bool db : {false, true}) {
    const Tensor a = standardize_dynamics(img, 0.99, db);
    double lo = 1.0, hi = 0.0;
    for (double v : a.data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    EXPECT_EQ(hi, 1.0);
    EXPECT_GE(lo, 0.0);
    // Order is preserved among pixels below the clip point.
    for (std::size_t i = 0; i + 1 < img.size(); ++i) {
      if (a[i] < 1.0 && a[i + 1] < 1.0 && a[i] > 0.0 && a[i + 1] > 0.0) {
        EXPECT_EQ(img[i] < img[i + 1], a[i] < a[i + 1]);
      }
    }
  }
  EXPECT_THROW(standardize_dynamics(Tensor({1}, -1.0)), std::invalid_argument);
}

TEST(Tiling, CountsAndReassembly) {
  Rng rng(6);
  const Tensor img = rng.normal_tensor({1, 1, 512, 512});
  const auto t64 = tile(img, 64, 64);
  EXPECT_EQ(t64.size(), 64u);
  EXPECT_EQ(tile(img, 64, 32).size(), 225u);
  Tensor back({1, 1, 512, 512});
  for (std::size_t k = 0; k < 64; ++k)
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 64; ++x) back.at(0, 0, (k / 8) * 64 + y, (k % 8) * 64 + x) = t64[k].at(0, 0, y, x);
  EXPECT_TRUE(bitwise_equal(back, img));
  EXPECT_EQ(tile(img, 100, 100).size(), 25u);
  EXPECT_THROW(tile(img, 600, 64), std::invalid_argument);
}

TEST(Dataset, GridCountsCaptionsAndDeterminism) {
  const fs::path a = fs::temp_directory_path() / "sardiff_ds_a";
  const fs::path b = fs::temp_directory_path() / "sardiff_ds_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const DatasetConfig cfg;
  make_dataset(1, cfg, Rng(9), a, 1);
  make_dataset(1, cfg, Rng(9), b, 3);
  EXPECT_EQ(slurp(a / "manifest.jsonl"), slurp(b / "manifest.jsonl"));
  const auto sd40 = load_dataset(a, "sd40");
  EXPECT_EQ(sd40.size(), 64u);
  EXPECT_EQ(load_dataset(a, "sd80").size(), 16u);
  EXPECT_EQ(load_dataset(a, "sd160").size(), 4u);
  for (const SarTile& t : sd40) {
    EXPECT_EQ(slurp(a / "sd40" / "sar" / (t.id + ".pgm")), slurp(b / "sd40" / "sar" / (t.id + ".pgm")));
    for (double v : t.amplitude.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }

  const SceneSpec scene = random_scene(sd40[0].scene_seed, cfg.extent);
  const std::vector<int> labels = render_labels(scene);
  for (std::size_t k = 0; k < sd40.size(); ++k) {
    std::set<std::string> present;
    const std::size_t x0 = (k % 8) * 64, y0 = (k / 8) * 64;
    for (std::size_t y = y0; y < y0 + 64; ++y)
      for (std::size_t x = x0; x < x0 + 64; ++x) {
        const int l = labels[y * cfg.extent + x];
        if (l >= 0) present.insert(std::string(class_name(static_cast<SurfaceClass>(l))));
      }
    const std::set<std::string> caption(sd40[k].caption.begin(), sd40[k].caption.end());
    EXPECT_EQ(caption, present) << sd40[k].id;
    EXPECT_EQ(sd40[k].caption.size(), caption.size());
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, ThreadCountDoesNotMatter) {
  DatasetConfig cfg;
  cfg.extent = 128;
  cfg.tiers = {"sd40", "sd80"};
  const auto one = generate_tiles(3, cfg, Rng(4), 1);
  const auto four = generate_tiles(3, cfg, Rng(4), 4);
  ASSERT_EQ(one.size(), four.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    EXPECT_EQ(one[i].id, four[i].id);
    EXPECT_TRUE(bitwise_equal(one[i].amplitude, four[i].amplitude));
  }
}

TEST(DatasetConfig, RejectsUnknownFields) {
  nlohmann::json j = DatasetConfig{}.to_json();
  EXPECT_NO_THROW(DatasetConfig::from_json(j));
  j["speckle"] = 3;
  EXPECT_THROW(DatasetConfig::from_json(j), std::invalid_argument);
  j = DatasetConfig{}.to_json();
  j["version"] = 2;
  EXPECT_THROW(DatasetConfig::from_json(j), std::invalid_argument);
  j = DatasetConfig{}.to_json();
  j["tile_size"] = 60;
  EXPECT_THROW(DatasetConfig::from_json(j), std::invalid_argument);
}
