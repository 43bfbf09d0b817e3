// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sardiff/rng.hpp"
#include "sardiff/tensor.hpp"

namespace sardiff {

enum class SurfaceClass { water, field, road, building, forest };

inline constexpr std::array<SurfaceClass, 5> kSurfaceClasses = {
    SurfaceClass::water, SurfaceClass::field, SurfaceClass::road, SurfaceClass::building, SurfaceClass::forest};

std::string_view class_name(SurfaceClass c);
SurfaceClass parse_class(std::string_view name);

struct ClassStyle {
  double mean;           // mean intensity
  double texture_scale;  // correlation length of the texture, in sd40 pixels
  double texture_amp;    // relative modulation depth
};
ClassStyle class_style(SurfaceClass c);

/// Pixel-size factor of a tier relative to sd40 (sd40 = 1, sd80 = 2, sd160 = 4).
int tier_factor(std::string_view tier);

struct Primitive {
  enum class Kind { rect, line };
  Kind kind = Kind::rect;
  SurfaceClass cls = SurfaceClass::field;
  // Rectangles cover [x0, x1) x [y0, y1); lines run from (x0, y0) to (x1, y1).
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width = 1.0;  // lines only
};

/// A scene in sd40 pixel coordinates. Later primitives paint over earlier ones.
struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t extent = 512;
  double background = 0.15;
  std::vector<Primitive> primitives;

  void validate() const;
};

/// Random layout of fields, water bodies, forests, buildings and roads.
SceneSpec random_scene(std::uint64_t seed, std::size_t extent);

/// Per-pixel primitive class index at sd40 ([extent * extent], -1 = background).
std::vector<int> render_labels(const SceneSpec& scene);

/// Noiseless mean intensity [1, 1, E/f, E/f] where f = tier_factor(tier).
Tensor render_reflectivity(const SceneSpec& scene, std::string_view tier);

/// Multiplies every pixel by an independent Gamma(L, 1/L) variate.
Tensor apply_speckle(const Tensor& intensity, int looks, Rng& rng);

/// sqrt(intensity) divided by its `clip_quantile` value and clipped to 1.
/// The quantile is the sorted amplitude at index floor(q * (n - 1)). An
/// all-zero image maps to zeros; a constant positive image maps to ones.
/// With `decibels`, 10 log10(intensity) is mapped affinely so that the
/// (1 - q) and q quantiles land on 0 and 1.
Tensor standardize_dynamics(const Tensor& intensity, double clip_quantile = 0.999, bool decibels = false);

/// Row-major square tiles of a [N, C, H, W] image; partial edge tiles are dropped.
std::vector<Tensor> tile(const Tensor& image, std::size_t tile_size, std::size_t stride);

/// Class tokens present in the sd40 label window, in kSurfaceClasses order.
std::vector<std::string> caption_tokens(const std::vector<int>& labels, std::size_t extent, std::size_t x0,
                                        std::size_t y0, std::size_t size);

struct DatasetConfig {
  std::size_t extent = 512;
  std::size_t tile_size = 64;
  std::size_t stride = 64;
  int looks = 16;
  double clip_quantile = 0.999;
  bool decibels = false;
  std::vector<std::string> tiers = {"sd160", "sd80", "sd40"};

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

struct SarTile {
  std::string id;
  std::string tier;
  std::uint64_t scene_seed = 0;
  Tensor amplitude;     // [1, 1, s, s] in [0, 1]
  Tensor reflectivity;  // paired noiseless render, standardized the same way
  std::vector<std::string> caption;
};

/// Scene `i` draws everything from `rng.split(i)`, so the result does not
/// depend on `threads`.
std::vector<SarTile> generate_tiles(std::size_t n_scenes, const DatasetConfig& config, const Rng& rng,
                                    unsigned threads = 1);

/// Writes tiles as 16-bit PGM under `root/<tier>/{sar,optical}/` and a JSON
/// lines manifest `root/manifest.jsonl`. Returns the manifest path.
std::filesystem::path make_dataset(std::size_t n_scenes, const DatasetConfig& config, const Rng& rng,
                                   const std::filesystem::path& root, unsigned threads = 1);

/// Reads a dataset written by make_dataset, optionally restricted to one tier.
std::vector<SarTile> load_dataset(const std::filesystem::path& root, std::string_view tier = "");

/// Prompt used for training and sampling: tier tag, "sar", then the caption.
std::string tile_prompt(const SarTile& t);

}  // namespace sardiff
