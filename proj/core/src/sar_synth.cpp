// SPDX-License-Identifier: Apache-2.0
#include "sardiff/sar_synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "sardiff/image_io.hpp"
#include "sardiff/ops.hpp"
#include "sardiff/serialize.hpp"

namespace sardiff {

std::string_view class_name(SurfaceClass c) {
  switch (c) {
    case SurfaceClass::water: return "water";
    case SurfaceClass::field: return "field";
    case SurfaceClass::road: return "road";
    case SurfaceClass::building: return "building";
    case SurfaceClass::forest: return "forest";
  }
  throw std::invalid_argument("invalid surface class");
}

SurfaceClass parse_class(std::string_view name) {
  for (SurfaceClass c : kSurfaceClasses) {
    if (class_name(c) == name) return c;
  }
  throw std::invalid_argument("unknown surface class '" + std::string(name) + "'");
}

ClassStyle class_style(SurfaceClass c) {
  switch (c) {
    case SurfaceClass::water: return {0.02, 48.0, 0.2};
    case SurfaceClass::field: return {0.25, 24.0, 0.3};
    case SurfaceClass::road: return {0.06, 16.0, 0.1};
    case SurfaceClass::building: return {1.6, 4.0, 0.4};
    case SurfaceClass::forest: return {0.45, 6.0, 0.35};
  }
  throw std::invalid_argument("invalid surface class");
}

int tier_factor(std::string_view tier) {
  if (tier == "sd40") return 1;
  if (tier == "sd80") return 2;
  if (tier == "sd160") return 4;
  throw std::invalid_argument("unknown tier '" + std::string(tier) + "' (expected sd160, sd80 or sd40)");
}

void SceneSpec::validate() const {
  if (extent == 0 || extent % 32 != 0) throw std::invalid_argument("scene extent must be a positive multiple of 32");
  if (!(background > 0.0)) throw std::invalid_argument("scene background intensity must be positive");
  const auto e = static_cast<double>(extent);
  for (const Primitive& p : primitives) {
    for (double v : {p.x0, p.y0, p.x1, p.y1}) {
      if (!(v >= 0.0 && v <= e)) throw std::invalid_argument("primitive outside the scene extent");
    }
    if (p.kind == Primitive::Kind::rect && !(p.x0 < p.x1 && p.y0 < p.y1)) {
      throw std::invalid_argument("rectangle must have positive area");
    }
    if (p.kind == Primitive::Kind::line && !(p.width > 0.0)) throw std::invalid_argument("line width must be positive");
  }
}

SceneSpec random_scene(std::uint64_t seed, std::size_t extent) {
  SceneSpec s;
  s.seed = seed;
  s.extent = extent;
  Rng rng(seed, 0);
  const auto e = static_cast<double>(extent);
  auto rect = [&](SurfaceClass cls, double min_frac, double max_frac) {
    const double w = e * (min_frac + (max_frac - min_frac) * rng.uniform());
    const double h = e * (min_frac + (max_frac - min_frac) * rng.uniform());
    const double x0 = (e - w) * rng.uniform();
    const double y0 = (e - h) * rng.uniform();
    s.primitives.push_back({Primitive::Kind::rect, cls, x0, y0, x0 + w, y0 + h, 1.0});
  };
  for (auto i = rng.uniform_int(3, 6); i > 0; --i) rect(SurfaceClass::field, 1.0 / 6.0, 0.5);
  for (auto i = rng.uniform_int(1, 3); i > 0; --i) rect(SurfaceClass::forest, 1.0 / 8.0, 1.0 / 3.0);
  for (auto i = rng.uniform_int(0, 2); i > 0; --i) rect(SurfaceClass::water, 1.0 / 8.0, 1.0 / 3.0);
  for (auto i = rng.uniform_int(1, 3); i > 0; --i) {
    Primitive p{Primitive::Kind::line, SurfaceClass::road, 0, 0, 0, 0, 3.0 + 4.0 * rng.uniform()};
    if (rng.uniform() < 0.5) {
      p.y0 = e * rng.uniform();
      p.y1 = e * rng.uniform();
      p.x1 = e;
    } else {
      p.x0 = e * rng.uniform();
      p.x1 = e * rng.uniform();
      p.y1 = e;
    }
    s.primitives.push_back(p);
  }
  for (auto i = rng.uniform_int(2, 8); i > 0; --i) rect(SurfaceClass::building, 1.0 / 32.0, 0.1);
  return s;
}

namespace {

bool covers(const Primitive& p, double x, double y) {
  if (p.kind == Primitive::Kind::rect) return x >= p.x0 && x < p.x1 && y >= p.y0 && y < p.y1;
  const double dx = p.x1 - p.x0, dy = p.y1 - p.y0;
  const double len2 = dx * dx + dy * dy;
  double u = len2 > 0.0 ? ((x - p.x0) * dx + (y - p.y0) * dy) / len2 : 0.0;
  u = std::clamp(u, 0.0, 1.0);
  const double px = p.x0 + u * dx - x, py = p.y0 + u * dy - y;
  return px * px + py * py <= 0.25 * p.width * p.width;
}

// Smooth value noise in [-1, 1] with cells of `scale` pixels.
class ValueNoise {
 public:
  ValueNoise(std::size_t extent, double scale, Rng rng) : scale_(scale) {
    n_ = static_cast<std::size_t>(std::ceil(static_cast<double>(extent) / scale)) + 2;
    grid_.resize(n_ * n_);
    for (double& v : grid_) v = 2.0 * rng.uniform() - 1.0;
  }

  double at(double x, double y) const {
    const double gx = x / scale_, gy = y / scale_;
    const auto ix = static_cast<std::size_t>(gx), iy = static_cast<std::size_t>(gy);
    const double fx = smooth(gx - static_cast<double>(ix)), fy = smooth(gy - static_cast<double>(iy));
    const double a = grid_[iy * n_ + ix], b = grid_[iy * n_ + ix + 1];
    const double c = grid_[(iy + 1) * n_ + ix], d = grid_[(iy + 1) * n_ + ix + 1];
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy;
  }

 private:
  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }
  double scale_;
  std::size_t n_ = 0;
  std::vector<double> grid_;
};

}  // namespace

std::vector<int> render_labels(const SceneSpec& scene) {
  scene.validate();
  const std::size_t e = scene.extent;
  std::vector<int> labels(e * e, -1);
  const auto ed = static_cast<double>(e);
  for (const Primitive& p : scene.primitives) {
    // Pixel-centre bounding box of the primitive; covers() decides inside it.
    const double pad = p.kind == Primitive::Kind::line ? 0.5 * p.width : 0.0;
    const auto lo = [&](double v) { return static_cast<std::size_t>(std::clamp(std::floor(v - pad - 0.5), 0.0, ed)); };
    const auto hi = [&](double v) { return static_cast<std::size_t>(std::clamp(std::ceil(v + pad + 0.5), 0.0, ed)); };
    const std::size_t xa = lo(std::min(p.x0, p.x1)), xb = hi(std::max(p.x0, p.x1));
    const std::size_t ya = lo(std::min(p.y0, p.y1)), yb = hi(std::max(p.y0, p.y1));
    for (std::size_t y = ya; y < yb; ++y) {
      for (std::size_t x = xa; x < xb; ++x) {
        if (covers(p, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) labels[y * e + x] = static_cast<int>(p.cls);
      }
    }
  }
  return labels;
}

Tensor render_reflectivity(const SceneSpec& scene, std::string_view tier) {
  const int f = tier_factor(tier);
  const std::vector<int> labels = render_labels(scene);
  const std::size_t e = scene.extent;
  std::vector<ValueNoise> textures;
  for (SurfaceClass c : kSurfaceClasses) {
    textures.emplace_back(e, class_style(c).texture_scale, Rng(scene.seed, 100 + static_cast<std::uint64_t>(c)));
  }
  Tensor img({1, 1, e, e}, scene.background);
  for (std::size_t y = 0; y < e; ++y) {
    for (std::size_t x = 0; x < e; ++x) {
      const int label = labels[y * e + x];
      if (label < 0) continue;
      const ClassStyle st = class_style(static_cast<SurfaceClass>(label));
      const double n = textures[static_cast<std::size_t>(label)].at(static_cast<double>(x), static_cast<double>(y));
      img[y * e + x] = st.mean * (1.0 + st.texture_amp * n);
    }
  }
  return f == 1 ? img : ops::avg_pool2d(img, f);
}

Tensor apply_speckle(const Tensor& intensity, int looks, Rng& rng) {
  if (looks < 1) throw std::invalid_argument("apply_speckle: looks must be >= 1");
  Tensor out(intensity.shape());
  for (std::size_t i = 0; i < intensity.size(); ++i) {
    if (intensity[i] < 0.0) throw std::invalid_argument("apply_speckle: intensity must be non-negative");
    double g = 0.0;
    for (int l = 0; l < looks; ++l) g += rng.exponential();
    out[i] = intensity[i] * g / looks;
  }
  return out;
}

namespace {

double quantile_of(std::vector<double> v, double q) {
  const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(v.size() - 1)));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

}  // namespace

Tensor standardize_dynamics(const Tensor& intensity, double clip_quantile, bool decibels) {
  if (!(clip_quantile > 0.0 && clip_quantile <= 1.0)) {
    throw std::invalid_argument("standardize_dynamics: clip_quantile must be in (0, 1]");
  }
  if (intensity.size() == 0) return intensity;
  for (double v : intensity.data()) {
    if (!(v >= 0.0)) throw std::invalid_argument("standardize_dynamics: intensity must be non-negative");
  }
  Tensor out(intensity.shape());
  if (intensity.max_abs() == 0.0) return out;

  if (decibels) {
    constexpr double kFloor = 1e-10;
    std::vector<double> db(intensity.size());
    for (std::size_t i = 0; i < db.size(); ++i) db[i] = 10.0 * std::log10(std::max(intensity[i], kFloor));
    const double hi = quantile_of(db, clip_quantile);
    const double lo = quantile_of(db, 1.0 - clip_quantile);
    for (std::size_t i = 0; i < db.size(); ++i) {
      out[i] = hi > lo ? std::clamp((db[i] - lo) / (hi - lo), 0.0, 1.0) : 1.0;
    }
    return out;
  }

  std::vector<double> amp(intensity.size());
  for (std::size_t i = 0; i < amp.size(); ++i) amp[i] = std::sqrt(intensity[i]);
  double clip = quantile_of(amp, clip_quantile);
  if (clip <= 0.0) clip = *std::max_element(amp.begin(), amp.end());
  for (std::size_t i = 0; i < amp.size(); ++i) out[i] = std::min(amp[i] / clip, 1.0);
  return out;
}

std::vector<Tensor> tile(const Tensor& image, std::size_t tile_size, std::size_t stride) {
  require_rank(image, 4, "tile");
  if (tile_size == 0 || stride == 0) throw std::invalid_argument("tile: size and stride must be positive");
  const std::size_t n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (tile_size > h || tile_size > w) {
    throw std::invalid_argument("tile: tile size " + std::to_string(tile_size) + " exceeds image " +
                                shape_str(image.shape()));
  }
  std::vector<Tensor> tiles;
  for (std::size_t y0 = 0; y0 + tile_size <= h; y0 += stride) {
    for (std::size_t x0 = 0; x0 + tile_size <= w; x0 += stride) {
      Tensor t({n, c, tile_size, tile_size});
      for (std::size_t b = 0; b < n * c; ++b) {
        for (std::size_t y = 0; y < tile_size; ++y) {
          for (std::size_t x = 0; x < tile_size; ++x) {
            t[(b * tile_size + y) * tile_size + x] = image[(b * h + y0 + y) * w + x0 + x];
          }
        }
      }
      tiles.push_back(std::move(t));
    }
  }
  return tiles;
}

std::vector<std::string> caption_tokens(const std::vector<int>& labels, std::size_t extent, std::size_t x0,
                                        std::size_t y0, std::size_t size) {
  if (x0 + size > extent || y0 + size > extent || labels.size() != extent * extent) {
    throw std::invalid_argument("caption_tokens: window outside the label map");
  }
  std::array<bool, kSurfaceClasses.size()> present{};
  for (std::size_t y = y0; y < y0 + size; ++y) {
    for (std::size_t x = x0; x < x0 + size; ++x) {
      const int l = labels[y * extent + x];
      if (l >= 0) present[static_cast<std::size_t>(l)] = true;
    }
  }
  std::vector<std::string> out;
  for (SurfaceClass c : kSurfaceClasses) {
    if (present[static_cast<std::size_t>(c)]) out.emplace_back(class_name(c));
  }
  return out;
}

void DatasetConfig::validate() const {
  if (tile_size == 0 || tile_size % 8 != 0) throw std::invalid_argument("dataset: tile_size must be a multiple of 8");
  if (stride == 0) throw std::invalid_argument("dataset: stride must be positive");
  if (looks < 1) throw std::invalid_argument("dataset: looks must be >= 1");
  if (!(clip_quantile > 0.0 && clip_quantile <= 1.0)) throw std::invalid_argument("dataset: clip_quantile in (0, 1]");
  if (tiers.empty()) throw std::invalid_argument("dataset: at least one tier is required");
  for (const std::string& t : tiers) {
    const auto f = static_cast<std::size_t>(tier_factor(t));
    if (extent % f != 0 || extent / f < tile_size) {
      throw std::invalid_argument("dataset: extent " + std::to_string(extent) + " too small for tier " + t);
    }
  }
}

nlohmann::json DatasetConfig::to_json() const {
  return {{"version", kConfigVersion}, {"extent", extent},           {"tile_size", tile_size},
          {"stride", stride},          {"looks", looks},             {"clip_quantile", clip_quantile},
          {"decibels", decibels},      {"tiers", tiers}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
  check_config_fields(j, {"extent", "tile_size", "stride", "looks", "clip_quantile", "decibels", "tiers"}, "dataset");
  DatasetConfig c;
  c.extent = j.value("extent", c.extent);
  c.tile_size = j.value("tile_size", c.tile_size);
  c.stride = j.value("stride", c.stride);
  c.looks = j.value("looks", c.looks);
  c.clip_quantile = j.value("clip_quantile", c.clip_quantile);
  c.decibels = j.value("decibels", c.decibels);
  c.tiers = j.value("tiers", c.tiers);
  c.validate();
  return c;
}

namespace {

std::string tile_id(std::size_t scene, std::string_view tier, std::size_t k) {
  std::ostringstream os;
  os << 's' << std::setw(5) << std::setfill('0') << scene << '_' << tier << '_' << std::setw(3) << k;
  return os.str();
}

std::vector<SarTile> scene_tiles(std::size_t index, const DatasetConfig& config, const Rng& rng) {
  Rng scene_rng = rng.split(index);
  const std::uint64_t scene_seed = scene_rng.next_u64();
  const SceneSpec scene = random_scene(scene_seed, config.extent);
  const std::vector<int> labels = render_labels(scene);
  std::vector<SarTile> out;
  for (std::size_t ti = 0; ti < config.tiers.size(); ++ti) {
    const std::string& tier = config.tiers[ti];
    const auto f = static_cast<std::size_t>(tier_factor(tier));
    const Tensor refl = render_reflectivity(scene, tier);
    Rng speckle_rng(scene_seed, 1 + ti);
    const Tensor sar = standardize_dynamics(apply_speckle(refl, config.looks, speckle_rng), config.clip_quantile,
                                            config.decibels);
    const Tensor optical = standardize_dynamics(refl, config.clip_quantile, config.decibels);
    const std::vector<Tensor> sar_tiles = tile(sar, config.tile_size, config.stride);
    const std::vector<Tensor> opt_tiles = tile(optical, config.tile_size, config.stride);
    const std::size_t per_row = (sar.dim(3) - config.tile_size) / config.stride + 1;
    for (std::size_t k = 0; k < sar_tiles.size(); ++k) {
      const std::size_t x0 = (k % per_row) * config.stride * f, y0 = (k / per_row) * config.stride * f;
      out.push_back({tile_id(index, tier, k), tier, scene_seed, sar_tiles[k], opt_tiles[k],
                     caption_tokens(labels, config.extent, x0, y0, config.tile_size * f)});
    }
  }
  return out;
}

template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::string rel_path(const SarTile& t, std::string_view kind) {
  return t.tier + "/" + std::string(kind) + "/" + t.id + ".pgm";
}

}  // namespace

std::vector<SarTile> generate_tiles(std::size_t n_scenes, const DatasetConfig& config, const Rng& rng,
                                    unsigned threads) {
  if (n_scenes == 0) throw std::invalid_argument("generate_tiles: need at least one scene");
  config.validate();
  std::vector<std::vector<SarTile>> per_scene(n_scenes);
  parallel_for(n_scenes, threads, [&](std::size_t i) { per_scene[i] = scene_tiles(i, config, rng); });
  std::vector<SarTile> out;
  for (auto& v : per_scene) std::move(v.begin(), v.end(), std::back_inserter(out));
  return out;
}

std::filesystem::path make_dataset(std::size_t n_scenes, const DatasetConfig& config, const Rng& rng,
                                   const std::filesystem::path& root, unsigned threads) {
  if (n_scenes == 0) throw std::invalid_argument("make_dataset: need at least one scene");
  config.validate();
  for (const std::string& tier : config.tiers) {
    std::filesystem::create_directories(root / tier / "sar");
    std::filesystem::create_directories(root / tier / "optical");
  }
  std::vector<std::string> lines(n_scenes);
  parallel_for(n_scenes, threads, [&](std::size_t i) {
    std::string block;
    for (const SarTile& t : scene_tiles(i, config, rng)) {
      write_pgm(root / rel_path(t, "sar"), from_tensor(t.amplitude));
      write_pgm(root / rel_path(t, "optical"), from_tensor(t.reflectivity));
      const nlohmann::json rec = {{"tile_id", t.id},
                                  {"tier", t.tier},
                                  {"scene_seed", t.scene_seed},
                                  {"caption", t.caption},
                                  {"paths", {{"sar", rel_path(t, "sar")}, {"optical", rel_path(t, "optical")}}}};
      block += rec.dump() + "\n";
    }
    lines[i] = std::move(block);
  });
  std::string manifest;
  for (const std::string& l : lines) manifest += l;
  const std::filesystem::path path = root / "manifest.jsonl";
  write_file_atomic(path, manifest);
  write_file_atomic(root / "dataset.json", config.to_json().dump(2) + "\n");
  return path;
}

std::vector<SarTile> load_dataset(const std::filesystem::path& root, std::string_view tier) {
  std::ifstream is(root / "manifest.jsonl");
  if (!is) throw std::runtime_error("cannot open dataset manifest under '" + root.string() + "'");
  std::vector<SarTile> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const nlohmann::json rec = nlohmann::json::parse(line);
    if (!tier.empty() && rec.at("tier") != tier) continue;
    SarTile t;
    t.id = rec.at("tile_id");
    t.tier = rec.at("tier");
    t.scene_seed = rec.at("scene_seed");
    t.caption = rec.at("caption").get<std::vector<std::string>>();
    t.amplitude = to_tensor(read_pgm(root / rec.at("paths").at("sar").get<std::string>()));
    t.reflectivity = to_tensor(read_pgm(root / rec.at("paths").at("optical").get<std::string>()));
    out.push_back(std::move(t));
  }
  return out;
}

std::string tile_prompt(const SarTile& t) {
  std::string p = t.tier + " sar";
  for (const std::string& w : t.caption) p += " " + w;
  return p;
}

}  // namespace sardiff
