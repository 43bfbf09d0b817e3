// SPDX-License-Identifier: Apache-2.0
#include "sardiff/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace sardiff {

namespace canny_stages {

std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

std::vector<double> smooth(const std::vector<double>& img, std::size_t h, std::size_t w, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const auto clampi = [](int v, std::size_t n) { return static_cast<std::size_t>(std::clamp(v, 0, static_cast<int>(n) - 1)); };
  std::vector<double> tmp(h * w), out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * img[y * w + clampi(static_cast<int>(x) + i, w)];
      tmp[y * w + x] = s;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * tmp[clampi(static_cast<int>(y) + i, h) * w + x];
      out[y * w + x] = s;
    }
  }
  return out;
}

void sobel(const std::vector<double>& img, std::size_t h, std::size_t w, std::vector<double>& gx,
           std::vector<double>& gy) {
  gx.assign(h * w, 0.0);
  gy.assign(h * w, 0.0);
  auto px = [&](long y, long x) {
    y = std::clamp(y, 0L, static_cast<long>(h) - 1);
    x = std::clamp(x, 0L, static_cast<long>(w) - 1);
    return img[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };
  for (long y = 0; y < static_cast<long>(h); ++y) {
    for (long x = 0; x < static_cast<long>(w); ++x) {
      const double a = px(y - 1, x - 1), b = px(y - 1, x), c = px(y - 1, x + 1);
      const double d = px(y, x - 1), f = px(y, x + 1);
      const double g = px(y + 1, x - 1), hh = px(y + 1, x), i = px(y + 1, x + 1);
      const std::size_t idx = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
      gx[idx] = (c + 2.0 * f + i) - (a + 2.0 * d + g);
      gy[idx] = (g + 2.0 * hh + i) - (a + 2.0 * b + c);
    }
  }
}

std::vector<double> non_max_suppression(const std::vector<double>& gx, const std::vector<double>& gy,
                                        std::size_t h, std::size_t w) {
  std::vector<double> mag(h * w);
  for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::hypot(gx[i], gy[i]);
  auto at = [&](long y, long x) {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return 0.0;
    return mag[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };
  std::vector<double> out(h * w, 0.0);
  for (long y = 0; y < static_cast<long>(h); ++y) {
    for (long x = 0; x < static_cast<long>(w); ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
      const double m = mag[idx];
      if (m <= 0.0) continue;
      double angle = std::atan2(gy[idx], gx[idx]) * 180.0 / std::numbers::pi;
      if (angle < 0.0) angle += 180.0;
      // (dy, dx) of the neighbour ahead along the gradient.
      long dy = 0, dx = 1;
      if (angle >= 22.5 && angle < 67.5) {
        dy = 1;
        dx = 1;
      } else if (angle >= 67.5 && angle < 112.5) {
        dy = 1;
        dx = 0;
      } else if (angle >= 112.5 && angle < 157.5) {
        dy = 1;
        dx = -1;
      }
      if (m > at(y - dy, x - dx) && m >= at(y + dy, x + dx)) out[idx] = m;
    }
  }
  return out;
}

std::vector<double> hysteresis(const std::vector<double>& nms, std::size_t h, std::size_t w, double low_abs,
                               double high_abs) {
  std::vector<double> out(h * w, 0.0);
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < nms.size(); ++i) {
    if (nms[i] > 0.0 && nms[i] >= high_abs) {
      out[i] = 1.0;
      stack.push_back(i);
    }
  }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const long y = static_cast<long>(i / w), x = static_cast<long>(i % w);
    for (long dy = -1; dy <= 1; ++dy) {
      for (long dx = -1; dx <= 1; ++dx) {
        const long ny = y + dy, nx = x + dx;
        if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
        const std::size_t j = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
        if (out[j] == 0.0 && nms[j] > 0.0 && nms[j] >= low_abs) {
          out[j] = 1.0;
          stack.push_back(j);
        }
      }
    }
  }
  return out;
}

}  // namespace canny_stages

namespace {

void require_planes(const Tensor& image, std::string_view op) {
  require_rank(image, 4, op);
  if (image.dim(1) != 1) throw ShapeError(std::string(op) + ": expected single-channel image, got " + shape_str(image.shape()));
}

}  // namespace

ConditionMap canny(const Tensor& image, const CannyParams& params, const std::string& source_id) {
  if (!(params.sigma > 0.0)) throw std::invalid_argument("canny: sigma must be positive");
  if (!(params.low > 0.0 && params.low < params.high)) {
    throw std::invalid_argument("canny: thresholds must satisfy 0 < low < high");
  }
  require_planes(image, "canny");
  const std::size_t h = image.dim(2), w = image.dim(3);
  Tensor out(image.shape());
  for (std::size_t n = 0; n < image.dim(0); ++n) {
    std::vector<double> plane(image.data().begin() + static_cast<std::ptrdiff_t>(n * h * w),
                              image.data().begin() + static_cast<std::ptrdiff_t>((n + 1) * h * w));
    const std::vector<double> smoothed = canny_stages::smooth(plane, h, w, params.sigma);
    std::vector<double> gx, gy;
    canny_stages::sobel(smoothed, h, w, gx, gy);
    double max_mag = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) max_mag = std::max(max_mag, std::hypot(gx[i], gy[i]));
    if (max_mag <= 0.0) continue;
    const std::vector<double> nms = canny_stages::non_max_suppression(gx, gy, h, w);
    const std::vector<double> edges =
        canny_stages::hysteresis(nms, h, w, params.low * max_mag, params.high * max_mag);
    std::copy(edges.begin(), edges.end(), out.data().begin() + static_cast<std::ptrdiff_t>(n * h * w));
  }
  std::ostringstream prov;
  prov << "canny(src=" << source_id << ",sigma=" << params.sigma << ",low=" << params.low << ",high=" << params.high
       << ")";
  return {ControlKind::canny, std::move(out), prov.str()};
}

ConditionMap tile_condition(const Tensor& image, int factor, ops::InterpMode upsample, const std::string& source_id) {
  require_planes(image, "tile_condition");
  if (factor < 1) throw std::invalid_argument("tile_condition: factor must be >= 1");
  Tensor out = ops::interpolate2d(ops::avg_pool2d(image, factor), factor, upsample);
  std::ostringstream prov;
  prov << "tile(src=" << source_id << ",factor=" << factor << ",upsample=" << ops::interp_mode_name(upsample) << ")";
  return {ControlKind::tile, std::move(out), prov.str()};
}

}  // namespace sardiff
