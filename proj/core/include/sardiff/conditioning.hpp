// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "sardiff/denoiser.hpp"
#include "sardiff/ops.hpp"
#include "sardiff/tensor.hpp"

namespace sardiff {

struct ConditionMap {
  ControlKind kind = ControlKind::canny;
  Tensor image;  // [N, 1, H, W]; canny maps are binary, tile maps lie in [0, 1]
  std::string provenance;
};

struct CannyParams {
  double sigma = 1.0;
  /// Hysteresis thresholds as fractions of the per-image maximum gradient magnitude.
  double low = 0.1;
  double high = 0.3;
};

/// Classic Canny: Gaussian smoothing (radius ceil(3 sigma), replicated
/// borders), Sobel gradients, non-maximum suppression over four direction
/// sectors, and double-threshold hysteresis with 8-connectivity.
///
/// Ties along the gradient direction are broken toward the lower-index
/// neighbour: a pixel survives suppression when its magnitude is strictly
/// greater than the neighbour behind it and at least the one ahead of it.
ConditionMap canny(const Tensor& image, const CannyParams& params = {}, const std::string& source_id = "");

/// Box-downsample by `factor`, then upsample back to the input extents.
ConditionMap tile_condition(const Tensor& image, int factor, ops::InterpMode upsample = ops::InterpMode::bilinear,
                            const std::string& source_id = "");

/// Single-plane stages, exposed for tests and benchmarks ([H, W] row-major).
namespace canny_stages {

std::vector<double> gaussian_kernel(double sigma);
std::vector<double> smooth(const std::vector<double>& img, std::size_t h, std::size_t w, double sigma);
void sobel(const std::vector<double>& img, std::size_t h, std::size_t w, std::vector<double>& gx,
           std::vector<double>& gy);
std::vector<double> non_max_suppression(const std::vector<double>& gx, const std::vector<double>& gy,
                                        std::size_t h, std::size_t w);
std::vector<double> hysteresis(const std::vector<double>& nms, std::size_t h, std::size_t w, double low_abs,
                               double high_abs);

}  // namespace canny_stages

}  // namespace sardiff
