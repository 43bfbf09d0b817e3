// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sardiff/tensor.hpp"

namespace sardiff {

struct CheckResult {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;

  bool passed() const { return value < threshold; }
};

inline constexpr double kGradCheckThreshold = 1e-4;

/// Central-difference gradient checks on small shapes: primitive ops, the
/// diffusion loss through the denoiser with and without a control branch,
/// the LoRA-composed denoiser and the VAE loss. `max_checks` coordinates are
/// sampled per component.
std::vector<CheckResult> gradient_suite(std::uint64_t seed = 0, std::size_t max_checks = 64);

struct PixelStats {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t count = 0;
};

/// Pooled mean and (population) standard deviation over all values.
PixelStats pixel_stats(std::span<const Tensor> images);

/// Peak signal-to-noise ratio for signals in [0, 1]: 10 log10(1 / mse).
double psnr(const Tensor& reference, const Tensor& estimate);

}  // namespace sardiff
