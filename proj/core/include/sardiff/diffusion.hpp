// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sardiff/rng.hpp"
#include "sardiff/tensor.hpp"

namespace sardiff {

enum class VarianceMode { beta, posterior };

VarianceMode parse_variance_mode(std::string_view name);
std::string_view variance_mode_name(VarianceMode mode);

/// Per-timestep tables for t = 1..T. `alpha_bar(0)` is defined as 1.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(std::vector<double> betas, double beta_start, double beta_end);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return alphas_.at(index(t)); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars_.at(index(t)); }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  VarianceMode variance_mode = VarianceMode::posterior;

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);

 private:
  std::size_t index(int t) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
};

/// Linearly spaced betas from beta_start to beta_end, both inclusive.
NoiseSchedule linear_schedule(int steps, double beta_start = 1e-4, double beta_end = 0.02);

/// Closed-form forward corruption: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
Tensor diffuse_to(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s);

/// One Markov forward step: a draw from N(sqrt(1 - beta_t) z_prev, beta_t I).
Tensor diffuse_step(const Tensor& z_prev, int t, const NoiseSchedule& s, Rng& rng);

/// Reverse step between two arbitrary levels abar_t < abar_prev using the
/// epsilon parameterization of the mean. With `final_step` the noise term is
/// omitted and no random numbers are drawn.
Tensor reverse_step(const Tensor& z_t, const Tensor& eps_hat, double alpha_bar_t, double alpha_bar_prev,
                    VarianceMode mode, bool final_step, Rng& rng);

/// Ancestral step from t to t-1. sigma_1 is zero.
Tensor sample_step(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s, Rng& rng,
                   VarianceMode mode);

/// `count` evenly strided timesteps within 1..t_max, largest first. The
/// first element is always t_max.
std::vector<int> strided_timesteps(int t_max, int count);

/// Noise prediction callback: (z_t, t, step index within chain, chain length).
using NoisePredictor = std::function<Tensor(const Tensor& z_t, int t, int step_index, int steps)>;

/// Runs the reverse chain over `timesteps` (descending) starting from `z`.
/// Consecutive timesteps are bridged with the respaced betas
/// 1 - abar_t / abar_prev, which reduce to beta_t when no step is skipped.
Tensor reverse_chain(Tensor z, const std::vector<int>& timesteps, const NoisePredictor& predict,
                     const NoiseSchedule& s, Rng& rng);

/// Full generation from z_T ~ N(0, I) with `steps` strided timesteps.
Tensor sample(const NoisePredictor& predict, const Shape& shape, int steps, const NoiseSchedule& s, Rng& rng);

}  // namespace sardiff
