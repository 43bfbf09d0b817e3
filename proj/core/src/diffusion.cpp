// SPDX-License-Identifier: Apache-2.0
#include "sardiff/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace sardiff {

VarianceMode parse_variance_mode(std::string_view name) {
  if (name == "beta") return VarianceMode::beta;
  if (name == "posterior") return VarianceMode::posterior;
  throw std::invalid_argument("unknown variance mode '" + std::string(name) + "'");
}

std::string_view variance_mode_name(VarianceMode mode) {
  return mode == VarianceMode::beta ? "beta" : "posterior";
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas, double beta_start, double beta_end)
    : betas_(std::move(betas)), beta_start_(beta_start), beta_end_(beta_end) {
  if (betas_.empty()) throw std::invalid_argument("noise schedule needs at least one step");
  alphas_.resize(betas_.size());
  alpha_bars_.resize(betas_.size());
  double running = 1.0;
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    if (!(betas_[i] > 0.0 && betas_[i] < 1.0)) {
      throw std::invalid_argument("beta_" + std::to_string(i + 1) + " = " + std::to_string(betas_[i]) +
                                  " outside (0, 1)");
    }
    alphas_[i] = 1.0 - betas_[i];
    running *= alphas_[i];
    alpha_bars_[i] = running;
  }
}

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside 1.." + std::to_string(steps()));
  }
  return static_cast<std::size_t>(t - 1);
}

nlohmann::json NoiseSchedule::to_json() const {
  return {{"T", steps()},
          {"beta_start", beta_start_},
          {"beta_end", beta_end_},
          {"kind", "linear"},
          {"variance_mode", variance_mode_name(variance_mode)}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  NoiseSchedule s = linear_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(),
                                    j.at("beta_end").get<double>());
  if (j.contains("variance_mode")) s.variance_mode = parse_variance_mode(j.at("variance_mode").get<std::string>());
  return s;
}

NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("linear_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    betas[static_cast<std::size_t>(i)] =
        steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
  }
  return NoiseSchedule(std::move(betas), beta_start, beta_end);
}

Tensor diffuse_to(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s) {
  require_same_shape(z0, eps, "diffuse_to");
  const double ab = s.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

Tensor diffuse_step(const Tensor& z_prev, int t, const NoiseSchedule& s, Rng& rng) {
  const double beta = s.beta(t);
  const double a = std::sqrt(1.0 - beta), b = std::sqrt(beta);
  Tensor out(z_prev.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z_prev[i] + b * rng.normal();
  return out;
}

Tensor reverse_step(const Tensor& z_t, const Tensor& eps_hat, double alpha_bar_t, double alpha_bar_prev,
                    VarianceMode mode, bool final_step, Rng& rng) {
  require_same_shape(z_t, eps_hat, "reverse_step");
  const double alpha = alpha_bar_t / alpha_bar_prev;
  const double beta = 1.0 - alpha;
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double eps_coef = beta / std::sqrt(1.0 - alpha_bar_t);
  Tensor out(z_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv_sqrt_alpha * (z_t[i] - eps_coef * eps_hat[i]);
  if (!final_step) {
    const double var = mode == VarianceMode::beta ? beta : beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t);
    const double sigma = std::sqrt(var);
    for (double& v : out.storage()) v += sigma * rng.normal();
  }
  out.check_finite("reverse_step");
  return out;
}

Tensor sample_step(const Tensor& z_t, const Tensor& eps_hat, int t, const NoiseSchedule& s, Rng& rng,
                   VarianceMode mode) {
  return reverse_step(z_t, eps_hat, s.alpha_bar(t), s.alpha_bar(t - 1), mode, t == 1, rng);
}

std::vector<int> strided_timesteps(int t_max, int count) {
  if (count < 0 || t_max < 0) throw std::invalid_argument("strided_timesteps: negative argument");
  if (count > t_max) {
    throw std::invalid_argument("strided_timesteps: " + std::to_string(count) + " steps exceed " +
                                std::to_string(t_max) + " timesteps");
  }
  std::vector<int> ts(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const auto asc = static_cast<int>((static_cast<long long>(k) + 1) * t_max / count);
    ts[static_cast<std::size_t>(count - 1 - k)] = asc;
  }
  return ts;
}

Tensor reverse_chain(Tensor z, const std::vector<int>& timesteps, const NoisePredictor& predict,
                     const NoiseSchedule& s, Rng& rng) {
  const int n = static_cast<int>(timesteps.size());
  for (int i = 0; i < n; ++i) {
    const int t = timesteps[static_cast<std::size_t>(i)];
    const int prev = i + 1 < n ? timesteps[static_cast<std::size_t>(i + 1)] : 0;
    if (prev >= t) throw std::invalid_argument("reverse_chain: timesteps must be strictly decreasing");
    const Tensor eps_hat = predict(z, t, i, n);
    z = reverse_step(z, eps_hat, s.alpha_bar(t), s.alpha_bar(prev), s.variance_mode, prev == 0, rng);
  }
  return z;
}

Tensor sample(const NoisePredictor& predict, const Shape& shape, int steps, const NoiseSchedule& s, Rng& rng) {
  Tensor z = rng.normal_tensor(shape);
  return reverse_chain(std::move(z), strided_timesteps(s.steps(), steps), predict, s, rng);
}

}  // namespace sardiff
