// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>

#include <json.hpp>

#include "sardiff/autodiff.hpp"
#include "sardiff/params.hpp"
#include "sardiff/rng.hpp"
#include "sardiff/serialize.hpp"

namespace sardiff {

inline constexpr std::size_t kVaeDownsample = 8;

struct VaeConfig {
  std::size_t latent_channels = 4;
  /// Widths of the full, 1/2, 1/4 and 1/8 resolution stages.
  std::array<std::size_t, 4> widths = {8, 16, 32, 32};

  nlohmann::json to_json() const;
  static VaeConfig from_json(const nlohmann::json& j);
};

/// Single-channel convolutional VAE with three stride-2 encoder stages and
/// three nearest-upsample decoder stages.
struct VaeParams {
  VaeConfig config;
  ParamSet weights;
  /// Multiplier applied to encoder means before diffusion; estimated as
  /// 1 / std of encoded training latents.
  double latent_scale = 1.0;
};

VaeParams init_vae(const VaeConfig& config, Rng& rng);

struct VaeEncoding {
  Var mean;
  Var logvar;
};

VaeEncoding vae_encode_forward(Tape& tape, const BoundParams& p, Var x);
Var vae_decode_forward(Tape& tape, const BoundParams& p, Var z);

/// z = mean (deterministic) or mean + exp(logvar / 2) * xi (stochastic).
/// Requires H and W divisible by 8.
Tensor encode(const VaeParams& v, const Tensor& x, Rng& rng, bool stochastic);
/// Encoder mean and log-variance, unscaled.
std::pair<Tensor, Tensor> encode_moments(const VaeParams& v, const Tensor& x);
/// Image in [0, 1] (sigmoid output), extents 8x the latent's.
Tensor decode(const VaeParams& v, const Tensor& z);

struct VaeLoss {
  double total = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  GradMap grads;
};

/// mean((D(z) - x)^2) + kl_weight * mean over latent elements of
/// 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2), with z drawn stochastically.
VaeLoss vae_loss(const VaeParams& v, const Tensor& x, Rng& rng, double kl_weight, bool with_grads = true);

/// Tape-level loss for gradient checks; `noise` is the fixed reparameterization draw.
Var vae_loss_forward(Tape& tape, const BoundParams& p, Var x, const Tensor& noise, double kl_weight);

/// Per-element closed-form KL of N(mu, exp(logvar)) from N(0, 1).
double kl_standard_normal(double mu, double logvar);

Checkpoint vae_checkpoint(const VaeParams& v);
VaeParams vae_from_checkpoint(const Checkpoint& ckpt);

}  // namespace sardiff
