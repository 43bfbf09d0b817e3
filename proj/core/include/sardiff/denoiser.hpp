// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sardiff/autodiff.hpp"
#include "sardiff/params.hpp"
#include "sardiff/rng.hpp"
#include "sardiff/serialize.hpp"
#include "sardiff/text.hpp"

namespace sardiff {

struct DenoiserConfig {
  std::size_t latent_channels = 4;
  std::size_t base_channels = 16;
  std::size_t levels = 2;
  std::size_t groups = 4;
  std::size_t time_features = 32;
  std::size_t text_dim = 32;
  /// Channels of a spatial condition image fed to a control branch.
  std::size_t cond_channels = 1;
  /// Pixel-to-latent extent ratio expected of condition images.
  std::size_t cond_factor = 8;

  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
  std::size_t embed_dim() const { return 4 * base_channels; }
  void validate() const;

  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

/// Weights of the noise-prediction U-Net: sinusoidal time MLP, pooled text
/// projection added to the time embedding, encoder/bottleneck/decoder
/// residual blocks with skip connections.
struct DenoiserParams {
  DenoiserConfig config;
  ParamSet weights;
};

enum class ControlKind { canny, tile };

ControlKind parse_control_kind(std::string_view name);
std::string_view control_kind_name(ControlKind kind);

/// ControlNet-style branch: a condition stem down to latent resolution, a
/// trainable copy of the trunk encoder, and zero-initialized 1x1
/// projections whose outputs are added to the trunk's skip connections and
/// bottleneck output.
struct ControlBranch {
  ControlKind kind = ControlKind::canny;
  ParamSet weights;
};

struct ControlSpec {
  Tensor condition;
  double strength = 1.0;
  double end_percent = 1.0;

  void validate() const;
};

/// A control branch participating in one forward pass.
struct ControlInput {
  const ControlBranch* branch = nullptr;
  const Tensor* condition = nullptr;
  double strength = 1.0;
};

/// Scaled residuals actually added by each control, in injection-site
/// order (skip 0 .. skip L-1, bottleneck).
struct InjectionTrace {
  std::vector<std::vector<Tensor>> residuals;
};

DenoiserParams init_denoiser(const DenoiserConfig& config, Rng& rng);

/// Branch weights copied from the trunk encoder; stem randomly initialized;
/// projections exactly zero.
ControlBranch init_control_branch(const DenoiserParams& trunk, ControlKind kind, Rng& rng);

/// Sinusoidal timestep features, one row per timestep ([B, dim]).
Tensor timestep_features(std::span<const int> timesteps, std::size_t dim);

/// Text rows for a prompt ([77, d]) from the trunk's embedding table.
Tensor embed_text(const DenoiserParams& params, const TokenSequence& tokens);

struct ControlBinding {
  const BoundParams* weights = nullptr;
  Var condition;
  double strength = 1.0;
};

/// Tape-level forward. `trunk` may contain LoRA-composed weights.
Var denoiser_forward(Tape& tape, const DenoiserConfig& config, const BoundParams& trunk, Var z_t,
                     std::span<const int> timesteps, std::span<const TokenSequence> text,
                     std::span<const ControlBinding> controls = {}, InjectionTrace* trace = nullptr);

/// Inference forward: predicted noise with the same shape as z_t.
Tensor predict_noise(const DenoiserParams& params, const Tensor& z_t, std::span<const int> timesteps,
                     std::span<const TokenSequence> text, std::span<const ControlInput> controls = {},
                     InjectionTrace* trace = nullptr);

Checkpoint denoiser_checkpoint(const DenoiserParams& params);
DenoiserParams denoiser_from_checkpoint(const Checkpoint& ckpt);
Checkpoint control_checkpoint(const ControlBranch& branch, const DenoiserConfig& config);
ControlBranch control_from_checkpoint(const Checkpoint& ckpt);

}  // namespace sardiff
