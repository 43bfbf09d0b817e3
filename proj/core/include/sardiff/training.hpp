// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sardiff/conditioning.hpp"
#include "sardiff/denoiser.hpp"
#include "sardiff/diffusion.hpp"
#include "sardiff/lora.hpp"
#include "sardiff/sar_synth.hpp"
#include "sardiff/serialize.hpp"
#include "sardiff/vae.hpp"

namespace sardiff {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  long step = 0;
};

/// Bias-corrected Adam over the trainable entries of `params` that have a
/// gradient in `grads`. Frozen entries are never touched.
void adam_step(ParamSet& params, const GradMap& grads, AdamState& state, const AdamConfig& config);

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(GradMap& grads, double max_norm);

// ---- diffusion loss --------------------------------------------------------

struct DiffusionDraw {
  std::vector<int> timesteps;  // one per sample, uniform in 1..T
  Tensor noise;                // same shape as the latents
};

DiffusionDraw draw_diffusion(const Shape& latent_shape, const NoiseSchedule& schedule, Rng& rng);

/// Per-sample closed-form forward process: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.
Tensor noised_latents(const Tensor& z0, const DiffusionDraw& draw, const NoiseSchedule& schedule);

using NoiseModel = std::function<Var(Tape& tape, Var z_t, std::span<const int> timesteps)>;

/// mean((eps - model(z_t, t))^2) over batch and elements.
Var diffusion_loss_forward(Tape& tape, const NoiseModel& model, const Tensor& z0, const DiffusionDraw& draw,
                           const NoiseSchedule& schedule);

/// Deterministic (posterior-mean) encoding multiplied by the VAE latent scale.
Tensor encode_latents(const VaeParams& vae, const Tensor& images);

struct LossResult {
  double loss = 0.0;
  GradMap grads;
};

/// Encodes `images`, draws t and eps from `rng`, and evaluates the noise
/// prediction loss of `model` with optional control branches.
LossResult diffusion_loss(const DenoiserParams& model, const VaeParams& vae, const Tensor& images,
                          std::span<const TokenSequence> text, const NoiseSchedule& schedule, Rng& rng,
                          bool with_grads = true, std::span<const ControlInput> controls = {});

// ---- training loop ---------------------------------------------------------

enum class TrainTarget { vae, denoiser, control, lora };

TrainTarget parse_train_target(std::string_view name);
std::string_view train_target_name(TrainTarget target);

struct TrainConfig {
  TrainTarget target = TrainTarget::denoiser;
  /// Dataset tier used for training; empty uses every tier.
  std::string tier = "sd40";
  std::size_t batch_size = 16;
  long steps = 1000;
  AdamConfig adam;
  std::uint64_t seed = 0;
  long checkpoint_every = 0;
  long log_every = 100;
  double clip_norm = 1.0;
  double kl_weight = 1e-4;
  int diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  DenoiserConfig denoiser;
  VaeConfig vae;
  std::size_t lora_rank = 2;
  double lora_alpha = 2.0;
  ControlKind control = ControlKind::canny;
  CannyParams canny;
  int tile_factor = 4;

  void validate() const;
  NoiseSchedule schedule() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct MetricRow {
  long step = 0;
  double loss = 0.0;
  double seconds = 0.0;
};

std::string metrics_csv(std::span<const MetricRow> rows);

struct TrainInputs {
  std::vector<SarTile> tiles;
  /// Required for denoiser, control and lora targets.
  const VaeParams* vae = nullptr;
  /// Required for control and lora targets (the frozen trunk).
  const DenoiserParams* base = nullptr;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricRow> metrics;
};

/// File stem of a target's outputs: vae, denoiser, control_<kind>, lora_<tier>.
std::string checkpoint_stem(const TrainConfig& config);

/// Runs `config.steps` optimizer steps. When `out_dir` is non-empty, writes
/// `<stem>.ckpt`, periodic `<stem>_step<N>.ckpt` and `<stem>_metrics.csv`.
TrainResult train(const TrainConfig& config, const TrainInputs& inputs, const std::filesystem::path& out_dir = {},
                  const std::function<void(const MetricRow&)>& on_log = {});

/// Condition image a control branch of `kind` is trained on for a tile.
Tensor training_condition(ControlKind kind, const Tensor& image, const TrainConfig& config);

/// 1 / std of the deterministic latents of up to `max_tiles` images.
double estimate_latent_scale(const VaeParams& vae, std::span<const SarTile> tiles, std::size_t max_tiles = 256);

}  // namespace sardiff
