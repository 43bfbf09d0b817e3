// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sardiff/conditioning.hpp"
#include "sardiff/denoiser.hpp"
#include "sardiff/diffusion.hpp"
#include "sardiff/lora.hpp"
#include "sardiff/vae.hpp"

namespace sardiff {

inline constexpr std::string_view kDefaultPrompt = "high resolution sar scene";

struct StageControl {
  ControlKind kind = ControlKind::canny;
  double strength = 0.8;
  double end_percent = 1.0;
};

struct StageConfig {
  int scale_factor = 2;
  std::string tier = "sd40";
  std::vector<StageControl> controls;
  int steps = 20;
  double denoise_strength = 0.6;
  std::uint64_t seed = 0;
  std::string prompt{kDefaultPrompt};
  ops::InterpMode upscale_mode = ops::InterpMode::bilinear;
  CannyParams canny;
  int tile_factor = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static StageConfig from_json(const nlohmann::json& j);
};

struct PipelineConfig {
  std::vector<StageConfig> stages;
  std::string input;
  std::string output;
  std::string dump_intermediates;

  void validate() const;
  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
};

/// Two refinement stages: sd80 with canny (end 0.7) and tile (end 0.8),
/// then sd40 with both at end 0.8; strength 0.8 and factor 2 throughout.
PipelineConfig default_pipeline_config();

/// Number of leading reverse steps (out of `steps`) on which a control with
/// this end percent is active.
int control_active_steps(double end_percent, int steps);

/// Channel-wise interpolation of a latent batch.
Tensor latent_upscale(const Tensor& z, int factor, ops::InterpMode mode = ops::InterpMode::bilinear);

/// Trained weights addressed by the pipeline.
struct ModelRegistry {
  VaeParams vae;
  DenoiserParams base;
  NoiseSchedule schedule = linear_schedule(1000);
  TierRegistry tiers;
  std::map<ControlKind, ControlBranch> controls;

  /// Base weights merged with the tier's adapters.
  const DenoiserParams& model(const std::string& tier) const;
  const ControlBranch& control(ControlKind kind) const;

 private:
  mutable std::map<std::string, DenoiserParams> merged_;
};

/// Loads vae.ckpt, denoiser.ckpt, lora_<tier>.ckpt and control_<kind>.ckpt
/// from `dir`. Tier tags without an adapter file resolve to the base model.
ModelRegistry load_registry(const std::filesystem::path& dir);

struct StageResult {
  Tensor upscaled;  // pixel-space bilinear upscale of the stage input
  std::vector<ConditionMap> conditions;
  std::vector<int> timesteps;
  /// Reverse steps on which each configured control was applied, in order.
  std::vector<int> control_applications;
  Tensor output;
};

StageResult run_stage(const Tensor& image, const StageConfig& stage, const ModelRegistry& registry);

struct PipelineResult {
  Tensor output;
  std::vector<StageResult> stages;
};

PipelineResult run_pipeline(const Tensor& image, const PipelineConfig& config, const ModelRegistry& registry);

/// Prompt-conditioned generation from pure noise with `steps` strided
/// timesteps, decoded to [count, 1, size, size].
Tensor sample_images(const DenoiserParams& model, const VaeParams& vae, const NoiseSchedule& schedule,
                     const std::string& prompt, std::size_t count, std::size_t size, int steps, Rng& rng);

/// Same as above with one prompt per image.
Tensor sample_images(const DenoiserParams& model, const VaeParams& vae, const NoiseSchedule& schedule,
                     const std::vector<std::string>& prompts, std::size_t size, int steps, Rng& rng);

/// Writes every stage's upscaled input, condition maps and output as 16-bit
/// PGM plus a `trace.json` with timesteps and control counts.
void dump_intermediates(const PipelineResult& result, const std::filesystem::path& dir);

}  // namespace sardiff
