// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "sardiff/denoiser.hpp"

namespace sardiff {

/// Low-rank delta (alpha / rank) * B * A on one frozen weight. Conv kernels
/// [Cout, Cin, k, k] are adapted through their [Cout, Cin*k*k] matrix view.
struct LoraAdapter {
  std::string target;
  Shape target_shape;
  std::size_t rank = 0;
  double alpha = 1.0;
  Tensor a;  // [rank, n]
  Tensor b;  // [m, rank]

  double scale() const { return alpha / static_cast<double>(rank); }
  /// Effective delta with the target weight's shape.
  Tensor delta() const;
};

/// A frozen base denoiser plus adapters.
struct LoraModel {
  DenoiserParams base;
  std::vector<LoraAdapter> adapters;

  /// Adapter tensors as "lora.<target>.A" / "lora.<target>.B".
  ParamSet adapter_params() const;
  void set_adapter_params(const ParamSet& params);
  std::size_t trainable_count() const;
};

/// Every conv and linear weight of the trunk (the embedding table excluded).
std::vector<std::string> default_lora_targets(const DenoiserParams& params);

/// Freezes the base, attaches adapters with A ~ N(0, 0.02^2) and B = 0.
/// Throws on unknown targets or rank > min(m, n).
LoraModel wrap_lora(const DenoiserParams& base, std::size_t rank, double alpha,
                    std::span<const std::string> targets, Rng& rng);

/// Binds the frozen base and adapters; each target name maps to the
/// composed weight W + scale * reshape(B A). Adapter leaves are returned in
/// `adapter_vars` keyed by their ParamSet names.
BoundParams bind_lora(Tape& tape, const LoraModel& model, bool track_grads, BoundParams* adapter_vars = nullptr);

Tensor predict_noise_lora(const LoraModel& model, const Tensor& z_t, std::span<const int> timesteps,
                          std::span<const TokenSequence> text, std::span<const ControlInput> controls = {});

/// W <- W + scale * B A for every adapter. Applying twice adds the delta twice.
DenoiserParams merge_lora(const DenoiserParams& params, std::span<const LoraAdapter> adapters);

/// Adapter-only checkpoint tied to its base by `params_hash(base.weights)`.
Checkpoint lora_checkpoint(const LoraModel& model, const std::string& tier);
/// Throws if the checkpoint was trained against a different base.
std::vector<LoraAdapter> lora_from_checkpoint(const Checkpoint& ckpt, const DenoiserParams& base);

inline constexpr std::array<std::string_view, 3> kTierTags = {"sd160", "sd80", "sd40"};
bool is_tier_tag(std::string_view tag);

/// A resolution-specific model: base checkpoint plus tier adapters.
struct ModelTier {
  std::string tag;
  std::string base_id;
  std::vector<LoraAdapter> adapters;
};

class TierRegistry {
 public:
  void add(ModelTier tier);
  bool contains(const std::string& tag) const { return tiers_.contains(tag); }
  const ModelTier& at(const std::string& tag) const;
  std::vector<std::string> tags() const;

 private:
  std::map<std::string, ModelTier> tiers_;
};

}  // namespace sardiff
