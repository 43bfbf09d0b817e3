// SPDX-License-Identifier: Apache-2.0
#include "sardiff/lora.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace sardiff {

namespace {

std::pair<std::size_t, std::size_t> matrix_view(const Shape& s) {
  if (s.size() == 2) return {s[0], s[1]};
  if (s.size() == 4) return {s[0], s[1] * s[2] * s[3]};
  throw ShapeError("LoRA target must be a linear or conv weight, got shape " + shape_str(s));
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

}  // namespace

Tensor LoraAdapter::delta() const { return (scale() * ops::matmul(b, a)).reshaped(target_shape); }

ParamSet LoraModel::adapter_params() const {
  ParamSet ps;
  for (const LoraAdapter& ad : adapters) {
    ps.add("lora." + ad.target + ".A", ad.a);
    ps.add("lora." + ad.target + ".B", ad.b);
  }
  return ps;
}

void LoraModel::set_adapter_params(const ParamSet& params) {
  for (LoraAdapter& ad : adapters) {
    const Tensor& a = params.at("lora." + ad.target + ".A");
    const Tensor& b = params.at("lora." + ad.target + ".B");
    require_same_shape(ad.a, a, "set_adapter_params");
    require_same_shape(ad.b, b, "set_adapter_params");
    ad.a = a;
    ad.b = b;
  }
}

std::size_t LoraModel::trainable_count() const {
  std::size_t n = 0;
  for (const LoraAdapter& ad : adapters) n += ad.a.size() + ad.b.size();
  return n;
}

std::vector<std::string> default_lora_targets(const DenoiserParams& params) {
  std::vector<std::string> targets;
  for (const Param& p : params.weights.entries()) {
    const bool weight = p.name.size() > 2 && p.name.ends_with(".w");
    if (weight && (p.value.rank() == 2 || p.value.rank() == 4)) targets.push_back(p.name);
  }
  return targets;
}

LoraModel wrap_lora(const DenoiserParams& base, std::size_t rank, double alpha,
                    std::span<const std::string> targets, Rng& rng) {
  if (rank < 1) throw std::invalid_argument("wrap_lora: rank must be >= 1");
  LoraModel model{base, {}};
  model.base.weights.set_frozen(true);
  for (const std::string& target : targets) {
    if (!base.weights.contains(target)) throw std::invalid_argument("wrap_lora: unknown target '" + target + "'");
    const Shape& shape = base.weights.at(target).shape();
    const auto [m, n] = matrix_view(shape);
    if (rank > std::min(m, n)) {
      throw std::invalid_argument("wrap_lora: rank " + std::to_string(rank) + " exceeds min(" + std::to_string(m) +
                                  ", " + std::to_string(n) + ") for '" + target + "'");
    }
    LoraAdapter ad{target, shape, rank, alpha, Tensor({rank, n}), Tensor({m, rank})};
    for (double& v : ad.a.storage()) v = 0.02 * rng.normal();
    model.adapters.push_back(std::move(ad));
  }
  return model;
}

BoundParams bind_lora(Tape& tape, const LoraModel& model, bool track_grads, BoundParams* adapter_vars) {
  BoundParams bound = bind_params(tape, model.base.weights, false);
  for (const LoraAdapter& ad : model.adapters) {
    const Var a = tape.leaf(ad.a, track_grads);
    const Var b = tape.leaf(ad.b, track_grads);
    if (adapter_vars) {
      (*adapter_vars)["lora." + ad.target + ".A"] = a;
      (*adapter_vars)["lora." + ad.target + ".B"] = b;
    }
    Var delta = ad::reshape(tape, ad::scale(tape, ad::matmul(tape, b, a), ad.scale()), ad.target_shape);
    bound[ad.target] = ad::add(tape, lookup(bound, ad.target), delta);
  }
  return bound;
}

Tensor predict_noise_lora(const LoraModel& model, const Tensor& z_t, std::span<const int> timesteps,
                          std::span<const TokenSequence> text, std::span<const ControlInput> controls) {
  Tape tape;
  const BoundParams trunk = bind_lora(tape, model, false);
  std::vector<BoundParams> branch_params;
  branch_params.reserve(controls.size());
  for (const ControlInput& ci : controls) branch_params.push_back(bind_params(tape, ci.branch->weights, false));
  std::vector<ControlBinding> bindings;
  for (std::size_t i = 0; i < controls.size(); ++i) {
    bindings.push_back({&branch_params[i], tape.constant(*controls[i].condition), controls[i].strength});
  }
  const Var z = tape.constant(z_t);
  return tape.value(denoiser_forward(tape, model.base.config, trunk, z, timesteps, text, bindings));
}

DenoiserParams merge_lora(const DenoiserParams& params, std::span<const LoraAdapter> adapters) {
  DenoiserParams merged = params;
  for (const LoraAdapter& ad : adapters) {
    if (!merged.weights.contains(ad.target)) {
      throw std::invalid_argument("merge_lora: unknown target '" + ad.target + "'");
    }
    Tensor& w = merged.weights.at(ad.target);
    if (w.shape() != ad.target_shape) {
      throw ShapeError("merge_lora: adapter for '" + ad.target + "' has shape " + shape_str(ad.target_shape) +
                       ", weight is " + shape_str(w.shape()));
    }
    w += ad.delta();
  }
  merged.weights.set_frozen(false);
  return merged;
}

Checkpoint lora_checkpoint(const LoraModel& model, const std::string& tier) {
  Checkpoint ck;
  nlohmann::json adapters = nlohmann::json::array();
  for (const LoraAdapter& ad : model.adapters) {
    adapters.push_back({{"target", ad.target}, {"shape", ad.target_shape}, {"rank", ad.rank}, {"alpha", ad.alpha}});
  }
  ck.header = {{"kind", "lora"},
               {"tier", tier},
               {"base_hash", hex64(params_hash(model.base.weights))},
               {"adapters", adapters}};
  ck.tensors = model.adapter_params();
  return ck;
}

std::vector<LoraAdapter> lora_from_checkpoint(const Checkpoint& ckpt, const DenoiserParams& base) {
  if (ckpt.header.value("kind", "") != "lora") throw std::runtime_error("checkpoint is not a LoRA adapter set");
  const std::string expected = hex64(params_hash(base.weights));
  if (ckpt.header.at("base_hash").get<std::string>() != expected) {
    throw std::runtime_error("LoRA adapters were trained against base " + ckpt.header.at("base_hash").get<std::string>() +
                             ", loaded base is " + expected);
  }
  std::vector<LoraAdapter> adapters;
  for (const auto& j : ckpt.header.at("adapters")) {
    LoraAdapter ad;
    ad.target = j.at("target").get<std::string>();
    ad.target_shape = j.at("shape").get<Shape>();
    ad.rank = j.at("rank").get<std::size_t>();
    ad.alpha = j.at("alpha").get<double>();
    ad.a = ckpt.tensors.at("lora." + ad.target + ".A");
    ad.b = ckpt.tensors.at("lora." + ad.target + ".B");
    adapters.push_back(std::move(ad));
  }
  return adapters;
}

bool is_tier_tag(std::string_view tag) {
  return std::find(kTierTags.begin(), kTierTags.end(), tag) != kTierTags.end();
}

void TierRegistry::add(ModelTier tier) {
  if (!is_tier_tag(tier.tag)) throw std::invalid_argument("unknown tier tag '" + tier.tag + "'");
  if (tiers_.contains(tier.tag)) throw std::invalid_argument("duplicate tier tag '" + tier.tag + "'");
  std::string tag = tier.tag;
  tiers_.emplace(std::move(tag), std::move(tier));
}

const ModelTier& TierRegistry::at(const std::string& tag) const {
  auto it = tiers_.find(tag);
  if (it == tiers_.end()) throw std::invalid_argument("tier '" + tag + "' is not registered");
  return it->second;
}

std::vector<std::string> TierRegistry::tags() const {
  std::vector<std::string> out;
  for (const auto& [tag, _] : tiers_) out.push_back(tag);
  return out;
}

}  // namespace sardiff
