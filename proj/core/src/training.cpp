// SPDX-License-Identifier: Apache-2.0
#include "sardiff/training.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "sardiff/text.hpp"

namespace sardiff {

void adam_step(ParamSet& params, const GradMap& grads, AdamState& state, const AdamConfig& config) {
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (Param& p : params.entries()) {
    if (p.frozen) continue;
    const auto g = grads.find(p.name);
    if (g == grads.end()) continue;
    require_same_shape(p.value, g->second, "adam_step");
    auto [mit, fresh_m] = state.m.try_emplace(p.name, p.value.shape());
    auto [vit, fresh_v] = state.v.try_emplace(p.name, p.value.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double gi = g->second[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      p.value[i] -= config.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
    }
  }
}

double clip_grad_norm(GradMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads) {
      for (double& v : g.data()) v *= s;
    }
  }
  return norm;
}

DiffusionDraw draw_diffusion(const Shape& latent_shape, const NoiseSchedule& schedule, Rng& rng) {
  if (latent_shape.empty() || latent_shape[0] == 0) throw ShapeError("draw_diffusion: empty batch");
  DiffusionDraw d;
  for (std::size_t b = 0; b < latent_shape[0]; ++b) {
    d.timesteps.push_back(static_cast<int>(rng.uniform_int(1, schedule.steps())));
  }
  d.noise = rng.normal_tensor(latent_shape);
  return d;
}

Tensor noised_latents(const Tensor& z0, const DiffusionDraw& draw, const NoiseSchedule& schedule) {
  require_same_shape(z0, draw.noise, "noised_latents");
  if (draw.timesteps.size() != z0.dim(0)) throw ShapeError("noised_latents: one timestep per sample required");
  Tensor out(z0.shape());
  const std::size_t per = z0.size() / z0.dim(0);
  for (std::size_t b = 0; b < z0.dim(0); ++b) {
    const double ab = schedule.alpha_bar(draw.timesteps[b]);
    const double s0 = std::sqrt(ab), s1 = std::sqrt(1.0 - ab);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = s0 * z0[i] + s1 * draw.noise[i];
  }
  return out;
}

Var diffusion_loss_forward(Tape& tape, const NoiseModel& model, const Tensor& z0, const DiffusionDraw& draw,
                           const NoiseSchedule& schedule) {
  const Var zt = tape.constant(noised_latents(z0, draw, schedule));
  const Var pred = model(tape, zt, draw.timesteps);
  return ad::mse(tape, pred, tape.constant(draw.noise));
}

Tensor encode_latents(const VaeParams& vae, const Tensor& images) {
  Tensor z = encode_moments(vae, images).first;
  for (double& v : z.data()) v *= vae.latent_scale;
  return z;
}

LossResult diffusion_loss(const DenoiserParams& model, const VaeParams& vae, const Tensor& images,
                          std::span<const TokenSequence> text, const NoiseSchedule& schedule, Rng& rng,
                          bool with_grads, std::span<const ControlInput> controls) {
  const Tensor z0 = encode_latents(vae, images);
  const DiffusionDraw draw = draw_diffusion(z0.shape(), schedule, rng);
  Tape tape;
  const BoundParams trunk = bind_params(tape, model.weights, with_grads);
  std::vector<BoundParams> branch_params;
  branch_params.reserve(controls.size());
  std::vector<ControlBinding> bindings;
  for (const ControlInput& c : controls) {
    branch_params.push_back(bind_params(tape, c.branch->weights, false));
    bindings.push_back({&branch_params.back(), tape.constant(*c.condition), c.strength});
  }
  const NoiseModel net = [&](Tape& t, Var zt, std::span<const int> ts) {
    return denoiser_forward(t, model.config, trunk, zt, ts, text, bindings);
  };
  const Var loss = diffusion_loss_forward(tape, net, z0, draw, schedule);
  LossResult out{tape.value(loss)[0], {}};
  if (with_grads) {
    tape.backward(loss);
    out.grads = collect_grads(tape, trunk, model.weights);
  }
  return out;
}

TrainTarget parse_train_target(std::string_view name) {
  if (name == "vae") return TrainTarget::vae;
  if (name == "denoiser") return TrainTarget::denoiser;
  if (name == "control") return TrainTarget::control;
  if (name == "lora") return TrainTarget::lora;
  throw std::invalid_argument("unknown training target '" + std::string(name) + "'");
}

std::string_view train_target_name(TrainTarget target) {
  switch (target) {
    case TrainTarget::vae: return "vae";
    case TrainTarget::denoiser: return "denoiser";
    case TrainTarget::control: return "control";
    case TrainTarget::lora: return "lora";
  }
  throw std::invalid_argument("invalid training target");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (steps < 0) throw std::invalid_argument("train: steps must be >= 0");
  if (!(adam.lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw std::invalid_argument("train: Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw std::invalid_argument("train: Adam eps must be positive");
  if (checkpoint_every < 0 || log_every < 0) throw std::invalid_argument("train: cadences must be >= 0");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("train: clip_norm must be positive");
  if (kl_weight < 0.0) throw std::invalid_argument("train: kl_weight must be >= 0");
  if (!tier.empty() && !is_tier_tag(tier)) throw std::invalid_argument("train: unknown tier '" + tier + "'");
  if (target == TrainTarget::lora && tier.empty()) throw std::invalid_argument("train: lora target needs a tier");
  if (lora_rank == 0) throw std::invalid_argument("train: lora_rank must be positive");
  if (tile_factor < 1) throw std::invalid_argument("train: tile_factor must be >= 1");
  denoiser.validate();
  (void)schedule();
}

NoiseSchedule TrainConfig::schedule() const { return linear_schedule(diffusion_steps, beta_start, beta_end); }

nlohmann::json TrainConfig::to_json() const {
  return {{"version", kConfigVersion},
          {"target", train_target_name(target)},
          {"tier", tier},
          {"batch_size", batch_size},
          {"steps", steps},
          {"lr", adam.lr},
          {"beta1", adam.beta1},
          {"beta2", adam.beta2},
          {"adam_eps", adam.eps},
          {"seed", seed},
          {"checkpoint_every", checkpoint_every},
          {"log_every", log_every},
          {"clip_norm", clip_norm},
          {"kl_weight", kl_weight},
          {"diffusion_steps", diffusion_steps},
          {"beta_start", beta_start},
          {"beta_end", beta_end},
          {"denoiser", denoiser.to_json()},
          {"vae", vae.to_json()},
          {"lora_rank", lora_rank},
          {"lora_alpha", lora_alpha},
          {"control", control_kind_name(control)},
          {"canny", {{"sigma", canny.sigma}, {"low", canny.low}, {"high", canny.high}}},
          {"tile_factor", tile_factor}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  check_config_fields(j,
                      {"target", "tier", "batch_size", "steps", "lr", "beta1", "beta2", "adam_eps", "seed",
                       "checkpoint_every", "log_every", "clip_norm", "kl_weight", "diffusion_steps", "beta_start",
                       "beta_end", "denoiser", "vae", "lora_rank", "lora_alpha", "control", "canny", "tile_factor"},
                      "train config");
  TrainConfig c;
  if (j.contains("target")) c.target = parse_train_target(j.at("target").get<std::string>());
  c.tier = j.value("tier", c.tier);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("adam_eps", c.adam.eps);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.log_every = j.value("log_every", c.log_every);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  if (j.contains("denoiser")) c.denoiser = DenoiserConfig::from_json(j.at("denoiser"));
  if (j.contains("vae")) c.vae = VaeConfig::from_json(j.at("vae"));
  c.lora_rank = j.value("lora_rank", c.lora_rank);
  c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
  if (j.contains("control")) c.control = parse_control_kind(j.at("control").get<std::string>());
  if (j.contains("canny")) {
    const auto& k = j.at("canny");
    c.canny.sigma = k.value("sigma", c.canny.sigma);
    c.canny.low = k.value("low", c.canny.low);
    c.canny.high = k.value("high", c.canny.high);
  }
  c.tile_factor = j.value("tile_factor", c.tile_factor);
  c.validate();
  return c;
}

std::string metrics_csv(std::span<const MetricRow> rows) {
  std::ostringstream os;
  os << "step,loss,seconds\n" << std::setprecision(10);
  for (const MetricRow& r : rows) os << r.step << ',' << r.loss << ',' << std::fixed << std::setprecision(3)
                                     << r.seconds << std::defaultfloat << std::setprecision(10) << '\n';
  return os.str();
}

std::string checkpoint_stem(const TrainConfig& config) {
  switch (config.target) {
    case TrainTarget::control: return "control_" + std::string(control_kind_name(config.control));
    case TrainTarget::lora: return "lora_" + config.tier;
    default: return std::string(train_target_name(config.target));
  }
}

Tensor training_condition(ControlKind kind, const Tensor& image, const TrainConfig& config) {
  return kind == ControlKind::canny ? canny(image, config.canny).image
                                    : tile_condition(image, config.tile_factor).image;
}

double estimate_latent_scale(const VaeParams& vae, std::span<const SarTile> tiles, std::size_t max_tiles) {
  if (tiles.empty()) throw std::invalid_argument("estimate_latent_scale: no tiles");
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < std::min(max_tiles, tiles.size()); ++i) {
    const Tensor z = encode_moments(vae, tiles[i].amplitude).first;
    for (double v : z.data()) {
      sum += v;
      sq += v * v;
    }
    n += z.size();
  }
  const double mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - mean * mean;
  return var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
}

namespace {

struct Batch {
  Tensor images;
  std::vector<TokenSequence> text;
  Tensor conditions;
};

class Trainer {
 public:
  Trainer(const TrainConfig& config, const TrainInputs& inputs) : config_(config), rng_(config.seed, 0) {
    for (const SarTile& t : inputs.tiles) {
      if (config.tier.empty() || t.tier == config.tier) tiles_.push_back(&t);
    }
    if (tiles_.empty()) {
      throw std::invalid_argument("train: no tiles" + (config.tier.empty() ? std::string() : " for tier " + config.tier));
    }
    for (const SarTile* t : tiles_) prompts_.push_back(tokenize(tile_prompt(*t)));
    if (config.target == TrainTarget::control) {
      for (const SarTile* t : tiles_) conditions_.push_back(training_condition(config.control, t->amplitude, config));
    }
  }

  Batch next_batch() {
    std::vector<Tensor> imgs, conds;
    Batch b;
    for (std::size_t i = 0; i < config_.batch_size; ++i) {
      const auto k = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(tiles_.size()) - 1));
      imgs.push_back(tiles_[k]->amplitude);
      b.text.push_back(prompts_[k]);
      if (!conditions_.empty()) conds.push_back(conditions_[k]);
    }
    b.images = batch_concat(imgs);
    if (!conds.empty()) b.conditions = batch_concat(conds);
    return b;
  }

  Rng& rng() { return rng_; }
  std::span<const SarTile* const> tiles() const { return tiles_; }

 private:
  const TrainConfig& config_;
  Rng rng_;
  std::vector<const SarTile*> tiles_;
  std::vector<TokenSequence> prompts_;
  std::vector<Tensor> conditions_;
};

void optimize(ParamSet& params, GradMap grads, AdamState& state, const TrainConfig& config) {
  clip_grad_norm(grads, config.clip_norm);
  adam_step(params, grads, state, config.adam);
}

}  // namespace

TrainResult train(const TrainConfig& config, const TrainInputs& inputs, const std::filesystem::path& out_dir,
                  const std::function<void(const MetricRow&)>& on_log) {
  config.validate();
  if (config.target != TrainTarget::vae && inputs.vae == nullptr) {
    throw std::invalid_argument("train: target '" + std::string(train_target_name(config.target)) +
                                "' needs a VAE checkpoint");
  }
  if ((config.target == TrainTarget::control || config.target == TrainTarget::lora) && inputs.base == nullptr) {
    throw std::invalid_argument("train: target '" + std::string(train_target_name(config.target)) +
                                "' needs a base denoiser checkpoint");
  }
  Trainer trainer(config, inputs);
  Rng init_rng(config.seed, 1);
  const NoiseSchedule schedule = config.schedule();

  VaeParams vae;
  DenoiserParams denoiser;
  ControlBranch branch;
  LoraModel lora;
  ParamSet lora_params;
  ParamSet* trainable = nullptr;
  switch (config.target) {
    case TrainTarget::vae:
      vae = init_vae(config.vae, init_rng);
      trainable = &vae.weights;
      break;
    case TrainTarget::denoiser:
      denoiser = init_denoiser(config.denoiser, init_rng);
      trainable = &denoiser.weights;
      break;
    case TrainTarget::control:
      branch = init_control_branch(*inputs.base, config.control, init_rng);
      trainable = &branch.weights;
      break;
    case TrainTarget::lora: {
      const std::vector<std::string> targets = default_lora_targets(*inputs.base);
      lora = wrap_lora(*inputs.base, config.lora_rank, config.lora_alpha, targets, init_rng);
      lora_params = lora.adapter_params();
      trainable = &lora_params;
      break;
    }
  }

  auto snapshot = [&]() -> Checkpoint {
    Checkpoint ck;
    switch (config.target) {
      case TrainTarget::vae: ck = vae_checkpoint(vae); break;
      case TrainTarget::denoiser:
        ck = denoiser_checkpoint(denoiser);
        ck.header["schedule"] = schedule.to_json();
        break;
      case TrainTarget::control: ck = control_checkpoint(branch, inputs.base->config); break;
      case TrainTarget::lora:
        lora.set_adapter_params(lora_params);
        ck = lora_checkpoint(lora, config.tier);
        break;
    }
    ck.header["train"] = config.to_json();
    return ck;
  };

  const std::string stem = checkpoint_stem(config);
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  TrainResult result;
  AdamState adam;
  const auto t0 = std::chrono::steady_clock::now();
  for (long step = 1; step <= config.steps; ++step) {
    const Batch batch = trainer.next_batch();
    double loss = 0.0;
    GradMap grads;
    switch (config.target) {
      case TrainTarget::vae: {
        VaeLoss l = vae_loss(vae, batch.images, trainer.rng(), config.kl_weight, true);
        loss = l.total;
        grads = std::move(l.grads);
        break;
      }
      case TrainTarget::denoiser: {
        LossResult l = diffusion_loss(denoiser, *inputs.vae, batch.images, batch.text, schedule, trainer.rng());
        loss = l.loss;
        grads = std::move(l.grads);
        break;
      }
      case TrainTarget::control: {
        const Tensor z0 = encode_latents(*inputs.vae, batch.images);
        const DiffusionDraw draw = draw_diffusion(z0.shape(), schedule, trainer.rng());
        Tape tape;
        const BoundParams trunk = bind_params(tape, inputs.base->weights, false);
        const BoundParams bp = bind_params(tape, branch.weights, true);
        const ControlBinding binding{&bp, tape.constant(batch.conditions), 1.0};
        const NoiseModel net = [&](Tape& t, Var zt, std::span<const int> ts) {
          return denoiser_forward(t, inputs.base->config, trunk, zt, ts, batch.text, std::span(&binding, 1));
        };
        const Var l = diffusion_loss_forward(tape, net, z0, draw, schedule);
        loss = tape.value(l)[0];
        tape.backward(l);
        grads = collect_grads(tape, bp, branch.weights);
        break;
      }
      case TrainTarget::lora: {
        const Tensor z0 = encode_latents(*inputs.vae, batch.images);
        const DiffusionDraw draw = draw_diffusion(z0.shape(), schedule, trainer.rng());
        Tape tape;
        lora.set_adapter_params(lora_params);
        BoundParams adapter_vars;
        const BoundParams composed = bind_lora(tape, lora, true, &adapter_vars);
        const NoiseModel net = [&](Tape& t, Var zt, std::span<const int> ts) {
          return denoiser_forward(t, lora.base.config, composed, zt, ts, batch.text);
        };
        const Var l = diffusion_loss_forward(tape, net, z0, draw, schedule);
        loss = tape.value(l)[0];
        tape.backward(l);
        grads = collect_grads(tape, adapter_vars, lora_params);
        break;
      }
    }
    optimize(*trainable, std::move(grads), adam, config);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.metrics.push_back({step, loss, seconds});
    if (on_log && config.log_every > 0 && (step % config.log_every == 0 || step == config.steps)) {
      on_log(result.metrics.back());
    }
    if (!out_dir.empty() && config.checkpoint_every > 0 && step % config.checkpoint_every == 0 &&
        step != config.steps) {
      save_checkpoint(out_dir / (stem + "_step" + std::to_string(step) + ".ckpt"), snapshot());
    }
  }

  if (config.target == TrainTarget::vae) {
    std::vector<SarTile> subset;
    for (const SarTile* t : trainer.tiles().first(std::min<std::size_t>(256, trainer.tiles().size()))) {
      subset.push_back(*t);
    }
    vae.latent_scale = estimate_latent_scale(vae, subset);
  }
  result.checkpoint = snapshot();
  if (!out_dir.empty()) {
    save_checkpoint(out_dir / (stem + ".ckpt"), result.checkpoint);
    write_file_atomic(out_dir / (stem + "_metrics.csv"), metrics_csv(result.metrics));
  }
  return result;
}

}  // namespace sardiff
