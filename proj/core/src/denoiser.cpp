// SPDX-License-Identifier: Apache-2.0
#include "sardiff/denoiser.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "layers.hpp"

namespace sardiff {

namespace {

std::string lvl(const char* prefix, std::size_t l) { return prefix + std::to_string(l); }

void add_resblock(ParamSet& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t emb,
                  Rng& rng) {
  layers::add_group_norm(ps, name + ".norm1", cin);
  layers::add_conv(ps, name + ".conv1", cin, cout, 3, rng);
  layers::add_linear(ps, name + ".emb", emb, cout, rng, 1.0);
  layers::add_group_norm(ps, name + ".norm2", cout);
  layers::add_conv(ps, name + ".conv2", cout, cout, 3, rng, 1.0);
  if (cin != cout) layers::add_conv(ps, name + ".skip", cin, cout, 1, rng, 1.0);
}

Var resblock(Tape& t, const BoundParams& p, const std::string& name, Var x, Var emb_act, std::size_t groups) {
  Var h = ad::silu(t, layers::group_norm(t, p, name + ".norm1", x, groups));
  h = layers::conv(t, p, name + ".conv1", h);
  h = ad::add_channel_bias(t, h, layers::linear(t, p, name + ".emb", emb_act));
  h = ad::silu(t, layers::group_norm(t, p, name + ".norm2", h, groups));
  h = layers::conv(t, p, name + ".conv2", h);
  const Var skip = p.contains(name + ".skip.w") ? layers::conv(t, p, name + ".skip", x) : x;
  return ad::add(t, skip, h);
}

// Encoder blocks shared by the trunk and the control-branch copy.
void add_encoder(ParamSet& ps, const DenoiserConfig& c, Rng& rng) {
  const std::size_t emb = c.embed_dim();
  layers::add_conv(ps, "conv_in", c.latent_channels, c.channels_at(0), 3, rng, 1.0);
  std::size_t prev = c.channels_at(0);
  for (std::size_t l = 0; l < c.levels; ++l) {
    add_resblock(ps, lvl("enc", l), prev, c.channels_at(l), emb, rng);
    layers::add_conv(ps, lvl("down", l), c.channels_at(l), c.channels_at(l), 3, rng, 1.0);
    prev = c.channels_at(l);
  }
  add_resblock(ps, "mid", prev, prev, emb, rng);
}

void require_latent(const DenoiserConfig& c, const Tensor& z) {
  require_rank(z, 4, "predict_noise");
  const std::size_t div = std::size_t{1} << c.levels;
  if (z.dim(1) != c.latent_channels || z.dim(2) % div != 0 || z.dim(3) % div != 0 || z.dim(2) == 0) {
    throw ShapeError("predict_noise: latent " + shape_str(z.shape()) + " needs " +
                     std::to_string(c.latent_channels) + " channels and extents divisible by " + std::to_string(div));
  }
}

}  // namespace

void DenoiserConfig::validate() const {
  if (latent_channels == 0 || base_channels == 0 || levels == 0 || groups == 0 || time_features == 0 ||
      text_dim == 0 || cond_channels == 0 || cond_factor == 0) {
    throw std::invalid_argument("denoiser config: all sizes must be positive");
  }
  if (time_features % 2 != 0) throw std::invalid_argument("denoiser config: time_features must be even");
  if (base_channels % groups != 0) {
    throw std::invalid_argument("denoiser config: groups must divide base_channels");
  }
  if (cond_factor < 8 || (cond_factor & (cond_factor - 1)) != 0) {
    throw std::invalid_argument("denoiser config: cond_factor must be a power of two >= 8");
  }
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"latent_channels", latent_channels}, {"base_channels", base_channels}, {"levels", levels},
          {"groups", groups},                   {"time_features", time_features}, {"text_dim", text_dim},
          {"cond_channels", cond_channels},     {"cond_factor", cond_factor}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.levels = j.value("levels", c.levels);
  c.groups = j.value("groups", c.groups);
  c.time_features = j.value("time_features", c.time_features);
  c.text_dim = j.value("text_dim", c.text_dim);
  c.cond_channels = j.value("cond_channels", c.cond_channels);
  c.cond_factor = j.value("cond_factor", c.cond_factor);
  c.validate();
  return c;
}

ControlKind parse_control_kind(std::string_view name) {
  if (name == "canny") return ControlKind::canny;
  if (name == "tile") return ControlKind::tile;
  throw std::invalid_argument("unknown control kind '" + std::string(name) + "'");
}

std::string_view control_kind_name(ControlKind kind) { return kind == ControlKind::canny ? "canny" : "tile"; }

void ControlSpec::validate() const {
  if (!(strength >= 0.0 && strength <= 2.0)) throw std::invalid_argument("control strength must lie in [0, 2]");
  if (!(end_percent >= 0.0 && end_percent <= 1.0)) {
    throw std::invalid_argument("control end_percent must lie in [0, 1]");
  }
}

DenoiserParams init_denoiser(const DenoiserConfig& config, Rng& rng) {
  config.validate();
  DenoiserParams p{config, {}};
  ParamSet& ps = p.weights;
  const std::size_t emb = config.embed_dim();
  layers::add_linear(ps, "time.fc1", config.time_features, emb, rng);
  layers::add_linear(ps, "time.fc2", emb, emb, rng, 1.0);
  Tensor table({vocab_size(), config.text_dim});
  for (double& v : table.storage()) v = rng.normal();
  ps.add("text.table", std::move(table));
  layers::add_linear(ps, "text.proj", config.text_dim, emb, rng, 1.0);

  add_encoder(ps, config, rng);
  std::size_t cur = config.channels_at(config.levels - 1);
  for (std::size_t l = config.levels; l-- > 0;) {
    const std::size_t ch = config.channels_at(l);
    layers::add_conv(ps, lvl("up", l), cur, ch, 3, rng, 1.0);
    add_resblock(ps, lvl("dec", l), 2 * ch, ch, emb, rng);
    cur = ch;
  }
  layers::add_group_norm(ps, "out.norm", config.channels_at(0));
  layers::add_conv(ps, "out.conv", config.channels_at(0), config.latent_channels, 3, rng, 1.0);
  return p;
}

ControlBranch init_control_branch(const DenoiserParams& trunk, ControlKind kind, Rng& rng) {
  const DenoiserConfig& c = trunk.config;
  ControlBranch branch{kind, {}};
  ParamSet& ps = branch.weights;
  // Stem: stride-2 convs from pixel resolution down to latent resolution.
  std::size_t cin = c.cond_channels;
  std::size_t width = 8;
  std::size_t stages = 0;
  for (std::size_t f = c.cond_factor; f > 1; f /= 2) ++stages;
  for (std::size_t s = 0; s < stages; ++s) {
    const std::size_t cout = s + 1 == stages ? c.channels_at(0) : width;
    layers::add_conv(ps, lvl("stem", s), cin, cout, 3, rng);
    cin = cout;
    width *= 2;
  }
  ParamSet copy;
  add_encoder(copy, c, rng);
  for (const Param& p : copy.entries()) ps.add(p.name, trunk.weights.at(p.name));
  for (std::size_t l = 0; l < c.levels; ++l) layers::add_zero_conv(ps, lvl("zero", l), c.channels_at(l), c.channels_at(l));
  const std::size_t top = c.channels_at(c.levels - 1);
  layers::add_zero_conv(ps, "zero_mid", top, top);
  return branch;
}

Tensor timestep_features(std::span<const int> timesteps, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor f({timesteps.size(), dim});
  for (std::size_t b = 0; b < timesteps.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(timesteps[b]) * freq;
      f[b * dim + i] = std::sin(arg);
      f[b * dim + half + i] = std::cos(arg);
    }
  }
  return f;
}

Tensor embed_text(const DenoiserParams& params, const TokenSequence& tokens) {
  return embed_tokens(params.weights.at("text.table"), tokens);
}

Var denoiser_forward(Tape& t, const DenoiserConfig& c, const BoundParams& p, Var z_t,
                     std::span<const int> timesteps, std::span<const TokenSequence> text,
                     std::span<const ControlBinding> controls, InjectionTrace* trace) {
  const Tensor& z = t.value(z_t);
  require_latent(c, z);
  const std::size_t batch = z.dim(0);
  if (timesteps.size() != batch || text.size() != batch) {
    throw ShapeError("predict_noise: batch of " + std::to_string(batch) + " latents needs as many timesteps (" +
                     std::to_string(timesteps.size()) + ") and prompts (" + std::to_string(text.size()) + ")");
  }

  // Time embedding plus mean-pooled text embedding.
  Var feats = t.constant(timestep_features(timesteps, c.time_features));
  Var emb = layers::linear(t, p, "time.fc2", ad::silu(t, layers::linear(t, p, "time.fc1", feats)));
  Var pooled = ad::matmul(t, t.constant(pooled_token_weights(text)), lookup(p, "text.table"));
  emb = ad::add(t, emb, layers::linear(t, p, "text.proj", pooled));
  const Var emb_act = ad::silu(t, emb);

  // Control residuals, one list per control in site order.
  std::vector<std::vector<Var>> residuals;
  for (const ControlBinding& cb : controls) {
    const Tensor& cond = t.value(cb.condition);
    const Shape want{batch, c.cond_channels, z.dim(2) * c.cond_factor, z.dim(3) * c.cond_factor};
    if (cond.shape() != want) {
      throw ShapeError("predict_noise: condition " + shape_str(cond.shape()) + " incompatible with latent " +
                       shape_str(z.shape()) + "; expected " + shape_str(want));
    }
    const BoundParams& bp = *cb.weights;
    Var s = cb.condition;
    for (std::size_t i = 0; bp.contains(lvl("stem", i) + ".w"); ++i) {
      s = layers::conv(t, bp, lvl("stem", i), s, 2);
      if (bp.contains(lvl("stem", i + 1) + ".w")) s = ad::silu(t, s);
    }
    Var h = ad::add(t, layers::conv(t, bp, "conv_in", z_t), s);
    std::vector<Var> sites;
    for (std::size_t l = 0; l < c.levels; ++l) {
      h = resblock(t, bp, lvl("enc", l), h, emb_act, c.groups);
      sites.push_back(ad::scale(t, layers::conv(t, bp, lvl("zero", l), h), cb.strength));
      h = layers::conv(t, bp, lvl("down", l), h, 2);
    }
    h = resblock(t, bp, "mid", h, emb_act, c.groups);
    sites.push_back(ad::scale(t, layers::conv(t, bp, "zero_mid", h), cb.strength));
    residuals.push_back(std::move(sites));
  }
  if (trace) {
    trace->residuals.clear();
    for (const auto& sites : residuals) {
      std::vector<Tensor> vals;
      for (Var v : sites) vals.push_back(t.value(v));
      trace->residuals.push_back(std::move(vals));
    }
  }
  auto inject = [&](Var h, std::size_t site) {
    for (const auto& sites : residuals) h = ad::add(t, h, sites[site]);
    return h;
  };

  Var h = layers::conv(t, p, "conv_in", z_t);
  std::vector<Var> skips;
  for (std::size_t l = 0; l < c.levels; ++l) {
    h = resblock(t, p, lvl("enc", l), h, emb_act, c.groups);
    skips.push_back(inject(h, l));
    h = layers::conv(t, p, lvl("down", l), h, 2);
  }
  h = inject(resblock(t, p, "mid", h, emb_act, c.groups), c.levels);
  for (std::size_t l = c.levels; l-- > 0;) {
    h = ad::interpolate2d(t, h, 2, ops::InterpMode::nearest);
    h = layers::conv(t, p, lvl("up", l), h);
    h = ad::concat_channels(t, h, skips[l]);
    h = resblock(t, p, lvl("dec", l), h, emb_act, c.groups);
  }
  h = ad::silu(t, layers::group_norm(t, p, "out.norm", h, c.groups));
  return layers::conv(t, p, "out.conv", h);
}

Tensor predict_noise(const DenoiserParams& params, const Tensor& z_t, std::span<const int> timesteps,
                     std::span<const TokenSequence> text, std::span<const ControlInput> controls,
                     InjectionTrace* trace) {
  Tape tape;
  const BoundParams trunk = bind_params(tape, params.weights, false);
  std::vector<BoundParams> branch_params;
  branch_params.reserve(controls.size());
  std::vector<ControlBinding> bindings;
  for (const ControlInput& ci : controls) {
    if (!ci.branch || !ci.condition) throw std::invalid_argument("predict_noise: incomplete control input");
    branch_params.push_back(bind_params(tape, ci.branch->weights, false));
  }
  for (std::size_t i = 0; i < controls.size(); ++i) {
    bindings.push_back({&branch_params[i], tape.constant(*controls[i].condition), controls[i].strength});
  }
  const Var z = tape.constant(z_t);
  return tape.value(denoiser_forward(tape, params.config, trunk, z, timesteps, text, bindings, trace));
}

Checkpoint denoiser_checkpoint(const DenoiserParams& params) {
  Checkpoint ck;
  ck.header = {{"kind", "denoiser"}, {"config", params.config.to_json()}};
  ck.tensors = params.weights;
  return ck;
}

DenoiserParams denoiser_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.header.value("kind", "") != "denoiser") throw std::runtime_error("checkpoint is not a denoiser");
  DenoiserParams p{DenoiserConfig::from_json(ckpt.header.at("config")), ckpt.tensors};
  p.weights.set_frozen(false);
  return p;
}

Checkpoint control_checkpoint(const ControlBranch& branch, const DenoiserConfig& config) {
  Checkpoint ck;
  ck.header = {{"kind", "control"}, {"control", control_kind_name(branch.kind)}, {"config", config.to_json()}};
  ck.tensors = branch.weights;
  return ck;
}

ControlBranch control_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.header.value("kind", "") != "control") throw std::runtime_error("checkpoint is not a control branch");
  ControlBranch b{parse_control_kind(ckpt.header.at("control").get<std::string>()), ckpt.tensors};
  b.weights.set_frozen(false);
  return b;
}

}  // namespace sardiff
