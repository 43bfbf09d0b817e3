// SPDX-License-Identifier: Apache-2.0
#include "sardiff/vae.hpp"

#include <cmath>
#include <stdexcept>

#include "layers.hpp"

namespace sardiff {

nlohmann::json VaeConfig::to_json() const { return {{"latent_channels", latent_channels}, {"widths", widths}}; }

VaeConfig VaeConfig::from_json(const nlohmann::json& j) {
  VaeConfig c;
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  if (j.contains("widths")) c.widths = j.at("widths").get<std::array<std::size_t, 4>>();
  if (c.latent_channels == 0) throw std::invalid_argument("vae config: latent_channels must be positive");
  for (std::size_t w : c.widths) {
    if (w == 0) throw std::invalid_argument("vae config: widths must be positive");
  }
  return c;
}

VaeParams init_vae(const VaeConfig& config, Rng& rng) {
  VaeParams v{config, {}, 1.0};
  ParamSet& ps = v.weights;
  const auto& w = config.widths;
  const std::size_t c = config.latent_channels;
  layers::add_conv(ps, "enc.0", 1, w[0], 3, rng);
  layers::add_conv(ps, "enc.1", w[0], w[1], 3, rng);
  layers::add_conv(ps, "enc.2", w[1], w[2], 3, rng);
  layers::add_conv(ps, "enc.3", w[2], w[3], 3, rng);
  layers::add_conv(ps, "enc.4", w[3], w[3], 3, rng);
  layers::add_conv(ps, "enc.mean", w[3], c, 3, rng, 1.0);
  layers::add_conv(ps, "enc.logvar", w[3], c, 3, rng, 0.1);
  layers::add_conv(ps, "dec.0", c, w[3], 3, rng);
  layers::add_conv(ps, "dec.1", w[3], w[3], 3, rng);
  layers::add_conv(ps, "dec.2", w[3], w[2], 3, rng);
  layers::add_conv(ps, "dec.3", w[2], w[1], 3, rng);
  layers::add_conv(ps, "dec.4", w[1], w[0], 3, rng);
  layers::add_conv(ps, "dec.out", w[0], 1, 3, rng, 1.0);
  return v;
}

namespace {

void require_image(const Tensor& x) {
  require_rank(x, 4, "vae encode");
  if (x.dim(1) != 1 || x.dim(2) % kVaeDownsample != 0 || x.dim(3) % kVaeDownsample != 0 || x.dim(2) == 0 ||
      x.dim(3) == 0) {
    throw ShapeError("vae encode: image " + shape_str(x.shape()) +
                     " must be single-channel with extents divisible by 8");
  }
}

}  // namespace

VaeEncoding vae_encode_forward(Tape& t, const BoundParams& p, Var x) {
  require_image(t.value(x));
  Var h = ad::silu(t, layers::conv(t, p, "enc.0", x));
  h = ad::silu(t, layers::conv(t, p, "enc.1", h, 2));
  h = ad::silu(t, layers::conv(t, p, "enc.2", h, 2));
  h = ad::silu(t, layers::conv(t, p, "enc.3", h, 2));
  h = ad::silu(t, layers::conv(t, p, "enc.4", h));
  return {layers::conv(t, p, "enc.mean", h), layers::conv(t, p, "enc.logvar", h)};
}

Var vae_decode_forward(Tape& t, const BoundParams& p, Var z) {
  const Tensor& zv = t.value(z);
  const std::size_t c = t.value(lookup(p, "dec.0.w")).dim(1);
  if (zv.rank() != 4 || zv.dim(1) != c) {
    throw ShapeError("vae decode: latent " + shape_str(zv.shape()) + " must have " + std::to_string(c) + " channels");
  }
  Var h = ad::silu(t, layers::conv(t, p, "dec.0", z));
  h = ad::silu(t, layers::conv(t, p, "dec.1", h));
  h = ad::interpolate2d(t, h, 2, ops::InterpMode::nearest);
  h = ad::silu(t, layers::conv(t, p, "dec.2", h));
  h = ad::interpolate2d(t, h, 2, ops::InterpMode::nearest);
  h = ad::silu(t, layers::conv(t, p, "dec.3", h));
  h = ad::interpolate2d(t, h, 2, ops::InterpMode::nearest);
  h = ad::silu(t, layers::conv(t, p, "dec.4", h));
  return ad::sigmoid(t, layers::conv(t, p, "dec.out", h));
}

std::pair<Tensor, Tensor> encode_moments(const VaeParams& v, const Tensor& x) {
  Tape tape;
  const BoundParams p = bind_params(tape, v.weights, false);
  const VaeEncoding enc = vae_encode_forward(tape, p, tape.constant(x));
  return {tape.value(enc.mean), tape.value(enc.logvar)};
}

Tensor encode(const VaeParams& v, const Tensor& x, Rng& rng, bool stochastic) {
  auto [mean, logvar] = encode_moments(v, x);
  if (!stochastic) return mean;
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += std::exp(0.5 * logvar[i]) * rng.normal();
  mean.check_finite("encode");
  return mean;
}

Tensor decode(const VaeParams& v, const Tensor& z) {
  Tape tape;
  const BoundParams p = bind_params(tape, v.weights, false);
  return tape.value(vae_decode_forward(tape, p, tape.constant(z)));
}

double kl_standard_normal(double mu, double logvar) {
  return 0.5 * (mu * mu + std::exp(logvar) - 1.0 - logvar);
}

namespace {

struct LossVars {
  Var recon, kl, total;
};

LossVars loss_vars(Tape& t, const BoundParams& p, Var x, const Tensor* noise, Rng* rng, double kl_weight) {
  const VaeEncoding enc = vae_encode_forward(t, p, x);
  const Tensor draw = noise ? *noise : rng->normal_tensor(t.value(enc.mean).shape());
  const Var sigma = ad::exp(t, ad::scale(t, enc.logvar, 0.5));
  const Var z = ad::add(t, enc.mean, ad::mul(t, sigma, t.constant(draw)));
  const Var recon = ad::mse(t, vae_decode_forward(t, p, z), x);
  Var kl = ad::add(t, ad::square(t, enc.mean), ad::exp(t, enc.logvar));
  kl = ad::scale(t, ad::mean(t, ad::add_scalar(t, ad::sub(t, kl, enc.logvar), -1.0)), 0.5);
  return {recon, kl, ad::add(t, recon, ad::scale(t, kl, kl_weight))};
}

}  // namespace

Var vae_loss_forward(Tape& t, const BoundParams& p, Var x, const Tensor& noise, double kl_weight) {
  return loss_vars(t, p, x, &noise, nullptr, kl_weight).total;
}

VaeLoss vae_loss(const VaeParams& v, const Tensor& x, Rng& rng, double kl_weight, bool with_grads) {
  if (kl_weight < 0.0) throw std::invalid_argument("vae_loss: kl_weight must be >= 0");
  Tape tape;
  const BoundParams p = bind_params(tape, v.weights, with_grads);
  const LossVars lv = loss_vars(tape, p, tape.constant(x), nullptr, &rng, kl_weight);
  VaeLoss out;
  out.reconstruction = tape.value(lv.recon)[0];
  out.kl = tape.value(lv.kl)[0];
  out.total = tape.value(lv.total)[0];
  if (with_grads) {
    tape.backward(lv.total);
    out.grads = collect_grads(tape, p, v.weights);
  }
  return out;
}

Checkpoint vae_checkpoint(const VaeParams& v) {
  Checkpoint ck;
  ck.header = {{"kind", "vae"}, {"config", v.config.to_json()}, {"latent_scale", v.latent_scale}};
  ck.tensors = v.weights;
  return ck;
}

VaeParams vae_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.header.value("kind", "") != "vae") throw std::runtime_error("checkpoint is not a VAE");
  VaeParams v{VaeConfig::from_json(ckpt.header.at("config")), ckpt.tensors,
              ckpt.header.at("latent_scale").get<double>()};
  return v;
}

}  // namespace sardiff
