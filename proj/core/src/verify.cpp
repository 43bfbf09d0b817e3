// SPDX-License-Identifier: Apache-2.0
#include "sardiff/verify.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>

#include "sardiff/autodiff.hpp"
#include "sardiff/denoiser.hpp"
#include "sardiff/lora.hpp"
#include "sardiff/text.hpp"
#include "sardiff/training.hpp"
#include "sardiff/vae.hpp"

namespace sardiff {

namespace {

// Rebinds a ParamSet from the leading `vars`, in entry order.
BoundParams rebind(const ParamSet& ps, std::span<const Var> vars) {
  BoundParams b;
  for (std::size_t i = 0; i < ps.entries().size(); ++i) b.emplace(ps.entries()[i].name, vars[i]);
  return b;
}

std::vector<Tensor> values_of(const ParamSet& ps) {
  std::vector<Tensor> v;
  for (const Param& p : ps.entries()) v.push_back(p.value);
  return v;
}

DenoiserConfig small_denoiser() {
  DenoiserConfig c;
  c.base_channels = 4;
  c.groups = 2;
  c.time_features = 8;
  c.text_dim = 4;
  return c;
}

}  // namespace

std::vector<CheckResult> gradient_suite(std::uint64_t seed, std::size_t max_checks) {
  Rng rng(seed, 0);
  const GradCheckOptions opts{1e-5, max_checks, seed};
  std::vector<CheckResult> out;
  auto record = [&](std::string name, const ScalarFn& f, std::span<const Tensor> inputs) {
    out.push_back({std::move(name), grad_check(f, inputs, opts), kGradCheckThreshold});
  };

  {
    const Tensor target = rng.normal_tensor({2, 3, 4, 4});
    const std::vector<Tensor> in = {rng.normal_tensor({2, 2, 7, 7}), rng.normal_tensor({3, 2, 3, 3}),
                                    rng.normal_tensor({3})};
    record("conv2d stride 2", [&](Tape& t, std::span<const Var> v) {
      return ad::mse(t, ad::conv2d(t, v[0], v[1], v[2], 2, 1), t.constant(target));
    }, in);
  }
  {
    const Tensor target = rng.normal_tensor({3, 4});
    const std::vector<Tensor> in = {rng.normal_tensor({3, 5}), rng.normal_tensor({4, 5}), rng.normal_tensor({4})};
    record("linear", [&](Tape& t, std::span<const Var> v) {
      return ad::mse(t, ad::linear(t, v[0], v[1], v[2]), t.constant(target));
    }, in);
  }
  {
    const Tensor target = rng.normal_tensor({2, 4, 3, 3});
    const std::vector<Tensor> in = {rng.normal_tensor({2, 4, 3, 3}), rng.normal_tensor({4}), rng.normal_tensor({4})};
    record("group_norm", [&](Tape& t, std::span<const Var> v) {
      return ad::mse(t, ad::group_norm(t, v[0], 2, v[1], v[2]), t.constant(target));
    }, in);
  }
  {
    const Tensor target = rng.normal_tensor({1, 2, 6, 6});
    const std::vector<Tensor> in = {rng.normal_tensor({1, 2, 3, 3})};
    record("bilinear upsample", [&](Tape& t, std::span<const Var> v) {
      return ad::mse(t, ad::interpolate2d(t, v[0], 2, ops::InterpMode::bilinear), t.constant(target));
    }, in);
  }

  const NoiseSchedule schedule = linear_schedule(50);
  const DenoiserConfig dc = small_denoiser();
  const DenoiserParams trunk = init_denoiser(dc, rng);
  const Tensor z0 = rng.normal_tensor({2, dc.latent_channels, 4, 4});
  const DiffusionDraw draw = draw_diffusion(z0.shape(), schedule, rng);
  const std::vector<TokenSequence> text = {tokenize("sd40 sar water field"), tokenize("sd80 sar road")};

  {
    const std::vector<Tensor> in = values_of(trunk.weights);
    record("diffusion loss / denoiser", [&](Tape& t, std::span<const Var> v) {
      const BoundParams p = rebind(trunk.weights, v);
      const NoiseModel net = [&](Tape& tt, Var zt, std::span<const int> ts) {
        return denoiser_forward(tt, dc, p, zt, ts, text);
      };
      return diffusion_loss_forward(t, net, z0, draw, schedule);
    }, in);
  }
  {
    ControlBranch branch = init_control_branch(trunk, ControlKind::canny, rng);
    // Non-zero projections so the branch contributes a gradient.
    for (Param& p : branch.weights.entries()) {
      if (p.name.rfind("zero", 0) == 0) p.value = 0.1 * rng.normal_tensor(p.value.shape());
    }
    const Tensor cond = rng.normal_tensor({2, 1, 4 * dc.cond_factor, 4 * dc.cond_factor});
    std::vector<Tensor> in = values_of(trunk.weights);
    const std::size_t n_trunk = in.size();
    for (const Param& p : branch.weights.entries()) in.push_back(p.value);
    record("diffusion loss / denoiser + control", [&](Tape& t, std::span<const Var> v) {
      const BoundParams p = rebind(trunk.weights, v.first(n_trunk));
      const BoundParams bp = rebind(branch.weights, v.subspan(n_trunk));
      const ControlBinding binding{&bp, t.constant(cond), 0.8};
      const NoiseModel net = [&](Tape& tt, Var zt, std::span<const int> ts) {
        return denoiser_forward(tt, dc, p, zt, ts, text, std::span(&binding, 1));
      };
      return diffusion_loss_forward(t, net, z0, draw, schedule);
    }, in);
  }
  {
    const std::vector<std::string> targets = default_lora_targets(trunk);
    LoraModel model = wrap_lora(trunk, 2, 2.0, targets, rng);
    for (LoraAdapter& a : model.adapters) a.b = 0.02 * rng.normal_tensor(a.b.shape());
    const ParamSet adapters = model.adapter_params();
    record("diffusion loss / lora adapters", [&](Tape& t, std::span<const Var> v) {
      BoundParams composed = bind_params(t, model.base.weights, false);
      const BoundParams av = rebind(adapters, v);
      for (const LoraAdapter& a : model.adapters) {
        Var delta = ad::matmul(t, av.at("lora." + a.target + ".B"), av.at("lora." + a.target + ".A"));
        delta = ad::reshape(t, ad::scale(t, delta, a.scale()), a.target_shape);
        composed[a.target] = ad::add(t, composed.at(a.target), delta);
      }
      const NoiseModel net = [&](Tape& tt, Var zt, std::span<const int> ts) {
        return denoiser_forward(tt, dc, composed, zt, ts, text);
      };
      return diffusion_loss_forward(t, net, z0, draw, schedule);
    }, values_of(adapters));
  }
  {
    VaeConfig vc;
    vc.widths = {4, 4, 8, 8};
    const VaeParams vae = init_vae(vc, rng);
    Tensor x({2, 1, 16, 16});
    for (double& v : x.data()) v = rng.uniform();
    const Tensor noise = rng.normal_tensor({2, vc.latent_channels, 2, 2});
    record("vae loss", [&](Tape& t, std::span<const Var> v) {
      return vae_loss_forward(t, rebind(vae.weights, v), t.constant(x), noise, 1e-2);
    }, values_of(vae.weights));
  }
  return out;
}

PixelStats pixel_stats(std::span<const Tensor> images) {
  PixelStats st;
  double sum = 0.0;
  for (const Tensor& t : images) {
    for (double v : t.data()) sum += v;
    st.count += t.size();
  }
  if (st.count == 0) throw std::invalid_argument("pixel_stats: no pixels");
  st.mean = sum / static_cast<double>(st.count);
  double sq = 0.0;
  for (const Tensor& t : images) {
    for (double v : t.data()) sq += (v - st.mean) * (v - st.mean);
  }
  st.stddev = std::sqrt(sq / static_cast<double>(st.count));
  return st;
}

double psnr(const Tensor& reference, const Tensor& estimate) {
  require_same_shape(reference, estimate, "psnr");
  double mse = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = reference[i] - estimate[i];
    mse += d * d;
  }
  mse /= static_cast<double>(reference.size());
  return mse > 0.0 ? 10.0 * std::log10(1.0 / mse) : std::numeric_limits<double>::infinity();
}

}  // namespace sardiff
