// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "sardiff/lora.hpp"
#include "sardiff/training.hpp"

using namespace sardiff;

namespace {

DenoiserConfig small_config() {
  DenoiserConfig c;
  c.base_channels = 8;
  c.groups = 2;
  c.time_features = 8;
  c.text_dim = 4;
  return c;
}

struct Fixture {
  DenoiserParams base;
  LoraModel model;
};

Fixture make(std::uint64_t seed, std::size_t rank = 2) {
  Rng rng(seed);
  Fixture f{init_denoiser(small_config(), rng), {}};
  const auto targets = default_lora_targets(f.base);
  f.model = wrap_lora(f.base, rank, 2.0, targets, rng);
  return f;
}

void randomize_b(LoraModel& m, std::uint64_t seed) {
  Rng rng(seed);
  for (LoraAdapter& a : m.adapters)
    for (double& v : a.b.storage()) v = 0.05 * rng.normal();
}

const std::vector<TokenSequence>& prompt() {
  static const std::vector<TokenSequence> t = {tokenize(std::string_view("sd80 sar building"))};
  return t;
}

}  // namespace

TEST(Lora, WrappedEqualsBaseAtInit) {
  const Fixture f = make(1);
  for (std::uint64_t i = 0; i < 10; ++i) {
    const Tensor z = Rng(50 + i).normal_tensor({1, 4, 8, 8});
    const std::vector<int> ts = {static_cast<int>(1 + 7 * i)};
    EXPECT_TRUE(bitwise_equal(predict_noise_lora(f.model, z, ts, prompt()), predict_noise(f.base, z, ts, prompt())));
  }
  for (const LoraAdapter& a : f.model.adapters) {
    EXPECT_EQ(a.b.max_abs(), 0.0);
    EXPECT_GT(a.a.max_abs(), 0.0);
  }
}

TEST(Lora, BaseFrozenAndGradientFree) {
  Fixture f = make(2);
  randomize_b(f.model, 3);
  EXPECT_EQ(f.model.base.weights.trainable_count(), 0u);
  Tape tape;
  BoundParams adapters;
  const BoundParams bound = bind_lora(tape, f.model, true, &adapters);
  const Var z = tape.constant(Rng(4).normal_tensor({1, 4, 8, 8}));
  const std::vector<int> ts = {9};
  const Var out = denoiser_forward(tape, f.base.config, bound, z, ts, prompt());
  tape.backward(ad::sum(tape, ad::square(tape, out)));
  std::set<std::string> targets;
  for (const LoraAdapter& a : f.model.adapters) targets.insert(a.target);
  for (const auto& [name, var] : bound) {
    if (targets.contains(name)) continue;
    EXPECT_FALSE(tape.requires_grad(var)) << name;
    EXPECT_EQ(tape.grad(var).max_abs(), 0.0) << name;
  }
  double adapter_grad = 0.0;
  for (const auto& [name, var] : adapters) adapter_grad += tape.grad(var).max_abs();
  EXPECT_GT(adapter_grad, 0.0);
}

TEST(Lora, BindMatchesManualComposition) {
  Fixture f = make(5);
  randomize_b(f.model, 6);
  DenoiserParams manual = f.base;
  for (const LoraAdapter& a : f.model.adapters) {
    Tensor& w = manual.weights.at(a.target);
    const std::size_t m = a.b.dim(0), r = a.rank, n = a.a.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < r; ++k) acc += a.b[i * r + k] * a.a[k * n + j];
        w[i * n + j] += a.scale() * acc;
      }
  }
  const Tensor z = Rng(7).normal_tensor({2, 4, 8, 8});
  const std::vector<int> ts = {3, 30};
  const std::vector<TokenSequence> text(2, prompt()[0]);
  EXPECT_LE(max_abs_diff(predict_noise_lora(f.model, z, ts, text), predict_noise(manual, z, ts, text)), 1e-12);
}

TEST(Lora, MergedMatchesWrapped) {
  Fixture f = make(8);
  randomize_b(f.model, 9);
  const DenoiserParams merged = merge_lora(f.base, f.model.adapters);
  for (std::uint64_t i = 0; i < 10; ++i) {
    const Tensor z = Rng(60 + i).normal_tensor({1, 4, 8, 8});
    const std::vector<int> ts = {static_cast<int>(1 + 11 * i)};
    EXPECT_LE(max_abs_diff(predict_noise(merged, z, ts, prompt()), predict_noise_lora(f.model, z, ts, prompt())), 1e-10);
  }
}

TEST(Lora, MergeZeroAndTwice) {
  Fixture f = make(10);
  EXPECT_TRUE(merge_lora(f.base, f.model.adapters).weights == f.base.weights);
  randomize_b(f.model, 11);
  const DenoiserParams once = merge_lora(f.base, f.model.adapters);
  const DenoiserParams twice = merge_lora(once, f.model.adapters);
  for (const LoraAdapter& a : f.model.adapters) {
    const Tensor d = a.delta();
    const Tensor& w0 = f.base.weights.at(a.target);
    const Tensor& w2 = twice.weights.at(a.target);
    for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(w2[i], w0[i] + 2.0 * d[i], 1e-14);
  }
}

TEST(Lora, ParameterBudget) {
  Rng rng(12);
  const TrainConfig tc;
  const DenoiserParams base = init_denoiser(tc.denoiser, rng);
  const auto targets = default_lora_targets(base);
  const LoraModel m = wrap_lora(base, tc.lora_rank, tc.lora_alpha, targets, rng);
  std::size_t bound = 0;
  for (const LoraAdapter& a : m.adapters) bound += a.rank * (a.b.dim(0) + a.a.dim(1));
  EXPECT_LE(m.trainable_count(), bound);
  EXPECT_LT(static_cast<double>(m.trainable_count()), 0.1 * static_cast<double>(base.weights.element_count()));
  for (const std::string& t : targets) EXPECT_NE(t, "text.table.w");
}

TEST(Lora, RejectsBadTargets) {
  Rng rng(13);
  const DenoiserParams base = init_denoiser(small_config(), rng);
  const std::vector<std::string> unknown = {"nope.w"};
  EXPECT_THROW(wrap_lora(base, 1, 1.0, unknown, rng), std::invalid_argument);
  const std::vector<std::string> small = {"time.fc1.w"};  // [32, 8]
  EXPECT_NO_THROW(wrap_lora(base, 8, 1.0, small, rng));
  EXPECT_THROW(wrap_lora(base, 9, 1.0, small, rng), std::invalid_argument);
  EXPECT_THROW(wrap_lora(base, 0, 1.0, small, rng), std::invalid_argument);
}

TEST(Lora, FullRankFitsRandomDelta) {
  const std::size_t m = 5, n = 7, r = 5;
  const double scale = 2.0 / static_cast<double>(r);
  Rng rng(14);
  const Tensor target = rng.normal_tensor({m, n});
  ParamSet ps;
  Tensor a({r, n});
  for (double& v : a.storage()) v = 0.02 * rng.normal();
  ps.add("A", a);
  ps.add("B", Tensor({m, r}));
  double target_sq = 0.0;
  for (double v : target.data()) target_sq += v * v;
  AdamState state;
  const AdamConfig cfg{.lr = 0.02};
  double rel = 1.0;
  for (int step = 0; step < 6000 && rel >= 1e-4; ++step) {
    Tape tape;
    const BoundParams bound = bind_params(tape, ps, true);
    const Var prod = ad::scale(tape, ad::matmul(tape, lookup(bound, "B"), lookup(bound, "A")), scale);
    const Var diff = ad::sub(tape, prod, tape.constant(target));
    const Var loss = ad::sum(tape, ad::square(tape, diff));
    tape.backward(loss);
    rel = std::sqrt(tape.value(loss)[0] / target_sq);
    adam_step(ps, collect_grads(tape, bound, ps), state, cfg);
  }
  EXPECT_LT(rel, 1e-3);
}

TEST(Lora, CheckpointHoldsOnlyAdapters) {
  Fixture f = make(15);
  randomize_b(f.model, 16);
  const Checkpoint c = lora_checkpoint(f.model, "sd80");
  EXPECT_EQ(c.tensors.entries().size(), 2 * f.model.adapters.size());
  for (const Param& p : c.tensors.entries()) EXPECT_TRUE(p.name.starts_with("lora.")) << p.name;
  EXPECT_EQ(c.header.at("tier"), "sd80");
  const auto back = lora_from_checkpoint(c, f.base);
  ASSERT_EQ(back.size(), f.model.adapters.size());
  EXPECT_TRUE(bitwise_equal(back[0].b, f.model.adapters[0].b));
  Rng rng(17);
  const DenoiserParams other = init_denoiser(small_config(), rng);
  EXPECT_THROW(lora_from_checkpoint(c, other), std::runtime_error);
}

TEST(Lora, TierRegistry) {
  TierRegistry reg;
  reg.add({"sd80", "base", {}});
  EXPECT_TRUE(reg.contains("sd80"));
  EXPECT_THROW(reg.add({"sd80", "base", {}}), std::invalid_argument);
  EXPECT_THROW(reg.add({"sd20", "base", {}}), std::invalid_argument);
  EXPECT_TRUE(is_tier_tag("sd160"));
  EXPECT_FALSE(is_tier_tag("hd"));
}
