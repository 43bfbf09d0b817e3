// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "sardiff/ops.hpp"
#include "sardiff/tensor.hpp"

namespace sardiff {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Reverse-mode recorder. Every op evaluates eagerly, appends its output and,
/// when any input requires a gradient, a backward closure. `backward` replays
/// the closures in reverse order of recording.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  /// Accumulated gradient, or zeros if nothing flowed into `v`.
  Tensor grad(Var v) const;

  /// Records an op output. `fn` is dropped when no input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  /// Adds `g` into the gradient slot of `v` if `v` tracks gradients.
  void accumulate(Var v, const Tensor& g);
  void accumulate(Var v, Tensor&& g);

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold one element.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Differentiable ops. Each throws ShapeError on incompatible operands and
// NonFiniteError if the result contains NaN/Inf.
namespace ad {

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var add_scalar(Tape& t, Var a, double s);
Var reshape(Tape& t, Var a, Shape shape);

Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int padding);
Var linear(Tape& t, Var x, Var w, Var b);
Var matmul(Tape& t, Var a, Var b);

Var silu(Tape& t, Var x);
Var sigmoid(Tape& t, Var x);
Var exp(Tape& t, Var x);
Var square(Tape& t, Var x);
Var group_norm(Tape& t, Var x, std::size_t groups, Var gamma, Var beta);
Var interpolate2d(Tape& t, Var x, int factor, ops::InterpMode mode);

/// Concatenates two NCHW tensors along channels.
Var concat_channels(Tape& t, Var a, Var b);
/// x [B,C,H,W] + v [B,C] broadcast over space.
Var add_channel_bias(Tape& t, Var x, Var v);

Var sum(Tape& t, Var x);
Var mean(Tape& t, Var x);
/// Mean of squared differences; scalar.
Var mse(Tape& t, Var a, Var b);

}  // namespace ad

/// A scalar-valued composition over tape leaves, for gradient checking.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckOptions {
  double eps = 1e-5;
  /// Checks at most this many randomly chosen coordinates; 0 checks all.
  std::size_t max_checks = 0;
  std::uint64_t seed = 0;
};

/// Max over checked coordinates of |analytic - central| / max(|analytic| + |central|, floor)
/// where floor = 1e-3 * max |analytic| over all coordinates (and at least 1e-12).
double grad_check(const ScalarFn& f, std::span<const Tensor> inputs, const GradCheckOptions& options = {});

}  // namespace sardiff
