// SPDX-License-Identifier: Apache-2.0
#include "sardiff/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sardiff/rng.hpp"

namespace sardiff {

Var Tape::leaf(Tensor value, bool requires_grad) {
  value.check_finite("leaf");
  nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, nullptr});
  return Var{nodes_.size() - 1};
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.grad.empty() && !n.value.empty() ? Tensor(n.value.shape()) : n.grad;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  value.check_finite("autodiff op");
  const bool rg = std::any_of(inputs.begin(), inputs.end(),
                              [this](Var v) { return v.valid() && nodes_.at(v.id).requires_grad; });
  nodes_.push_back(Node{std::move(value), Tensor(), rg, rg ? std::move(fn) : nullptr});
  return Var{nodes_.size() - 1};
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!v.valid()) return;
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::accumulate(Var v, Tensor&& g) {
  if (!v.valid()) return;
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = std::move(g);
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  Node& root = nodes_.at(loss.id);
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be a single element, got " + shape_str(root.value.shape()));
  }
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) {
      const Tensor g = std::move(n.grad);
      n.backward(*this, g);
      n.grad = g;
    }
  }
}

namespace ad {

namespace {
bool needs(const Tape& t, Var v) { return v.valid() && t.requires_grad(v); }
}  // namespace

Var add(Tape& t, Var a, Var b) {
  Tensor out = t.value(a) + t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  Tensor out = t.value(a) - t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -1.0 * g);
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& va = t.value(a);
  const Tensor& vb = t.value(b);
  require_same_shape(va, vb, "mul");
  Tensor out = va;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (needs(tp, a)) {
      Tensor ga = g;
      const Tensor& vb2 = tp.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= vb2[i];
      tp.accumulate(a, std::move(ga));
    }
    if (needs(tp, b)) {
      Tensor gb = g;
      const Tensor& va2 = tp.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= va2[i];
      tp.accumulate(b, std::move(gb));
    }
  });
}

Var scale(Tape& t, Var a, double s) {
  return t.record(s * t.value(a), {a}, [a, s](Tape& tp, const Tensor& g) { tp.accumulate(a, s * g); });
}

Var add_scalar(Tape& t, Var a, double s) {
  Tensor out = t.value(a);
  for (double& v : out.storage()) v += s;
  return t.record(std::move(out), {a}, [a](Tape& tp, const Tensor& g) { tp.accumulate(a, g); });
}

Var reshape(Tape& t, Var a, Shape shape) {
  const Shape original = t.value(a).shape();
  return t.record(t.value(a).reshaped(std::move(shape)), {a},
                  [a, original](Tape& tp, const Tensor& g) { tp.accumulate(a, g.reshaped(original)); });
}

Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int padding) {
  const Tensor* bias = b.valid() ? &t.value(b) : nullptr;
  Tensor out = ops::conv2d(t.value(x), t.value(w), bias, stride, padding);
  return t.record(std::move(out), {x, w, b}, [x, w, b, stride, padding](Tape& tp, const Tensor& g) {
    auto grads = ops::conv2d_backward(tp.value(x), tp.value(w), g, stride, padding, needs(tp, x), needs(tp, w),
                                      needs(tp, b));
    if (needs(tp, x)) tp.accumulate(x, std::move(grads.input));
    if (needs(tp, w)) tp.accumulate(w, std::move(grads.weight));
    if (needs(tp, b)) tp.accumulate(b, std::move(grads.bias));
  });
}

Var linear(Tape& t, Var x, Var w, Var b) {
  const Tensor* bias = b.valid() ? &t.value(b) : nullptr;
  Tensor out = ops::linear(t.value(x), t.value(w), bias);
  return t.record(std::move(out), {x, w, b}, [x, w, b](Tape& tp, const Tensor& g) {
    if (needs(tp, x)) tp.accumulate(x, ops::matmul(g, tp.value(w)));
    if (needs(tp, w)) tp.accumulate(w, ops::matmul_tn(g, tp.value(x)));
    if (needs(tp, b)) {
      const std::size_t m = g.dim(1);
      Tensor gb({m});
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % m] += g[i];
      tp.accumulate(b, std::move(gb));
    }
  });
}

Var matmul(Tape& t, Var a, Var b) {
  Tensor out = ops::matmul(t.value(a), t.value(b));
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (needs(tp, a)) tp.accumulate(a, ops::matmul_nt(g, tp.value(b)));
    if (needs(tp, b)) tp.accumulate(b, ops::matmul_tn(tp.value(a), g));
  });
}

Var silu(Tape& t, Var x) {
  return t.record(ops::silu(t.value(x)), {x}, [x](Tape& tp, const Tensor& g) {
    const Tensor& v = tp.value(x);
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double s = ops::sigmoid(v[i]);
      gx[i] *= s * (1.0 + v[i] * (1.0 - s));
    }
    tp.accumulate(x, std::move(gx));
  });
}

Var sigmoid(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (double& v : out.storage()) v = ops::sigmoid(v);
  Tensor saved = needs(t, x) ? out : Tensor();
  return t.record(std::move(out), {x}, [x, saved = std::move(saved)](Tape& tp, const Tensor& g) {
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= saved[i] * (1.0 - saved[i]);
    tp.accumulate(x, std::move(gx));
  });
}

Var exp(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (double& v : out.storage()) v = std::exp(v);
  Tensor saved = needs(t, x) ? out : Tensor();
  return t.record(std::move(out), {x}, [x, saved = std::move(saved)](Tape& tp, const Tensor& g) {
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= saved[i];
    tp.accumulate(x, std::move(gx));
  });
}

Var square(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (double& v : out.storage()) v *= v;
  return t.record(std::move(out), {x}, [x](Tape& tp, const Tensor& g) {
    const Tensor& v = tp.value(x);
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= 2.0 * v[i];
    tp.accumulate(x, std::move(gx));
  });
}

Var group_norm(Tape& t, Var x, std::size_t groups, Var gamma, Var beta) {
  ops::GroupNormStats stats;
  Tensor out = ops::group_norm(t.value(x), groups, t.value(gamma), t.value(beta), &stats);
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, groups, stats = std::move(stats)](Tape& tp, const Tensor& g) {
                    auto grads = ops::group_norm_backward(tp.value(x), groups, tp.value(gamma), stats, g);
                    tp.accumulate(x, std::move(grads.input));
                    tp.accumulate(gamma, std::move(grads.gamma));
                    tp.accumulate(beta, std::move(grads.beta));
                  });
}

Var interpolate2d(Tape& t, Var x, int factor, ops::InterpMode mode) {
  const Shape in_shape = t.value(x).shape();
  return t.record(ops::interpolate2d(t.value(x), factor, mode), {x},
                  [x, in_shape, factor, mode](Tape& tp, const Tensor& g) {
                    tp.accumulate(x, ops::interpolate2d_backward(g, in_shape, factor, mode));
                  });
}

Var concat_channels(Tape& t, Var a, Var b) {
  const Tensor& va = t.value(a);
  const Tensor& vb = t.value(b);
  require_rank(va, 4, "concat_channels");
  require_rank(vb, 4, "concat_channels");
  if (va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(2) || va.dim(3) != vb.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
  }
  const std::size_t n = va.dim(0), ca = va.dim(1), cb = vb.dim(1), hw = va.dim(2) * va.dim(3);
  Tensor out({n, ca + cb, va.dim(2), va.dim(3)});
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(va.data().data() + s * ca * hw, ca * hw, out.data().data() + s * (ca + cb) * hw);
    std::copy_n(vb.data().data() + s * cb * hw, cb * hw, out.data().data() + (s * (ca + cb) + ca) * hw);
  }
  const Shape sa = va.shape(), sb = vb.shape();
  return t.record(std::move(out), {a, b}, [a, b, sa, sb, n, ca, cb, hw](Tape& tp, const Tensor& g) {
    Tensor ga(sa), gb(sb);
    for (std::size_t s = 0; s < n; ++s) {
      std::copy_n(g.data().data() + s * (ca + cb) * hw, ca * hw, ga.data().data() + s * ca * hw);
      std::copy_n(g.data().data() + (s * (ca + cb) + ca) * hw, cb * hw, gb.data().data() + s * cb * hw);
    }
    tp.accumulate(a, std::move(ga));
    tp.accumulate(b, std::move(gb));
  });
}

Var add_channel_bias(Tape& t, Var x, Var v) {
  const Tensor& vx = t.value(x);
  const Tensor& vv = t.value(v);
  require_rank(vx, 4, "add_channel_bias");
  if (vv.shape() != Shape{vx.dim(0), vx.dim(1)}) {
    throw ShapeError("add_channel_bias: bias " + shape_str(vv.shape()) + " does not match " +
                     shape_str(vx.shape()));
  }
  const std::size_t hw = vx.dim(2) * vx.dim(3);
  Tensor out = vx;
  for (std::size_t p = 0; p < vv.size(); ++p) {
    double* d = out.data().data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) d[i] += vv[p];
  }
  const Shape vshape = vv.shape();
  return t.record(std::move(out), {x, v}, [x, v, hw, vshape](Tape& tp, const Tensor& g) {
    tp.accumulate(x, g);
    if (needs(tp, v)) {
      Tensor gv(vshape);
      for (std::size_t p = 0; p < gv.size(); ++p) {
        const double* s = g.data().data() + p * hw;
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += s[i];
        gv[p] = acc;
      }
      tp.accumulate(v, std::move(gv));
    }
  });
}

Var sum(Tape& t, Var x) {
  const Shape shape = t.value(x).shape();
  return t.record(Tensor::scalar(t.value(x).sum()), {x},
                  [x, shape](Tape& tp, const Tensor& g) { tp.accumulate(x, Tensor(shape, g[0])); });
}

Var mean(Tape& t, Var x) {
  const Shape shape = t.value(x).shape();
  const double n = static_cast<double>(t.value(x).size());
  return t.record(Tensor::scalar(t.value(x).sum() / n), {x},
                  [x, shape, n](Tape& tp, const Tensor& g) { tp.accumulate(x, Tensor(shape, g[0] / n)); });
}

Var mse(Tape& t, Var a, Var b) {
  const Tensor& va = t.value(a);
  const Tensor& vb = t.value(b);
  require_same_shape(va, vb, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) acc += (va[i] - vb[i]) * (va[i] - vb[i]);
  const double n = static_cast<double>(va.size());
  return t.record(Tensor::scalar(acc / n), {a, b}, [a, b, n](Tape& tp, const Tensor& g) {
    const Tensor& xa = tp.value(a);
    const Tensor& xb = tp.value(b);
    Tensor d(xa.shape());
    const double c = 2.0 * g[0] / n;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = c * (xa[i] - xb[i]);
    if (needs(tp, a)) tp.accumulate(a, d);
    if (needs(tp, b)) tp.accumulate(b, -1.0 * d);
  });
}

}  // namespace ad

double grad_check(const ScalarFn& f, std::span<const Tensor> inputs, const GradCheckOptions& options) {
  auto evaluate = [&](std::span<const Tensor> values) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(values.size());
    for (const Tensor& v : values) vars.push_back(tape.leaf(v, false));
    return tape.value(f(tape, vars))[0];
  };

  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& v : inputs) vars.push_back(tape.leaf(v, true));
  Var loss = f(tape, vars);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  double scale = 0.0;
  for (Var v : vars) {
    analytic.push_back(tape.grad(v));
    scale = std::max(scale, analytic.back().max_abs());
  }
  const double floor = std::max(1e-3 * scale, 1e-12);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) coords.emplace_back(i, j);
  }
  if (options.max_checks > 0 && coords.size() > options.max_checks) {
    Rng rng(options.seed, 0x6772616463686bULL);
    for (std::size_t i = 0; i < options.max_checks; ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                              static_cast<std::int64_t>(coords.size() - 1)));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(options.max_checks);
  }

  std::vector<Tensor> work(inputs.begin(), inputs.end());
  double worst = 0.0;
  for (auto [i, j] : coords) {
    const double orig = work[i][j];
    work[i][j] = orig + options.eps;
    const double fp = evaluate(work);
    work[i][j] = orig - options.eps;
    const double fm = evaluate(work);
    work[i][j] = orig;
    const double numeric = (fp - fm) / (2.0 * options.eps);
    const double a = analytic[i][j];
    worst = std::max(worst, std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), floor));
  }
  return worst;
}

}  // namespace sardiff
