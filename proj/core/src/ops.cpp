// SPDX-License-Identifier: Apache-2.0
#include "sardiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace sardiff::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using Index = Eigen::Index;

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, k, ho, wo;
  int stride, pad;
  std::size_t kdim() const { return cin * k * k; }
  std::size_t pixels() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

ConvGeom conv_geometry(const Tensor& input, const Tensor& weight, int stride, int padding) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d: expected rank-4 input and weight, got " + shape_str(input.shape()) + " and " +
                     shape_str(weight.shape()));
  }
  if (input.dim(1) != weight.dim(1) || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and padding >= 0");
  ConvGeom g{};
  g.batch = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = padding;
  const long span_h = static_cast<long>(g.h) + 2 * padding - static_cast<long>(g.k);
  const long span_w = static_cast<long>(g.w) + 2 * padding - static_cast<long>(g.k);
  if (span_h < 0 || span_w < 0) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  g.ho = static_cast<std::size_t>(span_h / stride + 1);
  g.wo = static_cast<std::size_t>(span_w / stride + 1);
  return g;
}

// Output columns [lo, hi) whose input column ox*s + kx - p lies inside [0, w).
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeom& g, std::size_t kx) {
  const long s = g.stride, off = static_cast<long>(kx) - g.pad, w = static_cast<long>(g.w);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = w - 1 - off < 0 ? 0 : (w - 1 - off) / s + 1;
  hi = std::min(hi, static_cast<long>(g.wo));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// cols[(c*k + ky)*k + kx][oy*wo + ox] = x[c][oy*s + ky - p][ox*s + kx - p]
void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t p = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * p;
        const auto [lo, hi] = valid_columns(g, kx);
        const long off = static_cast<long>(kx) - g.pad;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride + static_cast<long>(ky) - g.pad;
          double* out = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(out, out + lo, 0.0);
          if (g.stride == 1) {
            std::copy(src + static_cast<long>(lo) + off, src + static_cast<long>(hi) + off, out + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = src[static_cast<long>(ox) * g.stride + off];
          }
          std::fill(out + hi, out + g.wo, 0.0);
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeom& g, double* dx) {
  const std::size_t p = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * p;
        const auto [lo, hi] = valid_columns(g, kx);
        const long off = static_cast<long>(kx) - g.pad;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride + static_cast<long>(ky) - g.pad;
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* in = row + oy * g.wo;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<long>(ox) * g.stride + off] += in[ox];
        }
      }
    }
  }
}

struct AxisTap {
  std::size_t i0, i1;
  double w1;
};

std::vector<AxisTap> axis_taps(std::size_t in, int factor, InterpMode mode) {
  const std::size_t out = in * static_cast<std::size_t>(factor);
  std::vector<AxisTap> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    if (mode == InterpMode::nearest) {
      const std::size_t s = i / static_cast<std::size_t>(factor);
      taps[i] = {s, s, 0.0};
      continue;
    }
    double src = (static_cast<double>(i) + 0.5) / factor - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[i] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

InterpMode parse_interp_mode(std::string_view name) {
  if (name == "nearest") return InterpMode::nearest;
  if (name == "bilinear") return InterpMode::bilinear;
  throw std::invalid_argument("unknown interpolation mode '" + std::string(name) + "'");
}

std::string_view interp_mode_name(InterpMode mode) {
  return mode == InterpMode::nearest ? "nearest" : "bilinear";
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, int stride, int padding) {
  const ConvGeom g = conv_geometry(input, weight, stride, padding);
  if (bias && !bias->empty() && (bias->rank() != 1 || bias->dim(0) != g.cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  Tensor out({g.batch, g.cout, g.ho, g.wo});
  const std::size_t kd = g.kdim(), p = g.pixels();
  ConstMapMat wm(weight.data().data(), static_cast<Index>(g.cout), static_cast<Index>(kd));
  Storage cols(g.pointwise() ? 0 : kd * p);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const double* xb = input.data().data() + b * g.cin * g.h * g.w;
    const double* colp = xb;
    if (!g.pointwise()) {
      im2col(xb, g, cols.data());
      colp = cols.data();
    }
    MapMat yb(out.data().data() + b * g.cout * p, static_cast<Index>(g.cout), static_cast<Index>(p));
    yb.noalias() = wm * ConstMapMat(colp, static_cast<Index>(kd), static_cast<Index>(p));
    if (bias && !bias->empty()) {
      for (std::size_t o = 0; o < g.cout; ++o) yb.row(static_cast<Index>(o)).array() += (*bias)[o];
    }
  }
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out, int stride,
                            int padding, bool need_input, bool need_weight, bool need_bias) {
  const ConvGeom g = conv_geometry(input, weight, stride, padding);
  if (grad_out.shape() != Shape{g.batch, g.cout, g.ho, g.wo}) {
    throw ShapeError("conv2d_backward: gradient " + shape_str(grad_out.shape()) + " does not match output");
  }
  Conv2dGrads grads;
  const std::size_t kd = g.kdim(), p = g.pixels();
  if (need_input) grads.input = Tensor(input.shape());
  if (need_weight) grads.weight = Tensor(weight.shape());
  if (need_bias) grads.bias = Tensor({g.cout});
  ConstMapMat wm(weight.data().data(), static_cast<Index>(g.cout), static_cast<Index>(kd));
  Storage cols(g.pointwise() ? 0 : kd * p);
  Storage dcols(g.pointwise() ? 0 : kd * p);
  for (std::size_t b = 0; b < g.batch; ++b) {
    ConstMapMat dy(grad_out.data().data() + b * g.cout * p, static_cast<Index>(g.cout), static_cast<Index>(p));
    const double* xb = input.data().data() + b * g.cin * g.h * g.w;
    if (need_weight) {
      const double* colp = xb;
      if (!g.pointwise()) {
        im2col(xb, g, cols.data());
        colp = cols.data();
      }
      MapMat dw(grads.weight.data().data(), static_cast<Index>(g.cout), static_cast<Index>(kd));
      dw.noalias() += dy * ConstMapMat(colp, static_cast<Index>(kd), static_cast<Index>(p)).transpose();
    }
    if (need_bias) {
      for (std::size_t o = 0; o < g.cout; ++o) grads.bias[o] += dy.row(static_cast<Index>(o)).sum();
    }
    if (need_input) {
      double* dxb = grads.input.data().data() + b * g.cin * g.h * g.w;
      if (g.pointwise()) {
        MapMat dx(dxb, static_cast<Index>(kd), static_cast<Index>(p));
        dx.noalias() = wm.transpose() * dy;
      } else {
        MapMat dc(dcols.data(), static_cast<Index>(kd), static_cast<Index>(p));
        dc.noalias() = wm.transpose() * dy;
        col2im(dcols.data(), g, dxb);
      }
    }
  }
  return grads;
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor* bias) {
  if (input.rank() != 2 || weight.rank() != 2 || input.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(input.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  Tensor out = matmul_nt(input, weight);
  if (bias && !bias->empty()) {
    if (bias->rank() != 1 || bias->dim(0) != weight.dim(0)) {
      throw ShapeError("linear: bias " + shape_str(bias->shape()) + " does not match weight " +
                       shape_str(weight.shape()));
    }
    const std::size_t m = weight.dim(0);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*bias)[i % m];
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({a.dim(0), b.dim(1)});
  MapMat(out.data().data(), static_cast<Index>(a.dim(0)), static_cast<Index>(b.dim(1))).noalias() =
      ConstMapMat(a.data().data(), static_cast<Index>(a.dim(0)), static_cast<Index>(a.dim(1))) *
      ConstMapMat(b.data().data(), static_cast<Index>(b.dim(0)), static_cast<Index>(b.dim(1)));
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw ShapeError("matmul_tn: " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
  }
  Tensor out({a.dim(1), b.dim(1)});
  MapMat(out.data().data(), static_cast<Index>(a.dim(1)), static_cast<Index>(b.dim(1))).noalias() =
      ConstMapMat(a.data().data(), static_cast<Index>(a.dim(0)), static_cast<Index>(a.dim(1))).transpose() *
      ConstMapMat(b.data().data(), static_cast<Index>(b.dim(0)), static_cast<Index>(b.dim(1)));
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  Tensor out({a.dim(0), b.dim(0)});
  MapMat(out.data().data(), static_cast<Index>(a.dim(0)), static_cast<Index>(b.dim(0))).noalias() =
      ConstMapMat(a.data().data(), static_cast<Index>(a.dim(0)), static_cast<Index>(a.dim(1))) *
      ConstMapMat(b.data().data(), static_cast<Index>(b.dim(0)), static_cast<Index>(b.dim(1))).transpose();
  return out;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor silu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.storage()) v = v * sigmoid(v);
  return out;
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  GroupNormStats* stats) {
  require_rank(x, 4, "group_norm");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups != 0) {
    throw std::invalid_argument("group_norm: " + std::to_string(groups) + " groups do not divide " +
                                std::to_string(c) + " channels");
  }
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("group_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match " + std::to_string(c) + " channels");
  }
  const std::size_t cpg = c / groups, n = cpg * hw;
  Tensor out(x.shape());
  Tensor mean({b, groups}), inv_std({b, groups});
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double* src = x.data().data() + (s * c + g * cpg) * hw;
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += src[i];
      m /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) var += (src[i] - m) * (src[i] - m);
      var /= static_cast<double>(n);
      const double r = 1.0 / std::sqrt(var + kGroupNormEps);
      mean[s * groups + g] = m;
      inv_std[s * groups + g] = r;
      double* dst = out.data().data() + (s * c + g * cpg) * hw;
      for (std::size_t ci = 0; ci < cpg; ++ci) {
        const double ga = gamma[g * cpg + ci], be = beta[g * cpg + ci];
        for (std::size_t i = ci * hw; i < (ci + 1) * hw; ++i) dst[i] = (src[i] - m) * r * ga + be;
      }
    }
  }
  if (stats) *stats = {std::move(mean), std::move(inv_std)};
  return out;
}

GroupNormGrads group_norm_backward(const Tensor& x, std::size_t groups, const Tensor& gamma,
                                   const GroupNormStats& stats, const Tensor& grad_out) {
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t cpg = c / groups, n = cpg * hw;
  GroupNormGrads grads{Tensor(x.shape()), Tensor({c}), Tensor({c})};
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double m = stats.mean[s * groups + g], r = stats.inv_std[s * groups + g];
      const std::size_t base = (s * c + g * cpg) * hw;
      const double* xs = x.data().data() + base;
      const double* dy = grad_out.data().data() + base;
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::size_t ci = 0; ci < cpg; ++ci) {
        const std::size_t ch = g * cpg + ci;
        double dg = 0.0, db = 0.0;
        for (std::size_t i = ci * hw; i < (ci + 1) * hw; ++i) {
          const double xhat = (xs[i] - m) * r;
          dg += dy[i] * xhat;
          db += dy[i];
          const double dxhat = dy[i] * gamma[ch];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        grads.gamma[ch] += dg;
        grads.beta[ch] += db;
      }
      double* dx = grads.input.data().data() + base;
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t ci = 0; ci < cpg; ++ci) {
        const double ga = gamma[g * cpg + ci];
        for (std::size_t i = ci * hw; i < (ci + 1) * hw; ++i) {
          const double xhat = (xs[i] - m) * r;
          dx[i] = r * (dy[i] * ga - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
        }
      }
    }
  }
  return grads;
}

Tensor interpolate2d(const Tensor& x, int factor, InterpMode mode) {
  require_rank(x, 4, "interpolate2d");
  if (factor < 1) throw std::invalid_argument("interpolate2d: factor must be a positive integer");
  if (factor == 1) return x;
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = axis_taps(h, factor, mode);
  const auto tx = axis_taps(w, factor, mode);
  const std::size_t oh = ty.size(), ow = tx.size();
  Tensor out({x.dim(0), x.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data().data() + p * h * w;
    double* dst = out.data().data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const AxisTap& a = ty[oy];
      const double* r0 = src + a.i0 * w;
      const double* r1 = src + a.i1 * w;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const AxisTap& bt = tx[ox];
        const double top = r0[bt.i0] * (1.0 - bt.w1) + r0[bt.i1] * bt.w1;
        const double bot = r1[bt.i0] * (1.0 - bt.w1) + r1[bt.i1] * bt.w1;
        dst[oy * ow + ox] = top * (1.0 - a.w1) + bot * a.w1;
      }
    }
  }
  return out;
}

Tensor interpolate2d_backward(const Tensor& grad_out, const Shape& input_shape, int factor, InterpMode mode) {
  if (factor == 1) return grad_out;
  const std::size_t planes = input_shape[0] * input_shape[1], h = input_shape[2], w = input_shape[3];
  const auto ty = axis_taps(h, factor, mode);
  const auto tx = axis_taps(w, factor, mode);
  const std::size_t oh = ty.size(), ow = tx.size();
  Tensor dx(input_shape);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* g = grad_out.data().data() + p * oh * ow;
    double* d = dx.data().data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const AxisTap& a = ty[oy];
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const AxisTap& bt = tx[ox];
        const double v = g[oy * ow + ox];
        d[a.i0 * w + bt.i0] += v * (1.0 - a.w1) * (1.0 - bt.w1);
        d[a.i0 * w + bt.i1] += v * (1.0 - a.w1) * bt.w1;
        d[a.i1 * w + bt.i0] += v * a.w1 * (1.0 - bt.w1);
        d[a.i1 * w + bt.i1] += v * a.w1 * bt.w1;
      }
    }
  }
  return dx;
}

Tensor avg_pool2d(const Tensor& x, int factor) {
  require_rank(x, 4, "avg_pool2d");
  if (factor < 1) throw std::invalid_argument("avg_pool2d: factor must be a positive integer");
  const auto f = static_cast<std::size_t>(factor);
  if (x.dim(2) % f != 0 || x.dim(3) % f != 0) {
    throw ShapeError("avg_pool2d: factor " + std::to_string(factor) + " does not divide extents of " +
                     shape_str(x.shape()));
  }
  if (f == 1) return x;
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / f, ow = w / f;
  Tensor out({x.dim(0), x.dim(1), oh, ow});
  const double inv = 1.0 / static_cast<double>(f * f);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data().data() + p * h * w;
    double* dst = out.data().data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < f; ++dy) {
          for (std::size_t dx = 0; dx < f; ++dx) s += src[(oy * f + dy) * w + ox * f + dx];
        }
        dst[oy * ow + ox] = s * inv;
      }
    }
  }
  return out;
}

}  // namespace sardiff::ops
