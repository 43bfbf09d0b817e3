// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string_view>

#include "sardiff/tensor.hpp"

// Forward and backward kernels for the layer primitives. These are pure
// functions over tensors; `sardiff::ad` records them on a tape.
namespace sardiff::ops {

enum class InterpMode { nearest, bilinear };

InterpMode parse_interp_mode(std::string_view name);
std::string_view interp_mode_name(InterpMode mode);

/// 2-D cross-correlation (no kernel flip). Input [B,Cin,H,W], weight
/// [Cout,Cin,k,k], bias [Cout] or empty. Output extent is
/// (H + 2*padding - k) / stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, int stride, int padding);

struct Conv2dGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

/// Gradients of conv2d given the upstream gradient. Only the requested
/// gradients are computed; the others are left empty.
Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out, int stride,
                            int padding, bool need_input, bool need_weight, bool need_bias);

/// y = x W^T + b with x [B,N], W [M,N], b [M] or empty.
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor* bias);

/// Plain matrix product of rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a^T b and a b^T without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);

double sigmoid(double x);
Tensor silu(const Tensor& x);

struct GroupNormStats {
  Tensor mean;     // [B, groups]
  Tensor inv_std;  // [B, groups]
};

inline constexpr double kGroupNormEps = 1e-5;

/// Normalizes each (sample, group) slice to zero mean and unit variance,
/// then applies per-channel gamma/beta.
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  GroupNormStats* stats = nullptr);

struct GroupNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

GroupNormGrads group_norm_backward(const Tensor& x, std::size_t groups, const Tensor& gamma,
                                   const GroupNormStats& stats, const Tensor& grad_out);

/// Integer-factor upsampling. Bilinear uses half-pixel-center alignment:
/// output pixel i samples source coordinate (i + 0.5) / factor - 0.5,
/// clamped to the valid range.
Tensor interpolate2d(const Tensor& x, int factor, InterpMode mode);
Tensor interpolate2d_backward(const Tensor& grad_out, const Shape& input_shape, int factor, InterpMode mode);

/// Mean over non-overlapping factor x factor blocks.
Tensor avg_pool2d(const Tensor& x, int factor);

}  // namespace sardiff::ops
