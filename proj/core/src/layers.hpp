// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small helpers shared by the denoiser and VAE builders. Parameter naming
// convention: "<prefix>.w" / "<prefix>.b" for convs and linears,
// "<prefix>.gamma" / "<prefix>.beta" for group norms.

#include <cmath>
#include <string>

#include "sardiff/autodiff.hpp"
#include "sardiff/params.hpp"
#include "sardiff/rng.hpp"

namespace sardiff::layers {

inline void add_conv(ParamSet& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                     Rng& rng, double gain = std::sqrt(2.0)) {
  Tensor w({cout, cin, k, k});
  const double stddev = gain / std::sqrt(static_cast<double>(cin * k * k));
  for (double& v : w.storage()) v = stddev * rng.normal();
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", Tensor({cout}));
}

inline void add_zero_conv(ParamSet& ps, const std::string& name, std::size_t cin, std::size_t cout) {
  ps.add(name + ".w", Tensor({cout, cin, 1, 1}));
  ps.add(name + ".b", Tensor({cout}));
}

inline void add_linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       double gain = std::sqrt(2.0)) {
  Tensor w({out, in});
  const double stddev = gain / std::sqrt(static_cast<double>(in));
  for (double& v : w.storage()) v = stddev * rng.normal();
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", Tensor({out}));
}

inline void add_group_norm(ParamSet& ps, const std::string& name, std::size_t channels) {
  ps.add(name + ".gamma", Tensor({channels}, 1.0));
  ps.add(name + ".beta", Tensor({channels}));
}

inline Var conv(Tape& t, const BoundParams& p, const std::string& name, Var x, int stride = 1) {
  const Var w = lookup(p, name + ".w");
  const int k = static_cast<int>(t.value(w).dim(2));
  return ad::conv2d(t, x, w, lookup(p, name + ".b"), stride, k / 2);
}

inline Var linear(Tape& t, const BoundParams& p, const std::string& name, Var x) {
  return ad::linear(t, x, lookup(p, name + ".w"), lookup(p, name + ".b"));
}

inline Var group_norm(Tape& t, const BoundParams& p, const std::string& name, Var x, std::size_t groups) {
  return ad::group_norm(t, x, groups, lookup(p, name + ".gamma"), lookup(p, name + ".beta"));
}

}  // namespace sardiff::layers
