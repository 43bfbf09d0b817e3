// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sardiff/autodiff.hpp"
#include "sardiff/tensor.hpp"

namespace sardiff {

struct Param {
  std::string name;
  Tensor value;
  bool frozen = false;
};

/// Ordered collection of named weights. Order is insertion order and is
/// what checkpoints and optimizers iterate over.
class ParamSet {
 public:
  void add(std::string name, Tensor value, bool frozen = false);
  bool contains(std::string_view name) const;
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  Param& param(std::string_view name);
  const Param& param(std::string_view name) const;

  std::vector<Param>& entries() { return entries_; }
  const std::vector<Param>& entries() const { return entries_; }

  std::size_t element_count() const;
  std::size_t trainable_count() const;
  void set_frozen(bool frozen);

  /// Adds every entry of `other`, prefixing names.
  void merge(const ParamSet& other, std::string_view prefix = "");

  friend bool operator==(const ParamSet& a, const ParamSet& b);

 private:
  std::vector<Param> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using BoundParams = std::unordered_map<std::string, Var>;
using GradMap = std::map<std::string, Tensor>;

/// Records every parameter as a tape leaf. Frozen parameters (or all of them
/// when `track_grads` is false) are recorded without gradient tracking.
BoundParams bind_params(Tape& tape, const ParamSet& params, bool track_grads);
Var lookup(const BoundParams& bound, const std::string& name);

/// Gradients of the trainable entries of `params`; frozen entries are
/// reported as exact zeros.
GradMap collect_grads(const Tape& tape, const BoundParams& bound, const ParamSet& params);

/// FNV-1a over names, shapes and values; stable across platforms.
std::uint64_t params_hash(const ParamSet& params);

}  // namespace sardiff
