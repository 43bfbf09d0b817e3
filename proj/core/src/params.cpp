// SPDX-License-Identifier: Apache-2.0
#include "sardiff/params.hpp"

#include <cstring>
#include <stdexcept>

namespace sardiff {

void ParamSet::add(std::string name, Tensor value, bool frozen) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back(Param{std::move(name), std::move(value), frozen});
}

bool ParamSet::contains(std::string_view name) const { return index_.contains(std::string(name)); }

Param& ParamSet::param(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  return entries_[it->second];
}

const Param& ParamSet::param(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  return entries_[it->second];
}

Tensor& ParamSet::at(std::string_view name) { return param(name).value; }
const Tensor& ParamSet::at(std::string_view name) const { return param(name).value; }

std::size_t ParamSet::element_count() const {
  std::size_t n = 0;
  for (const Param& p : entries_) n += p.value.size();
  return n;
}

std::size_t ParamSet::trainable_count() const {
  std::size_t n = 0;
  for (const Param& p : entries_) {
    if (!p.frozen) n += p.value.size();
  }
  return n;
}

void ParamSet::set_frozen(bool frozen) {
  for (Param& p : entries_) p.frozen = frozen;
}

void ParamSet::merge(const ParamSet& other, std::string_view prefix) {
  for (const Param& p : other.entries_) add(std::string(prefix) + p.name, p.value, p.frozen);
}

bool operator==(const ParamSet& a, const ParamSet& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    if (a.entries_[i].name != b.entries_[i].name || !bitwise_equal(a.entries_[i].value, b.entries_[i].value)) {
      return false;
    }
  }
  return true;
}

BoundParams bind_params(Tape& tape, const ParamSet& params, bool track_grads) {
  BoundParams bound;
  bound.reserve(params.entries().size());
  for (const Param& p : params.entries()) bound.emplace(p.name, tape.leaf(p.value, track_grads && !p.frozen));
  return bound;
}

Var lookup(const BoundParams& bound, const std::string& name) {
  auto it = bound.find(name);
  if (it == bound.end()) throw std::out_of_range("parameter '" + name + "' is not bound");
  return it->second;
}

GradMap collect_grads(const Tape& tape, const BoundParams& bound, const ParamSet& params) {
  GradMap grads;
  for (const Param& p : params.entries()) grads.emplace(p.name, tape.grad(lookup(bound, p.name)));
  return grads;
}

std::uint64_t params_hash(const ParamSet& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const Param& p : params.entries()) {
    mix(p.name.data(), p.name.size());
    for (std::size_t d : p.value.shape()) {
      const auto e = static_cast<std::uint64_t>(d);
      mix(&e, sizeof e);
    }
    mix(p.value.data().data(), p.value.size() * sizeof(double));
  }
  return h;
}

}  // namespace sardiff
