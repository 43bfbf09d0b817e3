// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "sardiff/tensor.hpp"

namespace sardiff {

/// Counter-based generator keyed by (seed, stream).
///
/// Output `i` is a pure function of (seed, stream, i): a SplitMix64 finalizer
/// applied to the key plus a Weyl-sequence counter. Streams derived with
/// `split` are independent, so per-sample generators can be created in any
/// order and still reproduce the serial result.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform double in (0, 1]; safe argument for log.
  double uniform_pos();
  /// Uniform integer in [lo, hi], inclusive, without modulo bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller; the second value of each pair is cached.
  double normal();
  /// Exponential with unit mean.
  double exponential();

  Tensor normal_tensor(const Shape& shape);

  /// Child generator on a derived stream; does not advance this generator.
  Rng split(std::uint64_t child) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace sardiff
