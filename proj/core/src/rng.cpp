// SPDX-License-Identifier: Apache-2.0
#include "sardiff/rng.hpp"

#include <cmath>
#include <numbers>

namespace sardiff {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), key_(splitmix64(seed + kGolden) ^ splitmix64(~stream * kGolden + 1)) {}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return splitmix64(key_ + counter_ * kGolden);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform_pos() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(next_u64());
  const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % span;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return lo + static_cast<std::int64_t>(r % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform_pos();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::exponential() { return -std::log(uniform_pos()); }

Tensor Rng::normal_tensor(const Shape& shape) {
  Tensor t(shape);
  for (double& v : t.storage()) v = normal();
  return t;
}

Rng Rng::split(std::uint64_t child) const {
  return Rng(splitmix64(seed_ ^ splitmix64(stream_ + kGolden)), splitmix64(child + 0x632BE59BD9B4E019ULL) ^ stream_);
}

}  // namespace sardiff
