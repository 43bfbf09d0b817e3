// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sardiff {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when a tensor operation receives operands of incompatible shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a public operation would produce NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Allocator returning 64-byte aligned blocks.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major n-dimensional array of 64-bit floats.
///
/// Images and latents use the NCHW layout `[batch, channels, height, width]`.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // NCHW element access; no bounds checks beyond the debug assertions of std::vector.
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Returns a copy with a new shape of equal element count.
  Tensor reshaped(Shape shape) const;

  void fill(double v);
  bool all_finite() const;
  /// Throws NonFiniteError naming `where` if any element is NaN or Inf.
  void check_finite(std::string_view where) const;

  double sum() const;
  double mean() const;
  double max_abs() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  Storage data_;
};

/// Throws ShapeError naming both shapes unless they are identical.
void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op);
void require_rank(const Tensor& t, std::size_t rank, std::string_view op);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double s, const Tensor& a);
Tensor& operator+=(Tensor& a, const Tensor& b);

/// Byte-level equality, distinguishing signed zeros.
bool bitwise_equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Selects sample `index` of a batched tensor, keeping a leading batch of one.
Tensor batch_slice(const Tensor& t, std::size_t index);
/// Concatenates along the leading (batch) axis.
Tensor batch_concat(std::span<const Tensor> parts);

}  // namespace sardiff
