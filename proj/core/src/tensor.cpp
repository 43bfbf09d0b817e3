// SPDX-License-Identifier: Apache-2.0
#include "sardiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace sardiff {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " elements");
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::check_finite(std::string_view where) const {
  if (!all_finite()) {
    throw NonFiniteError(std::string(where) + ": non-finite value in tensor of shape " + shape_str(shape_));
  }
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, std::string_view op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  out += b;
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor operator*(double s, const Tensor& a) {
  Tensor out = a;
  for (double& v : out.storage()) v *= s;
  return out;
}

Tensor& operator+=(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor batch_slice(const Tensor& t, std::size_t index) {
  if (t.rank() == 0 || index >= t.dim(0)) {
    throw ShapeError("batch_slice: index " + std::to_string(index) + " out of range for " + shape_str(t.shape()));
  }
  Shape shape = t.shape();
  const std::size_t stride = t.size() / shape[0];
  shape[0] = 1;
  std::vector<double> data(t.data().begin() + static_cast<std::ptrdiff_t>(index * stride),
                           t.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * stride));
  return Tensor(std::move(shape), std::move(data));
}

Tensor batch_concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("batch_concat: no tensors");
  Shape shape = parts[0].shape();
  std::size_t batch = 0;
  std::vector<double> data;
  for (const Tensor& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw ShapeError("batch_concat: incompatible shapes " + shape_str(shape) + " and " + shape_str(p.shape()));
    }
    batch += p.dim(0);
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  shape[0] = batch;
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace sardiff
