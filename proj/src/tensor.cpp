// SPDX-License-Identifier: Apache-2.0
#include "bractive/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace bractive {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto e : shape_)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
  if (shape_size(shape_) != data_.size())
    throw DimensionError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::vec(std::vector<double> v) {
  auto n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> d;
  d.reserve(r * c);
  for (auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    d.insert(d.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(d));
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= shape_.size()) throw DimensionError("axis " + std::to_string(i) + " out of range for " + shape_str(shape_));
  return shape_[i];
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw DimensionError("expected rank 1 or 2, got " + shape_str(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() != 2) throw DimensionError("expected rank 1 or 2, got " + shape_str(shape_));
  return shape_[1];
}

std::span<double> Tensor::row(std::size_t r) {
  auto c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

std::span<const double> Tensor::row(std::size_t r) const {
  auto c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

Tensor Tensor::reshaped(Shape s) const {
  if (shape_size(s) != data_.size())
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
  return Tensor(std::move(s), data_);
}

Tensor Tensor::row_slice(std::size_t start, std::size_t count) const {
  auto c = cols();
  if (start + count > rows()) throw DimensionError("row slice out of range for " + shape_str(shape_));
  std::vector<double> d(data_.begin() + static_cast<std::ptrdiff_t>(start * c),
                        data_.begin() + static_cast<std::ptrdiff_t>((start + count) * c));
  return Tensor({count, c}, std::move(d));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

void require_finite(const Tensor& t, std::string_view where) {
  if (!t.all_finite()) throw ValueError("non-finite value produced by " + std::string(where));
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view where) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(where) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace bractive
