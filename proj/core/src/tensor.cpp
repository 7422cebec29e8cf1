#include "advdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "advdet/errors.hpp"

namespace advdet {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_size(shape_) != values_.size()) {
    throw ShapeError("tensor shape " + shape_string(shape_) + " holds " +
                     std::to_string(shape_size(shape_)) + " values, got " +
                     std::to_string(values_.size()));
  }
}

Tensor Tensor::vector(std::vector<double> values) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values));
}

double Tensor::item() const {
  if (values_.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  }
  return values_[0];
}

std::size_t Tensor::row_size() const {
  if (shape_.empty() || shape_[0] == 0) return values_.size();
  return values_.size() / shape_[0];
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t n = row_size();
  return std::span<const double>(values_).subspan(i * n, n);
}

std::span<double> Tensor::row(std::size_t i) {
  const std::size_t n = row_size();
  return std::span<double>(values_).subspan(i * n, n);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                     shape_string(shape));
  }
  return Tensor(std::move(shape), values_);
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin > end || end > shape_[0]) {
    throw ShapeError("row slice out of range for " + shape_string(shape_));
  }
  const std::size_t n = row_size();
  Shape shape = shape_;
  shape[0] = end - begin;
  std::vector<double> values(values_.begin() + static_cast<std::ptrdiff_t>(begin * n),
                             values_.begin() + static_cast<std::ptrdiff_t>(end * n));
  return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
  if (shape_.empty()) throw ShapeError("gather_rows on a scalar");
  const std::size_t n = row_size();
  Shape shape = shape_;
  shape[0] = indices.size();
  std::vector<double> values;
  values.reserve(indices.size() * n);
  for (std::size_t i : indices) {
    if (i >= shape_[0]) throw ShapeError("row index out of range");
    auto r = row(i);
    values.insert(values.end(), r.begin(), r.end());
  }
  return Tensor(std::move(shape), std::move(values));
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace advdet
