#include "scam/array.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "scam/errors.hpp"

namespace scam {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("array shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("array dimension of size 0 in " + shape_string(shape));
  }
}

}  // namespace

Array::Array() : shape_{1}, data_(1, 0.0) {}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
  }
}

Array Array::scalar(double value) { return Array({1}, std::vector<double>{value}); }

Array Array::vector(std::vector<double> values) {
  const auto n = values.size();
  return Array({n}, std::move(values));
}

Array Array::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Array({r, c}, std::move(data));
}

double Array::item() const {
  if (data_.size() != 1) throw ContractError("item() on non-scalar array " + shape_string(shape_));
  return data_[0];
}

Array Array::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Array(std::move(shape), data_);
}

void Array::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace scam
