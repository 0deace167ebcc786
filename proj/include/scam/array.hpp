#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace scam {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of 64-bit floats. Every dimension is >= 1; a
/// scalar has shape {1}.
class Array {
 public:
  Array();
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> data);

  static Array scalar(double value);
  static Array vector(std::vector<double> values);
  static Array matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double item() const;

  /// Same data under a new shape with the same element count.
  Array reshaped(Shape shape) const;

  void fill(double value);
  bool all_finite() const;

  friend bool operator==(const Array& a, const Array& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace scam
