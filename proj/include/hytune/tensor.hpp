#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hytune/errors.hpp"

namespace hytune {

/// Dense row-major tensor of 64-bit floats.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape volume " +
                            std::to_string(element_count(shape_)));
    }
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  const double& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Element (r, c) of a rank-2 tensor.
  double& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  const double& at(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

  /// Row r of a rank-2 tensor.
  std::span<double> row(std::size_t r) noexcept {
    return std::span<double>(data_).subspan(r * shape_[1], shape_[1]);
  }
  std::span<const double> row(std::size_t r) const noexcept {
    return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
  }

  void fill(double value) noexcept { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::size_t b) { return a * b; });
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

}  // namespace hytune
