#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rankcal/error.hpp"

namespace rankcal {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. An empty shape denotes a scalar.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() : data(1, 0.0) {}

  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_size(shape), 0.0) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
  }

  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_size(shape) != data.size()) {
      throw DimensionError("shape " + to_string(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  bool is_scalar() const noexcept { return data.size() == 1 && shape.size() <= 1; }

  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  double item() const {
    if (data.size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape));
    return data[0];
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

}  // namespace rankcal
