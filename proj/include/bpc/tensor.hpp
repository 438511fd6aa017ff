#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "bpc/errors.hpp"

namespace bpc {

using Shape = std::vector<std::size_t>;

// Dense row-major f64 tensor. Rank 0 is not used; scalars are shape {1}.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (element_count(shape) != data.size())
      throw DimensionError("tensor: shape/data size mismatch");
  }

  static std::size_t element_count(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(Shape s) {
    std::size_t n = element_count(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(Shape s, double v) {
    std::size_t n = element_count(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t size() const { return data.size(); }
  bool is_scalar() const { return data.size() == 1; }
  std::size_t rank() const { return shape.size(); }

  // Dimension i, with bounds check.
  std::size_t dim(std::size_t i) const {
    if (i >= shape.size()) throw DimensionError("tensor: dim index out of range");
    return shape[i];
  }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  double& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace bpc
