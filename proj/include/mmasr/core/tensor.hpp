#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mmasr/core/error.hpp"

namespace mmasr::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
}

inline std::size_t shape_product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor with an optional gradient buffer.
///
/// Storage is always a 2-D matrix: rank-1 tensors are 1 x n, higher ranks
/// fold every trailing extent into the column count. `shape()` keeps the
/// logical extents.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    auto [r, c] = storage_extents(shape_);
    values_ = Matrix<T>::Zero(r, c);
  }

  Tensor(Shape shape, std::vector<T> values) : Tensor(std::move(shape)) {
    if (values.size() != shape_product(shape_)) {
      throw ShapeError("tensor " + shape_string(shape_) + " given " + std::to_string(values.size()) +
                       " values");
    }
    std::copy(values.begin(), values.end(), values_.data());
  }

  static Tensor from_matrix(Matrix<T> m) {
    Tensor t;
    t.shape_ = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
    t.validate_shape();
    t.values_ = std::move(m);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }
  std::size_t rank() const { return shape_.size(); }

  const Matrix<T>& matrix() const { return values_; }
  Matrix<T>& matrix() { return values_; }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }

  bool has_grad() const { return grad_.size() == values_.size() && grad_.size() > 0; }
  const Matrix<T>& grad() const { return grad_; }
  Matrix<T>& grad() {
    if (!has_grad()) grad_ = Matrix<T>::Zero(values_.rows(), values_.cols());
    return grad_;
  }
  void zero_grad() {
    if (has_grad()) grad_.setZero();
  }

  bool all_finite() const { return values_.allFinite(); }

 private:
  static std::pair<Eigen::Index, Eigen::Index> storage_extents(const Shape& s) {
    if (s.size() == 1) return {1, static_cast<Eigen::Index>(s[0])};
    Eigen::Index cols = 1;
    for (std::size_t i = 1; i < s.size(); ++i) cols *= static_cast<Eigen::Index>(s[i]);
    return {static_cast<Eigen::Index>(s[0]), cols};
  }

  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  Matrix<T> values_;
  Matrix<T> grad_;
};

}  // namespace mmasr::nn
