#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sentinet/errors.hpp"
#include "sentinet/rng.hpp"

#ifndef SENTINET_REAL
#define SENTINET_REAL float
#endif

namespace sentinet {

using Index = Eigen::Index;

/// Storage precision of the default build. Configure with
/// -DSENTINET_DOUBLE=ON for a 64-bit build.
using Real = SENTINET_REAL;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  return os.str();
}

inline void check_extents(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (Index e : shape)
    if (e < 1) throw ShapeError("non-positive extent in shape " + shape_string(shape));
}

/// Dense row-major array with an explicit shape (outermost extent first).
///
/// A default-constructed tensor is an empty placeholder with no shape; every
/// other tensor satisfies size() == product(shape()).
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;
  using VectorMap = Eigen::Map<Vector<Scalar>>;
  using ConstVectorMap = Eigen::Map<const Vector<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_ = Vector<Scalar>::Constant(shape_size(shape_), fill);
  }

  Tensor(std::initializer_list<Index> shape, Scalar fill = Scalar(0)) : Tensor(Shape(shape), fill) {}

  Tensor(Shape shape, std::span<const Scalar> values) : shape_(std::move(shape)) {
    check_extents(shape_);
    if (static_cast<Index>(values.size()) != shape_size(shape_))
      throw ShapeError("value count does not match shape " + shape_string(shape_));
    data_ = ConstVectorMap(values.data(), static_cast<Index>(values.size()));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), std::span<const Scalar>(values.begin(), values.size())) {}

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  std::span<Scalar> values() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> values() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Scalar& operator[](Index i) { return data_[i]; }
  const Scalar& operator[](Index i) const { return data_[i]; }

  // Element access for the [C,H,W] layout used throughout the layers.
  Scalar& at(Index c, Index y, Index x) { return data_[(c * shape_[1] + y) * shape_[2] + x]; }
  const Scalar& at(Index c, Index y, Index x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  Vector<Scalar>& vec() { return data_; }
  const Vector<Scalar>& vec() const { return data_; }

  /// Row-major matrix view over the whole buffer.
  MatrixMap matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap(data_.data(), rows, cols);
  }
  /// First extent as rows, remaining extents flattened into columns.
  MatrixMap matrix() { return matrix(shape_.at(0), size() / shape_.at(0)); }
  ConstMatrixMap matrix() const { return matrix(shape_.at(0), size() / shape_.at(0)); }

  void set_zero() { data_.setZero(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    if (empty()) return out;
    out = Tensor<Other>(shape_);
    out.vec() = data_.template cast<Other>();
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  template <typename>
  friend class Tensor;
  template <typename S>
  friend Tensor<S> reshape(Tensor<S> t, Shape new_shape);

  void check_view(Index rows, Index cols) const {
    if (rows * cols != size())
      throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " over tensor " + shape_string(shape_));
  }

  Shape shape_;
  Vector<Scalar> data_;
};

/// Constant-filled tensor.
template <typename Scalar>
Tensor<Scalar> tensor_constant(Shape shape, Scalar value) {
  return Tensor<Scalar>(std::move(shape), value);
}

/// Tensor of independent N(mean, stddev^2) draws taken in row-major order.
template <typename Scalar>
Tensor<Scalar> tensor_gaussian(Shape shape, double mean, double stddev, Rng& rng) {
  if (stddev < 0) throw ParameterError("gaussian fill: negative standard deviation");
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.gaussian(mean, stddev));
  return t;
}

/// Same buffer, new shape. The element count must be preserved.
template <typename Scalar>
Tensor<Scalar> reshape(Tensor<Scalar> t, Shape new_shape) {
  check_extents(new_shape);
  if (shape_size(new_shape) != t.size())
    throw ShapeError("cannot reshape " + shape_string(t.shape_) + " to " +
                     shape_string(new_shape));
  t.shape_ = std::move(new_shape);
  return t;
}

/// 2-D matrix product.
///
/// Delegates to Eigen's blocked GEMM. The library is built without OpenMP,
/// so the kernel runs single-threaded and its blocking (and hence the
/// floating-point summation order) depends only on the operand sizes and the
/// compiled instruction set: repeated calls are bit-reproducible.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects 2-D operands");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul inner dimension mismatch: " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  Tensor<Scalar> out({a.dim(0), b.dim(1)});
  out.matrix().noalias() = a.matrix() * b.matrix();
  return out;
}

}  // namespace sentinet
