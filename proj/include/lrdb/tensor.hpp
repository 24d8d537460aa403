#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lrdb/errors.hpp"

namespace lrdb {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major tensor with an optional gradient slot.
///
/// Image batches use (batch, channels, height, width) order. The gradient
/// slot, when enabled, always has the same extent as the values.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    check_extents();
    values_.assign(static_cast<std::size_t>(shape_size(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<Scalar> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_extents();
    if (static_cast<Index>(values_.size()) != shape_size(shape_)) {
      throw ShapeError("tensor of shape " + shape_string(shape_) + " needs " + std::to_string(shape_size(shape_)) +
                       " values, got " + std::to_string(values_.size()));
    }
  }

  static Tensor scalar(Scalar value) { return Tensor(Shape{1}, std::vector<Scalar>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const noexcept { return static_cast<Index>(values_.size()); }

  std::span<Scalar> values() noexcept { return values_; }
  std::span<const Scalar> values() const noexcept { return values_; }
  Scalar* data() noexcept { return values_.data(); }
  const Scalar* data() const noexcept { return values_.data(); }
  Scalar& operator[](Index i) { return values_[static_cast<std::size_t>(i)]; }
  Scalar operator[](Index i) const { return values_[static_cast<std::size_t>(i)]; }

  /// Value of a rank-1, single-element tensor.
  Scalar item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
    return values_[0];
  }

  bool requires_grad() const noexcept { return has_grad_; }

  void enable_grad() {
    if (!has_grad_) grad_.assign(values_.size(), Scalar(0));
    has_grad_ = true;
  }

  void disable_grad() {
    grad_.clear();
    grad_.shrink_to_fit();
    has_grad_ = false;
  }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), Scalar(0)); }

  std::span<Scalar> grad() noexcept { return grad_; }
  std::span<const Scalar> grad() const noexcept { return grad_; }
  Scalar* grad_data() noexcept { return grad_.data(); }

  MatrixMap matrix(Index rows, Index cols, Index offset = 0) { return MatrixMap(data() + offset, rows, cols); }
  ConstMatrixMap matrix(Index rows, Index cols, Index offset = 0) const {
    return ConstMatrixMap(data() + offset, rows, cols);
  }
  MatrixMap grad_matrix(Index rows, Index cols, Index offset = 0) { return MatrixMap(grad_data() + offset, rows, cols); }

  /// Same values under a new shape of equal size; the gradient slot is not carried.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), values_); }

  template <typename To>
  Tensor<To> cast() const {
    std::vector<To> out(values_.size());
    std::transform(values_.begin(), values_.end(), out.begin(), [](Scalar v) { return static_cast<To>(v); });
    return Tensor<To>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](Scalar v) { return std::isfinite(v); });
  }

 private:
  void check_extents() const {
    for (Index extent : shape_) {
      if (extent <= 0) throw ShapeError("non-positive extent in shape " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<Scalar> values_;
  std::vector<Scalar> grad_;
  bool has_grad_ = false;
};

template <typename Scalar>
using TensorPtr = std::shared_ptr<Tensor<Scalar>>;

template <typename Scalar, typename... Args>
TensorPtr<Scalar> make_tensor(Args&&... args) {
  return std::make_shared<Tensor<Scalar>>(std::forward<Args>(args)...);
}

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace lrdb
