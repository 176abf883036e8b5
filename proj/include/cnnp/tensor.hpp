#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "cnnp/error.hpp"

namespace cnnp {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_size(const Shape& shape);

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major tensor. Storage is an Eigen column vector so whole-tensor
/// arithmetic goes through `vec()` and 2-D views through `matrix()`.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    for (Index d : shape_) {
      if (d <= 0) {
        throw Error(ErrorCode::shape_mismatch,
                    "tensor dimensions must be positive, got " + shape_string(shape_));
      }
    }
    data_ = Vector::Constant(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : Tensor(std::move(shape)) {
    if (static_cast<Index>(values.size()) != data_.size()) {
      throw Error(ErrorCode::shape_mismatch, "initializer length does not match shape " +
                                                 shape_string(shape_));
    }
    std::copy(values.begin(), values.end(), data_.data());
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.size() == 0; }

  Scalar* data() noexcept { return data_.data(); }
  const Scalar* data() const noexcept { return data_.data(); }
  std::span<Scalar> values() noexcept { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> values() const noexcept {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Vector& vec() noexcept { return data_; }
  const Vector& vec() const noexcept { return data_; }

  MatrixMap matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap(data_.data(), rows, cols);
  }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& at(Index n, Index c, Index h, Index w) { return data_[offset4(n, c, h, w)]; }
  Scalar at(Index n, Index c, Index h, Index w) const { return data_[offset4(n, c, h, w)]; }

  /// Same data, new shape; element count must match.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw Error(ErrorCode::shape_mismatch,
                  "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
  }

  template <typename To>
  Tensor<To> cast() const {
    Tensor<To> out(shape_);
    out.vec() = data_.template cast<To>();
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_view(Index rows, Index cols) const {
    if (rows * cols != data_.size()) {
      throw Error(ErrorCode::shape_mismatch, "matrix view " + std::to_string(rows) + "x" +
                                                 std::to_string(cols) + " over tensor " +
                                                 shape_string(shape_));
    }
  }

  Index offset4(Index n, Index c, Index h, Index w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  Vector data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace cnnp
