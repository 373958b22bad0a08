#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "regionmir/errors.hpp"

namespace regionmir {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using VectorXd = Vector<double>;
using VectorXf = Vector<float>;
using RowMatrixXd = RowMatrix<double>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-d array backed by an Eigen vector.
///
/// The flat storage is exposed as an Eigen vector so elementwise math can be
/// written as Eigen expressions; `matrix(rows, cols)` views the same storage
/// as a row-major matrix.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Vector<Scalar>;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Storage::Zero(shape_size(shape_))) {}

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Storage(Eigen::Map<const Storage>(values.begin(), Index(values.size())))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor vector(const Storage& v) { return Tensor({v.size()}, v); }

  static Tensor from_matrix(const RowMatrix<Scalar>& m) {
    return Tensor({m.rows(), m.cols()}, Eigen::Map<const Storage>(m.data(), m.size()));
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return Index(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(std::size_t(axis)); }
  Index size() const noexcept { return data_.size(); }

  Storage& flat() noexcept { return data_; }
  const Storage& flat() const noexcept { return data_; }

  Scalar* data() noexcept { return data_.data(); }
  const Scalar* data() const noexcept { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  MatrixMap matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap(data_.data(), rows, cols);
  }

  /// 2-d view; rank-2 tensors only.
  MatrixMap matrix() { return matrix(dim(0), rank() == 2 ? dim(1) : -1); }
  ConstMatrixMap matrix() const { return matrix(dim(0), rank() == 2 ? dim(1) : -1); }

  bool all_finite() const { return data_.allFinite(); }

  void set_zero() { data_.setZero(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_view(Index rows, Index cols) const {
    if (rows < 0 || cols < 0 || rows * cols != data_.size()) {
      throw DimensionError("cannot view tensor " + shape_string(shape_) + " as " +
                           std::to_string(rows) + "x" + std::to_string(cols) + " matrix");
    }
  }

  Shape shape_;
  Storage data_;
};

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

}  // namespace regionmir
