#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "regionmir/errors.hpp"
#include "regionmir/tensor.hpp"

namespace regionmir {

/// Norm threshold below which a vector counts as degenerate.
inline constexpr double kDegenerateEps = 1e-12;

// ---------------------------------------------------------------------------
// Dense kernels
// ---------------------------------------------------------------------------

/// C += A * B over row-major storage. Loop order i-k-j, so every C(i, j)
/// accumulates its K products strictly left to right.
template <typename DerivedA, typename DerivedB, typename DerivedC>
void gemm_accumulate(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                     Eigen::MatrixBase<DerivedC>& c) {
  if (a.cols() != b.rows() || c.rows() != a.rows() || c.cols() != b.cols()) {
    throw DimensionError("gemm: cannot multiply " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " by " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index k = 0; k < a.cols(); ++k) {
      const auto aik = a(i, k);
      if (aik == 0) continue;
      c.row(i) += aik * b.row(k);
    }
  }
}

/// Plain matrix product of two rank-2 tensors.
TensorD matmul(const TensorD& a, const TensorD& b);

/// Dense product of Eigen matrices with the same fixed summation order.
RowMatrixXd matmul(const RowMatrixXd& a, const RowMatrixXd& b);

/// Spatial output extent of a 3x3 convolution.
Index conv_out_extent(Index in, Index stride, Index pad);

/// Unfold a C×H×W volume into a (C·9)×(H''·W'') patch matrix for 3x3 kernels.
RowMatrixXd im2col(const TensorD& input, Index stride, Index pad);

/// Adjoint of im2col: scatter-add patch gradients back into a C×H×W volume.
TensorD col2im(const RowMatrixXd& cols, Index channels, Index height, Index width, Index stride,
               Index pad);

/// 3x3 cross-correlation with zero padding: C×H×W, F×C×3×3 -> F×H''×W''.
TensorD conv2d(const TensorD& input, const TensorD& kernels, Index stride, Index pad);

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename Derived>
auto relu(const Eigen::MatrixBase<Derived>& x) {
  return x.cwiseMax(typename Derived::Scalar(0));
}

inline TensorD relu(const TensorD& x) { return TensorD(x.shape(), relu(x.flat()).eval()); }

/// Max-subtracted softmax.
VectorXd softmax(const VectorXd& logits);

/// log(sum(exp(x))) with max subtraction.
double log_sum_exp(const VectorXd& x);

// ---------------------------------------------------------------------------
// Normalization and similarity
// ---------------------------------------------------------------------------

template <typename Derived>
Vector<typename Derived::Scalar> l2_normalize(const Eigen::MatrixBase<Derived>& v) {
  const double norm = double(v.norm());
  if (!(norm > kDegenerateEps)) {
    throw DegenerateVectorError("l2_normalize: vector norm " + std::to_string(norm) +
                                " is below 1e-12");
  }
  return (v / typename Derived::Scalar(norm)).eval();
}

/// Vector-Jacobian product of l2_normalize at `v` applied to `grad_unit`.
VectorXd l2_normalize_backward(const VectorXd& v, const VectorXd& grad_unit);

/// Cosine similarity evaluated in double precision and clamped to [-1, 1].
template <typename DerivedA, typename DerivedB>
double cosine_similarity(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_similarity: length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  const VectorXd ad = a.template cast<double>();
  const VectorXd bd = b.template cast<double>();
  const double na = ad.norm();
  const double nb = bd.norm();
  if (!(na > kDegenerateEps) || !(nb > kDegenerateEps)) {
    throw DegenerateVectorError("cosine_similarity: degenerate input vector");
  }
  return std::clamp(ad.dot(bd) / (na * nb), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// Adam moments for one parameter tensor. `beta1` plays the role of momentum.
struct AdamState {
  long step = 0;
  TensorD m;
  TensorD v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  AdamState() = default;
  AdamState(const Shape& shape, double weight_decay_)
      : m(shape), v(shape), weight_decay(weight_decay_) {}
};

/// One Adam update in place. Weight decay is coupled: g <- g + wd * theta
/// before the moment updates. Moments are lazily shaped on the first step.
void adam_step(TensorD& params, const TensorD& grads, AdamState& state, double lr);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

using ScalarFunction = std::function<double(const TensorD&)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
TensorD finite_diff_grad(const ScalarFunction& f, const TensorD& x, double h = 1e-6);

/// ||a - b|| / max(||a||, ||b||), or 0 when both are (numerically) zero.
template <typename DerivedA, typename DerivedB>
double relative_error(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  const double scale = std::max(a.norm(), b.norm());
  if (scale < 1e-300) return 0.0;
  return (a - b).norm() / scale;
}

inline double relative_error(const TensorD& a, const TensorD& b) {
  if (a.shape() != b.shape()) throw DimensionError("relative_error: shape mismatch");
  return relative_error(a.flat(), b.flat());
}

}  // namespace regionmir
