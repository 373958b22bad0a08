#include "regionmir/numerics.hpp"

#include <cmath>

namespace regionmir {

TensorD matmul(const TensorD& a, const TensorD& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul: expected rank-2 tensors, got " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  TensorD out({a.dim(0), b.dim(1)});
  auto c = out.matrix();
  gemm_accumulate(a.matrix(), b.matrix(), c);
  return out;
}

RowMatrixXd matmul(const RowMatrixXd& a, const RowMatrixXd& b) {
  RowMatrixXd out = RowMatrixXd::Zero(a.rows(), b.cols());
  gemm_accumulate(a, b, out);
  return out;
}

Index conv_out_extent(Index in, Index stride, Index pad) {
  if (stride < 1) throw DimensionError("conv: stride must be >= 1");
  if (pad < 0) throw DimensionError("conv: padding must be >= 0");
  const Index padded = in + 2 * pad;
  if (padded < 3) {
    throw DimensionError("conv: 3x3 kernel larger than padded input extent " + std::to_string(padded));
  }
  return (padded - 3) / stride + 1;
}

RowMatrixXd im2col(const TensorD& input, Index stride, Index pad) {
  if (input.rank() != 3) throw DimensionError("im2col: expected C×H×W input");
  const Index channels = input.dim(0), height = input.dim(1), width = input.dim(2);
  const Index out_h = conv_out_extent(height, stride, pad);
  const Index out_w = conv_out_extent(width, stride, pad);
  RowMatrixXd cols = RowMatrixXd::Zero(channels * 9, out_h * out_w);
  const double* src = input.data();
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        const Index row = (c * 3 + ky) * 3 + kx;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index y = oy * stride + ky - pad;
          if (y < 0 || y >= height) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index x = ox * stride + kx - pad;
            if (x < 0 || x >= width) continue;
            cols(row, oy * out_w + ox) = src[(c * height + y) * width + x];
          }
        }
      }
    }
  }
  return cols;
}

TensorD col2im(const RowMatrixXd& cols, Index channels, Index height, Index width, Index stride,
               Index pad) {
  const Index out_h = conv_out_extent(height, stride, pad);
  const Index out_w = conv_out_extent(width, stride, pad);
  if (cols.rows() != channels * 9 || cols.cols() != out_h * out_w) {
    throw DimensionError("col2im: patch matrix shape does not match volume");
  }
  TensorD out({channels, height, width});
  double* dst = out.data();
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        const Index row = (c * 3 + ky) * 3 + kx;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index y = oy * stride + ky - pad;
          if (y < 0 || y >= height) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index x = ox * stride + kx - pad;
            if (x < 0 || x >= width) continue;
            dst[(c * height + y) * width + x] += cols(row, oy * out_w + ox);
          }
        }
      }
    }
  }
  return out;
}

TensorD conv2d(const TensorD& input, const TensorD& kernels, Index stride, Index pad) {
  if (input.rank() != 3) throw DimensionError("conv2d: expected C×H×W input");
  if (kernels.rank() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3) {
    throw DimensionError("conv2d: expected F×C×3×3 kernels, got " + shape_string(kernels.shape()));
  }
  if (kernels.dim(1) != input.dim(0)) {
    throw DimensionError("conv2d: kernel channels " + std::to_string(kernels.dim(1)) +
                         " do not match input channels " + std::to_string(input.dim(0)));
  }
  const Index filters = kernels.dim(0);
  const Index out_h = conv_out_extent(input.dim(1), stride, pad);
  const Index out_w = conv_out_extent(input.dim(2), stride, pad);
  const RowMatrixXd cols = im2col(input, stride, pad);
  TensorD out({filters, out_h, out_w});
  auto out_mat = out.matrix(filters, out_h * out_w);
  gemm_accumulate(kernels.matrix(filters, kernels.dim(1) * 9), cols, out_mat);
  return out;
}

VectorXd softmax(const VectorXd& logits) {
  if (logits.size() == 0) throw DimensionError("softmax: empty logits");
  const VectorXd shifted = (logits.array() - logits.maxCoeff()).exp().matrix();
  return shifted / shifted.sum();
}

double log_sum_exp(const VectorXd& x) {
  if (x.size() == 0) throw DimensionError("log_sum_exp: empty input");
  const double top = x.maxCoeff();
  return top + std::log((x.array() - top).exp().sum());
}

VectorXd l2_normalize_backward(const VectorXd& v, const VectorXd& grad_unit) {
  const double norm = v.norm();
  if (!(norm > kDegenerateEps)) {
    throw DegenerateVectorError("l2_normalize_backward: degenerate vector");
  }
  const VectorXd unit = v / norm;
  return (grad_unit - unit * unit.dot(grad_unit)) / norm;
}

void adam_step(TensorD& params, const TensorD& grads, AdamState& state, double lr) {
  if (params.shape() != grads.shape()) {
    throw DimensionError("adam_step: params " + shape_string(params.shape()) + " vs grads " +
                         shape_string(grads.shape()));
  }
  if (state.m.size() == 0 && state.v.size() == 0 && state.step == 0) {
    state.m = TensorD(params.shape());
    state.v = TensorD(params.shape());
  }
  if (state.m.shape() != params.shape() || state.v.shape() != params.shape()) {
    throw DimensionError("adam_step: moment shapes do not match params " + shape_string(params.shape()));
  }
  state.step += 1;
  const VectorXd g = grads.flat() + state.weight_decay * params.flat();
  auto& m = state.m.flat();
  auto& v = state.v.flat();
  m = state.beta1 * m + (1.0 - state.beta1) * g;
  v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
  params.flat().array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
}

TensorD finite_diff_grad(const ScalarFunction& f, const TensorD& x, double h) {
  TensorD grad(x.shape());
  TensorD probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace regionmir
