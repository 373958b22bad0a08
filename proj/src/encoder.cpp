#include "regionmir/encoder.hpp"

#include <cmath>

namespace regionmir {

Index EncoderConfig::downsample_factor() const {
  Index factor = 1;
  for (const auto& layer : layers) factor *= layer.stride;
  return factor;
}

void EncoderConfig::validate() const {
  if (in_channels < 1) throw ConfigError("encoder: in_channels must be >= 1");
  if (layers.empty()) throw ConfigError("encoder: at least one conv layer is required");
  for (const auto& layer : layers) {
    if (layer.out_channels < 1) throw ConfigError("encoder: out_channels must be >= 1");
    if (layer.stride != 1 && layer.stride != 2) throw ConfigError("encoder: strides must be 1 or 2");
  }
}

void EncoderConfig::check_input(Index height, Index width) const {
  const Index s = downsample_factor();
  if (height <= 0 || width <= 0 || height % s != 0 || width % s != 0) {
    throw DimensionError("encoder: input " + std::to_string(height) + "x" + std::to_string(width) +
                         " is not divisible by downsample factor " + std::to_string(s));
  }
}

EncoderParams encoder_init(const EncoderConfig& config, Rng& rng) {
  config.validate();
  EncoderParams params;
  params.config = config;
  Index in = config.in_channels;
  for (const auto& layer : config.layers) {
    TensorD kernel({layer.out_channels, in, 3, 3});
    const double scale = std::sqrt(2.0 / double(in * 9));
    for (Index i = 0; i < kernel.size(); ++i) kernel[i] = scale * rng.normal();
    params.kernels.push_back(std::move(kernel));
    params.biases.emplace_back(Shape{layer.out_channels});
    in = layer.out_channels;
  }
  return params;
}

TensorD image_tensor(const RowMatrixXd& pixels) {
  return TensorD({1, pixels.rows(), pixels.cols()}, Eigen::Map<const VectorXd>(pixels.data(), pixels.size()));
}

FeatureMap encoder_forward(const EncoderParams& params, const TensorD& image, EncoderCache* cache) {
  const auto& config = params.config;
  if (image.rank() != 3 || image.dim(0) != config.in_channels) {
    throw DimensionError("encoder: expected " + std::to_string(config.in_channels) +
                         "×H×W input, got " + shape_string(image.shape()));
  }
  config.check_input(image.dim(1), image.dim(2));
  if (cache) cache->layers.clear();

  TensorD x = image;
  for (std::size_t l = 0; l < config.layers.size(); ++l) {
    const Index stride = config.layers[l].stride;
    const Index filters = config.layers[l].out_channels;
    const Index in_c = x.dim(0), in_h = x.dim(1), in_w = x.dim(2);
    const Index out_h = conv_out_extent(in_h, stride, kEncoderPad);
    const Index out_w = conv_out_extent(in_w, stride, kEncoderPad);

    RowMatrixXd cols = im2col(x, stride, kEncoderPad);
    TensorD y({filters, out_h, out_w});
    auto y_mat = y.matrix(filters, out_h * out_w);
    y_mat.colwise() = params.biases[l].flat();
    gemm_accumulate(params.kernels[l].matrix(filters, in_c * 9), cols, y_mat);
    y.flat() = relu(y.flat());

    if (cache) cache->layers.push_back({in_c, in_h, in_w, stride, std::move(cols), y});
    x = std::move(y);
  }
  return {std::move(x), config.downsample_factor()};
}

EncoderGrads encoder_backward(const EncoderParams& params, const EncoderCache& cache, const TensorD& grad_out) {
  const auto& layers = cache.layers;
  if (layers.size() != params.kernels.size() || layers.empty()) {
    throw DimensionError("encoder_backward: cache does not match parameters");
  }
  if (grad_out.shape() != layers.back().output.shape()) {
    throw DimensionError("encoder_backward: grad " + shape_string(grad_out.shape()) + " vs output " +
                         shape_string(layers.back().output.shape()));
  }

  EncoderGrads grads;
  grads.kernels.resize(layers.size());
  grads.biases.resize(layers.size());
  TensorD grad = grad_out;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& layer = layers[l];
    const Index filters = layer.output.dim(0);
    const Index positions = layer.output.dim(1) * layer.output.dim(2);

    // ReLU: pass gradient only where the activation is positive.
    grad.flat() = (layer.output.flat().array() > 0.0).select(grad.flat(), 0.0);
    const auto g = grad.matrix(filters, positions);

    grads.biases[l] = TensorD::vector(g.rowwise().sum());

    TensorD dk(params.kernels[l].shape());
    auto dk_mat = dk.matrix(filters, layer.in_channels * 9);
    const RowMatrixXd cols_t = layer.cols.transpose();
    gemm_accumulate(g, cols_t, dk_mat);
    grads.kernels[l] = std::move(dk);

    const RowMatrixXd kt = params.kernels[l].matrix(filters, layer.in_channels * 9).transpose();
    RowMatrixXd dcols = RowMatrixXd::Zero(layer.in_channels * 9, positions);
    gemm_accumulate(kt, g, dcols);
    grad = col2im(dcols, layer.in_channels, layer.in_height, layer.in_width, layer.stride, kEncoderPad);
  }
  grads.input = std::move(grad);
  return grads;
}

}  // namespace regionmir
