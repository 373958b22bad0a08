#pragma once

#include <vector>

#include "regionmir/numerics.hpp"
#include "regionmir/rng.hpp"
#include "regionmir/tensor.hpp"

namespace regionmir {

struct ConvLayerSpec {
  Index out_channels = 16;
  Index stride = 2;
  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

/// Stack of 3x3 conv + ReLU layers, padding 1.
struct EncoderConfig {
  Index in_channels = 1;
  std::vector<ConvLayerSpec> layers = {{16, 2}, {32, 2}, {64, 2}};

  Index downsample_factor() const;
  Index out_channels() const { return layers.empty() ? in_channels : layers.back().out_channels; }

  /// Throws ConfigError for an empty stack or a stride outside {1, 2}.
  void validate() const;
  /// Throws DimensionError unless both sides divide by the downsample factor.
  void check_input(Index height, Index width) const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline constexpr Index kEncoderPad = 1;

struct EncoderParams {
  EncoderConfig config;
  std::vector<TensorD> kernels;  // F×C×3×3 per layer
  std::vector<TensorD> biases;   // F per layer

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

struct FeatureMap {
  TensorD data;  // C×H'×W'
  Index downsample_factor = 1;

  Index channels() const { return data.dim(0); }
  Index height() const { return data.dim(1); }
  Index width() const { return data.dim(2); }
};

/// Activations retained by encoder_forward for the backward pass.
struct EncoderCache {
  struct Layer {
    Index in_channels, in_height, in_width, stride;
    RowMatrixXd cols;  // im2col of the layer input
    TensorD output;    // post-ReLU activation
  };
  std::vector<Layer> layers;
};

struct EncoderGrads {
  std::vector<TensorD> kernels;
  std::vector<TensorD> biases;
  TensorD input;
};

/// He-scaled normal kernels (sqrt(2 / fan_in)), zero biases.
EncoderParams encoder_init(const EncoderConfig& config, Rng& rng);

/// `image` is C×H×W (C = config.in_channels). Fills `cache` when non-null.
FeatureMap encoder_forward(const EncoderParams& params, const TensorD& image, EncoderCache* cache = nullptr);

EncoderGrads encoder_backward(const EncoderParams& params, const EncoderCache& cache, const TensorD& grad_out);

/// Lift an H×W grayscale image to a 1×H×W tensor.
TensorD image_tensor(const RowMatrixXd& pixels);

}  // namespace regionmir
