#pragma once

#include <string>
#include <vector>

#include "regionmir/dataset.hpp"
#include "regionmir/encoder.hpp"
#include "regionmir/numerics.hpp"

namespace regionmir {

/// Two linear layers with a ReLU between them: r -> W2 relu(W1 r + b1) + b2.
struct ProjectionParams {
  TensorD w1;  // d_hid × d_in
  TensorD b1;  // d_hid
  TensorD w2;  // d × d_hid
  TensorD b2;  // d

  Index in_dim() const { return w1.dim(1); }
  Index hidden_dim() const { return w1.dim(0); }
  Index out_dim() const { return w2.dim(0); }

  friend bool operator==(const ProjectionParams&, const ProjectionParams&) = default;
};

/// Linear anatomy classifier: logits = W^T z + b.
struct ClassifierParams {
  TensorD w;  // d × c
  TensorD b;  // c

  Index num_classes() const { return w.dim(1); }

  friend bool operator==(const ClassifierParams&, const ClassifierParams&) = default;
};

struct RegionEmbedding {
  std::string image_id;
  int label = 0;
  VectorXd z;
  VectorXd z_norm;
};

/// A box mapped to feature-map cells: rows [y0, y1) × cols [x0, x1).
struct CellRange {
  Index y0, y1, x0, x1;
  Index count() const { return (y1 - y0) * (x1 - x0); }
};

/// floor(min / s), ceil(max / s), clamped to the map, at least one cell.
CellRange feature_cells(const BoundingBox& box, Index downsample_factor, Index map_height, Index map_width);

/// Per-channel mean over the cells a box covers.
VectorXd roi_pool(const FeatureMap& fmap, const BoundingBox& box);

/// Spreads grad_out / |cells| over the covered cells of a C×H'×W' gradient.
TensorD roi_pool_backward(const Shape& fmap_shape, Index downsample_factor, const BoundingBox& box,
                          const VectorXd& grad_out);

/// In-place variant accumulating into an existing feature-map gradient.
void roi_pool_backward_accumulate(TensorD& grad_fmap, Index downsample_factor, const BoundingBox& box,
                                  const VectorXd& grad_out);

ProjectionParams projection_init(Index in_dim, Index hidden_dim, Index out_dim, Rng& rng);
ClassifierParams classifier_init(Index dim, Index num_classes, Rng& rng);

struct Projection {
  VectorXd z;
  VectorXd z_norm;
};

struct ProjectionCache {
  VectorXd input;
  VectorXd hidden;  // post-ReLU
  VectorXd z;
};

/// Throws DegenerateVectorError when ||z|| < 1e-12.
Projection project(const ProjectionParams& params, const VectorXd& r, ProjectionCache* cache = nullptr);

struct ProjectionGrads {
  TensorD w1, b1, w2, b2;

  explicit ProjectionGrads(const ProjectionParams& shape_of);
  ProjectionGrads() = default;
};

/// Accumulates parameter gradients for dL/dz into `grads`; returns dL/dr.
VectorXd project_backward(const ProjectionParams& params, const ProjectionCache& cache, const VectorXd& grad_z,
                          ProjectionGrads& grads);

VectorXd classify(const ClassifierParams& params, const VectorXd& z);

/// argmax with ties going to the lowest class id.
int predict(const VectorXd& logits);

struct ClassifierGrads {
  TensorD w, b;
  explicit ClassifierGrads(const ClassifierParams& shape_of);
  ClassifierGrads() = default;
};

/// Accumulates dL/dW, dL/db; returns dL/dz.
VectorXd classify_backward(const ClassifierParams& params, const VectorXd& z, const VectorXd& grad_logits,
                           ClassifierGrads& grads);

/// Boxes in ascending label order.
std::vector<BoundingBox> sorted_boxes(const std::vector<BoundingBox>& boxes);

/// encoder_forward -> roi_pool -> project for every box, ascending label order.
std::vector<RegionEmbedding> embed_regions(const EncoderParams& encoder, const ProjectionParams& projection,
                                           const AnnotatedImage& sample);

}  // namespace regionmir
