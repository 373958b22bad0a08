#include "regionmir/region_head.hpp"

#include <algorithm>
#include <cmath>

namespace regionmir {

namespace {

Index ceil_div(Index a, Index b) { return (a + b - 1) / b; }

void normal_fill(TensorD& t, double scale, Rng& rng) {
  for (Index i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
}

}  // namespace

CellRange feature_cells(const BoundingBox& box, Index s, Index map_height, Index map_width) {
  CellRange cells;
  cells.y0 = std::clamp<Index>(box.y0 / s, 0, map_height);
  cells.x0 = std::clamp<Index>(box.x0 / s, 0, map_width);
  cells.y1 = std::clamp<Index>(ceil_div(box.y1, s), 0, map_height);
  cells.x1 = std::clamp<Index>(ceil_div(box.x1, s), 0, map_width);
  if (cells.y1 <= cells.y0) {
    if (cells.y0 >= map_height) cells.y0 = map_height - 1;
    cells.y1 = cells.y0 + 1;
  }
  if (cells.x1 <= cells.x0) {
    if (cells.x0 >= map_width) cells.x0 = map_width - 1;
    cells.x1 = cells.x0 + 1;
  }
  return cells;
}

VectorXd roi_pool(const FeatureMap& fmap, const BoundingBox& box) {
  const Index channels = fmap.channels(), height = fmap.height(), width = fmap.width();
  const CellRange cells = feature_cells(box, fmap.downsample_factor, height, width);
  VectorXd pooled = VectorXd::Zero(channels);
  const double* data = fmap.data.data();
  for (Index c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (Index y = cells.y0; y < cells.y1; ++y) {
      for (Index x = cells.x0; x < cells.x1; ++x) sum += data[(c * height + y) * width + x];
    }
    pooled[c] = sum / double(cells.count());
  }
  return pooled;
}

void roi_pool_backward_accumulate(TensorD& grad_fmap, Index s, const BoundingBox& box, const VectorXd& grad_out) {
  if (grad_fmap.rank() != 3 || grad_fmap.dim(0) != grad_out.size()) {
    throw DimensionError("roi_pool_backward: gradient has " + std::to_string(grad_out.size()) +
                         " channels for map " + shape_string(grad_fmap.shape()));
  }
  const Index height = grad_fmap.dim(1), width = grad_fmap.dim(2);
  const CellRange cells = feature_cells(box, s, height, width);
  const double inv = 1.0 / double(cells.count());
  double* data = grad_fmap.data();
  for (Index c = 0; c < grad_out.size(); ++c) {
    const double g = grad_out[c] * inv;
    for (Index y = cells.y0; y < cells.y1; ++y) {
      for (Index x = cells.x0; x < cells.x1; ++x) data[(c * height + y) * width + x] += g;
    }
  }
}

TensorD roi_pool_backward(const Shape& fmap_shape, Index s, const BoundingBox& box, const VectorXd& grad_out) {
  TensorD grad(fmap_shape);
  roi_pool_backward_accumulate(grad, s, box, grad_out);
  return grad;
}

ProjectionParams projection_init(Index in_dim, Index hidden_dim, Index out_dim, Rng& rng) {
  ProjectionParams p{TensorD({hidden_dim, in_dim}), TensorD({hidden_dim}), TensorD({out_dim, hidden_dim}),
                     TensorD({out_dim})};
  normal_fill(p.w1, std::sqrt(2.0 / double(in_dim)), rng);
  normal_fill(p.w2, std::sqrt(1.0 / double(hidden_dim)), rng);
  return p;
}

ClassifierParams classifier_init(Index dim, Index num_classes, Rng& rng) {
  ClassifierParams p{TensorD({dim, num_classes}), TensorD({num_classes})};
  normal_fill(p.w, std::sqrt(1.0 / double(dim)), rng);
  return p;
}

Projection project(const ProjectionParams& params, const VectorXd& r, ProjectionCache* cache) {
  if (r.size() != params.in_dim()) {
    throw DimensionError("project: input length " + std::to_string(r.size()) + ", expected " +
                         std::to_string(params.in_dim()));
  }
  const auto w1 = params.w1.matrix();
  const auto w2 = params.w2.matrix();
  const VectorXd hidden = relu((w1 * r + params.b1.flat()).eval());
  VectorXd z = w2 * hidden + params.b2.flat();
  VectorXd z_norm = l2_normalize(z);
  if (cache) *cache = {r, hidden, z};
  return {std::move(z), std::move(z_norm)};
}

ProjectionGrads::ProjectionGrads(const ProjectionParams& p)
    : w1(p.w1.shape()), b1(p.b1.shape()), w2(p.w2.shape()), b2(p.b2.shape()) {}

VectorXd project_backward(const ProjectionParams& params, const ProjectionCache& cache, const VectorXd& grad_z,
                          ProjectionGrads& grads) {
  if (grad_z.size() != params.out_dim()) throw DimensionError("project_backward: gradient length mismatch");
  grads.b2.flat() += grad_z;
  grads.w2.matrix() += grad_z * cache.hidden.transpose();
  const VectorXd grad_hidden =
      (cache.hidden.array() > 0.0).select(params.w2.matrix().transpose() * grad_z, 0.0);
  grads.b1.flat() += grad_hidden;
  grads.w1.matrix() += grad_hidden * cache.input.transpose();
  return params.w1.matrix().transpose() * grad_hidden;
}

VectorXd classify(const ClassifierParams& params, const VectorXd& z) {
  if (z.size() != params.w.dim(0)) {
    throw DimensionError("classify: embedding length " + std::to_string(z.size()) + ", expected " +
                         std::to_string(params.w.dim(0)));
  }
  return params.w.matrix().transpose() * z + params.b.flat();
}

int predict(const VectorXd& logits) {
  Index best = 0;
  for (Index i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return int(best);
}

ClassifierGrads::ClassifierGrads(const ClassifierParams& p) : w(p.w.shape()), b(p.b.shape()) {}

VectorXd classify_backward(const ClassifierParams& params, const VectorXd& z, const VectorXd& grad_logits,
                           ClassifierGrads& grads) {
  if (grad_logits.size() != params.num_classes()) throw DimensionError("classify_backward: gradient length mismatch");
  grads.b.flat() += grad_logits;
  grads.w.matrix() += z * grad_logits.transpose();
  return params.w.matrix() * grad_logits;
}

std::vector<BoundingBox> sorted_boxes(const std::vector<BoundingBox>& boxes) {
  std::vector<BoundingBox> out = boxes;
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.label < b.label; });
  return out;
}

std::vector<RegionEmbedding> embed_regions(const EncoderParams& encoder, const ProjectionParams& projection,
                                           const AnnotatedImage& sample) {
  std::vector<RegionEmbedding> out;
  if (sample.boxes.empty()) return out;
  const FeatureMap fmap = encoder_forward(encoder, image_tensor(sample.pixels));
  for (const auto& box : sorted_boxes(sample.boxes)) {
    auto [z, z_norm] = project(projection, roi_pool(fmap, box));
    out.push_back({sample.id, box.label, std::move(z), std::move(z_norm)});
  }
  return out;
}

}  // namespace regionmir
