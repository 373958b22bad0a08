#pragma once

#include <vector>

#include "regionmir/numerics.hpp"

namespace regionmir {

enum class Side { kQuery, kAnchor };

enum class PositiveMode {
  kPaired,    // positive = same anatomy in the paired image (same slot, other side)
  kAllPairs,  // positives = same anatomy in every image on the other side
};

/// One unit-norm region embedding inside a contrastive batch.
struct BatchEmbedding {
  Side side = Side::kQuery;
  int slot = 0;  // query slot s is paired with anchor slot s
  int label = 0;
  VectorXd z;
};

/// Query/anchor region embeddings of one training step.
///
/// Every query-side embedding is the reference of a log-ratio term; its
/// positives live on the anchor side. The denominator runs over every other
/// embedding in the batch, both sides and all anatomies.
struct ContrastiveBatch {
  std::vector<BatchEmbedding> embeddings;
  double tau = 0.1;
  PositiveMode positive_mode = PositiveMode::kAllPairs;
  bool include_self = false;
};

struct LossResult {
  double loss = 0.0;
  std::vector<VectorXd> grads;  // one per input, same order
  int effective_classes = 0;    // anatomies with at least one positive pair
  int positive_pairs = 0;
};

/// Region-wise contrastive loss with analytic gradients w.r.t. every embedding.
///
/// Throws ParameterError for tau <= 0, fewer than two embeddings or a
/// non-unit embedding, and EmptyPositiveError when no positive pair exists.
LossResult region_contrastive_loss(const ContrastiveBatch& batch);

struct LabeledLogits {
  VectorXd logits;
  int label = 0;
};

/// Mean softmax cross-entropy; grads[i] = (softmax(logits_i) - onehot) / N.
LossResult cross_entropy_loss(const std::vector<LabeledLogits>& batch);

/// contrastive + lambda * ce.
double cotrain_loss(double contrastive, double ce, double lambda);

}  // namespace regionmir
