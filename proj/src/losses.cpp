#include "regionmir/losses.hpp"

#include <cmath>
#include <set>

namespace regionmir {

namespace {

constexpr double kUnitNormTolerance = 1e-5;

}  // namespace

LossResult region_contrastive_loss(const ContrastiveBatch& batch) {
  const auto& emb = batch.embeddings;
  const std::size_t n = emb.size();
  if (!(batch.tau > 0.0)) throw ParameterError("region_contrastive_loss: tau must be > 0");
  if (n < 2) throw ParameterError("region_contrastive_loss: batch needs at least 2 region embeddings");
  const Index dim = emb.front().z.size();
  for (const auto& e : emb) {
    if (e.z.size() != dim) throw DimensionError("region_contrastive_loss: embedding lengths differ");
    if (std::abs(e.z.norm() - 1.0) > kUnitNormTolerance) {
      throw ParameterError("region_contrastive_loss: embeddings must be unit-norm");
    }
  }

  std::vector<std::vector<std::size_t>> positives(n);
  std::set<int> classes;
  int pair_count = 0;
  for (std::size_t a = 0; a < n; ++a) {
    if (emb[a].side != Side::kQuery) continue;
    for (std::size_t p = 0; p < n; ++p) {
      if (emb[p].side != Side::kAnchor || emb[p].label != emb[a].label) continue;
      if (batch.positive_mode == PositiveMode::kPaired && emb[p].slot != emb[a].slot) continue;
      positives[a].push_back(p);
    }
    if (!positives[a].empty()) {
      classes.insert(emb[a].label);
      pair_count += int(positives[a].size());
    }
  }
  if (classes.empty()) throw EmptyPositiveError("region_contrastive_loss: batch has no positive pair");
  const double c_eff = double(classes.size());
  const double inv_tau = 1.0 / batch.tau;

  LossResult result;
  result.effective_classes = int(classes.size());
  result.positive_pairs = pair_count;
  result.grads.assign(n, VectorXd::Zero(dim));

  std::vector<std::size_t> denom;
  VectorXd logits;
  for (std::size_t a = 0; a < n; ++a) {
    const auto& pos = positives[a];
    if (pos.empty()) continue;
    const double w = batch.positive_mode == PositiveMode::kPaired ? 1.0 / c_eff
                                                                  : 1.0 / (c_eff * double(pos.size()));
    const double w_total = w * double(pos.size());

    denom.clear();
    for (std::size_t o = 0; o < n; ++o) {
      if (o != a || batch.include_self) denom.push_back(o);
    }
    logits.resize(Index(denom.size()));
    for (std::size_t j = 0; j < denom.size(); ++j) logits[Index(j)] = emb[a].z.dot(emb[denom[j]].z) * inv_tau;
    const double lse = log_sum_exp(logits);

    for (std::size_t p : pos) {
      result.loss += w * (lse - emb[a].z.dot(emb[p].z) * inv_tau);
      result.grads[a] -= (w * inv_tau) * emb[p].z;
      result.grads[p] -= (w * inv_tau) * emb[a].z;
    }
    for (std::size_t j = 0; j < denom.size(); ++j) {
      const double coef = w_total * std::exp(logits[Index(j)] - lse) * inv_tau;
      result.grads[a] += coef * emb[denom[j]].z;
      result.grads[denom[j]] += coef * emb[a].z;
    }
  }
  return result;
}

LossResult cross_entropy_loss(const std::vector<LabeledLogits>& batch) {
  if (batch.empty()) throw ParameterError("cross_entropy_loss: empty batch");
  const double inv_n = 1.0 / double(batch.size());
  LossResult result;
  result.grads.reserve(batch.size());
  for (const auto& item : batch) {
    if (item.label < 0 || item.label >= item.logits.size()) {
      throw ParameterError("cross_entropy_loss: label " + std::to_string(item.label) + " out of range for " +
                           std::to_string(item.logits.size()) + " classes");
    }
    result.loss += (log_sum_exp(item.logits) - item.logits[item.label]) * inv_n;
    VectorXd grad = softmax(item.logits);
    grad[item.label] -= 1.0;
    result.grads.push_back(grad * inv_n);
  }
  return result;
}

double cotrain_loss(double contrastive, double ce, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("cotrain_loss: lambda must be >= 0");
  return contrastive + lambda * ce;
}

}  // namespace regionmir
