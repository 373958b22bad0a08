#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "regionmir/dataset.hpp"
#include "regionmir/encoder.hpp"
#include "regionmir/losses.hpp"
#include "regionmir/region_head.hpp"

namespace regionmir {

struct ModelConfig {
  EncoderConfig encoder;
  Index hidden_dim = 128;
  Index embed_dim = 64;
  int num_classes = 6;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Every learnable tensor of the pipeline: E, P and L.
struct ModelParams {
  EncoderParams encoder;
  ProjectionParams projection;
  ClassifierParams classifier;

  ModelConfig config() const;

  /// (name, tensor) in a fixed order: encoder.conv<i>.{weight,bias},
  /// projection.{w1,b1,w2,b2}, classifier.{w,b}.
  std::vector<std::pair<std::string, TensorD*>> named_tensors();
  std::vector<std::pair<std::string, const TensorD*>> named_tensors() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Fresh parameters from a stream derived from `seed`.
ModelParams model_init(const ModelConfig& config, std::uint64_t seed);

/// Same structure as `params`, all zeros.
ModelParams zeros_like(const ModelParams& params);

enum class Stage { kPretrain, kFinetune, kScratch, kCotrain };

std::string to_string(Stage stage);
Stage parse_stage(const std::string& name);

struct TrainConfig {
  Stage stage = Stage::kPretrain;
  int epochs = 50;
  int batch_size = 8;
  double lr = 3e-4;
  double weight_decay = 1e-4;
  double tau = 0.1;
  double lambda_cotrain = 1.0;
  PositiveMode positive_mode = PositiveMode::kAllPairs;
  bool include_self = false;
  ImageSize image_size;
  std::uint64_t seed = 0;
  /// Clusters per anatomy used later for retrieval; batch_size must exceed it.
  int kmeans_k = 4;

  /// Stage defaults: lr 3e-4 for pretrain/cotrain, 1e-4 for finetune/scratch.
  static TrainConfig defaults(Stage stage);

  /// Throws ConfigError (batch_size <= K, lr <= 0, epochs < 1, tau <= 0, ...).
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ModelParams params;
  TrainConfig train_config;
  int epoch = 0;
  std::string rng_state;
  std::vector<double> loss_history;  // mean step loss per epoch

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Contrastive pretraining of encoder + projection; the classifier is untouched.
Checkpoint pretrain(const TrainConfig& config, const DatasetManifest& dataset, const ModelParams& init);

/// Cross-entropy fine-tuning of encoder + projection + classifier.
Checkpoint finetune(const TrainConfig& config, const DatasetManifest& dataset, const Checkpoint& init);

/// Fresh init (seeded by config.seed) followed by the finetune path.
Checkpoint train_scratch(const TrainConfig& config, const DatasetManifest& dataset, const ModelConfig& model);

/// Single stage optimizing contrastive + lambda * cross-entropy.
Checkpoint cotrain(const TrainConfig& config, const DatasetManifest& dataset, const ModelParams& init);

/// Query/anchor image indices for each pretrain step of one epoch: every
/// image is a query exactly once (floor(n / m) steps); anchors come from an
/// independent shuffle and never repeat a query of the same step.
struct PairedBatch {
  std::vector<std::size_t> queries;
  std::vector<std::size_t> anchors;
};
std::vector<PairedBatch> pretrain_batches(std::size_t n, int batch_size, Rng& rng);

/// Loss and gradients of one step, without applying an update.
struct StepResult {
  double contrastive = 0.0;
  double cross_entropy = 0.0;
  double total = 0.0;
  ModelParams grads;
};
StepResult contrastive_step(const ModelParams& params, const DatasetManifest& dataset, const PairedBatch& batch,
                            const TrainConfig& config, double ce_weight, bool with_classifier);
StepResult finetune_step(const ModelParams& params, const DatasetManifest& dataset,
                         const std::vector<std::size_t>& images);

struct RegionPrediction {
  std::size_t sample = 0;
  int label = 0;
  VectorXd logits;
  int predicted = 0;
};

/// Classifier logits for every region of every sample (sample order, then label order).
std::vector<RegionPrediction> region_predictions(const ModelParams& params, const DatasetManifest& dataset);

struct ClassificationReport {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

ClassificationReport summarize_predictions(const std::vector<RegionPrediction>& predictions, int num_classes);

/// Region accuracy of argmax(classify(project(roi_pool(...)))).
ClassificationReport eval_classification(const ModelParams& params, const DatasetManifest& dataset);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace regionmir
