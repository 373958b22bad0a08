#include "regionmir/trainer.hpp"

#include <cmath>

namespace regionmir {

void ModelConfig::validate() const {
  encoder.validate();
  if (hidden_dim < 1 || embed_dim < 1) throw ConfigError("model: hidden_dim and embed_dim must be >= 1");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
}

ModelConfig ModelParams::config() const {
  return {encoder.config, projection.hidden_dim(), projection.out_dim(), int(classifier.num_classes())};
}

std::vector<std::pair<std::string, TensorD*>> ModelParams::named_tensors() {
  std::vector<std::pair<std::string, TensorD*>> out;
  for (std::size_t l = 0; l < encoder.kernels.size(); ++l) {
    out.emplace_back("encoder.conv" + std::to_string(l) + ".weight", &encoder.kernels[l]);
    out.emplace_back("encoder.conv" + std::to_string(l) + ".bias", &encoder.biases[l]);
  }
  out.emplace_back("projection.w1", &projection.w1);
  out.emplace_back("projection.b1", &projection.b1);
  out.emplace_back("projection.w2", &projection.w2);
  out.emplace_back("projection.b2", &projection.b2);
  out.emplace_back("classifier.w", &classifier.w);
  out.emplace_back("classifier.b", &classifier.b);
  return out;
}

std::vector<std::pair<std::string, const TensorD*>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, const TensorD*>> out;
  for (auto& [name, t] : const_cast<ModelParams*>(this)->named_tensors()) out.emplace_back(name, t);
  return out;
}

ModelParams model_init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng root(seed);
  Rng rng = root.split();
  ModelParams params;
  params.encoder = encoder_init(config.encoder, rng);
  params.projection = projection_init(config.encoder.out_channels(), config.hidden_dim, config.embed_dim, rng);
  params.classifier = classifier_init(config.embed_dim, config.num_classes, rng);
  return params;
}

ModelParams zeros_like(const ModelParams& params) {
  ModelParams out = params;
  for (auto& [name, t] : out.named_tensors()) t->set_zero();
  return out;
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::kPretrain: return "pretrain";
    case Stage::kFinetune: return "finetune";
    case Stage::kScratch: return "scratch";
    case Stage::kCotrain: return "cotrain";
  }
  return "unknown";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : {Stage::kPretrain, Stage::kFinetune, Stage::kScratch, Stage::kCotrain}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown stage '" + name + "'");
}

TrainConfig TrainConfig::defaults(Stage stage) {
  TrainConfig config;
  config.stage = stage;
  config.lr = (stage == Stage::kFinetune || stage == Stage::kScratch) ? 1e-4 : 3e-4;
  return config;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (kmeans_k < 1) throw ConfigError("kmeans K must be >= 1");
  if (batch_size <= kmeans_k) {
    throw ConfigError("batch_size (" + std::to_string(batch_size) + ") must exceed the number of K-means clusters (" +
                      std::to_string(kmeans_k) + ")");
  }
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (!(lambda_cotrain >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (image_size.height < 8 || image_size.width < 8) throw ConfigError("image_size must be at least 8x8");
}

namespace {

/// Adam state per named tensor, updating only tensors whose name starts with
/// one of the given prefixes.
class Optimizer {
 public:
  explicit Optimizer(double weight_decay) : weight_decay_(weight_decay) {}

  void step(ModelParams& params, const ModelParams& grads, double lr, const std::vector<std::string>& prefixes) {
    const auto grad_tensors = grads.named_tensors();
    auto tensors = params.named_tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& [name, tensor] = tensors[i];
      bool selected = false;
      for (const auto& prefix : prefixes) selected = selected || name.rfind(prefix, 0) == 0;
      if (!selected) continue;
      auto [it, inserted] = states_.try_emplace(name, tensor->shape(), weight_decay_);
      adam_step(*tensor, *grad_tensors[i].second, it->second, lr);
    }
  }

 private:
  double weight_decay_;
  std::map<std::string, AdamState> states_;
};

const std::vector<std::string> kEmbeddingGroups = {"encoder.", "projection."};
const std::vector<std::string> kAllGroups = {"encoder.", "projection.", "classifier."};

struct ImageForward {
  std::size_t sample;
  EncoderCache cache;
  FeatureMap fmap;
};

struct RegionForward {
  std::size_t image;  // index into the step's ImageForward list
  BoundingBox box;
  ProjectionCache cache;
  VectorXd z;
  VectorXd z_norm;
  Side side = Side::kQuery;
  int slot = 0;
};

struct ForwardPass {
  std::vector<ImageForward> images;
  std::vector<RegionForward> regions;
};

void forward_image(const ModelParams& params, const DatasetManifest& dataset, std::size_t sample, Side side, int slot,
                   ForwardPass& pass) {
  ImageForward img{sample, {}, {}};
  img.fmap = encoder_forward(params.encoder, image_tensor(dataset.samples[sample].pixels), &img.cache);
  const std::size_t image_index = pass.images.size();
  for (const auto& box : sorted_boxes(dataset.samples[sample].boxes)) {
    RegionForward region;
    region.image = image_index;
    region.box = box;
    region.side = side;
    region.slot = slot;
    auto proj = project(params.projection, roi_pool(img.fmap, box), &region.cache);
    region.z = std::move(proj.z);
    region.z_norm = std::move(proj.z_norm);
    pass.regions.push_back(std::move(region));
  }
  pass.images.push_back(std::move(img));
}

/// Backpropagate per-region dL/dz into `grads` (encoder + projection), in
/// region order then image order.
void backprop_regions(const ModelParams& params, const ForwardPass& pass, const std::vector<VectorXd>& grad_z,
                      ModelParams& grads) {
  ProjectionGrads proj_grads(params.projection);
  std::vector<TensorD> grad_maps;
  grad_maps.reserve(pass.images.size());
  for (const auto& img : pass.images) grad_maps.emplace_back(img.fmap.data.shape());

  for (std::size_t r = 0; r < pass.regions.size(); ++r) {
    const auto& region = pass.regions[r];
    const VectorXd grad_pooled = project_backward(params.projection, region.cache, grad_z[r], proj_grads);
    roi_pool_backward_accumulate(grad_maps[region.image], pass.images[region.image].fmap.downsample_factor,
                                 region.box, grad_pooled);
  }
  grads.projection.w1.flat() += proj_grads.w1.flat();
  grads.projection.b1.flat() += proj_grads.b1.flat();
  grads.projection.w2.flat() += proj_grads.w2.flat();
  grads.projection.b2.flat() += proj_grads.b2.flat();

  for (std::size_t i = 0; i < pass.images.size(); ++i) {
    const EncoderGrads eg = encoder_backward(params.encoder, pass.images[i].cache, grad_maps[i]);
    for (std::size_t l = 0; l < eg.kernels.size(); ++l) {
      grads.encoder.kernels[l].flat() += eg.kernels[l].flat();
      grads.encoder.biases[l].flat() += eg.biases[l].flat();
    }
  }
}

/// Cross-entropy over every region of the pass; adds ce_weight * dCE/dz to
/// grad_z and accumulates classifier gradients.
double classification_terms(const ModelParams& params, const ForwardPass& pass, double ce_weight,
                            std::vector<VectorXd>& grad_z, ModelParams& grads) {
  std::vector<LabeledLogits> batch;
  batch.reserve(pass.regions.size());
  for (const auto& region : pass.regions) batch.push_back({classify(params.classifier, region.z), region.box.label});
  const LossResult ce = cross_entropy_loss(batch);
  ClassifierGrads cls_grads(params.classifier);
  for (std::size_t r = 0; r < pass.regions.size(); ++r) {
    const VectorXd weighted = ce_weight * ce.grads[r];
    grad_z[r] += classify_backward(params.classifier, pass.regions[r].z, weighted, cls_grads);
  }
  grads.classifier.w.flat() += cls_grads.w.flat();
  grads.classifier.b.flat() += cls_grads.b.flat();
  return ce.loss;
}

void check_dataset(const TrainConfig& config, const DatasetManifest& dataset, const ModelParams& params) {
  validate_manifest(dataset);
  if (!(dataset.image_size == config.image_size)) {
    throw ConfigError("dataset image size " + std::to_string(dataset.image_size.height) + "x" +
                      std::to_string(dataset.image_size.width) + " does not match config " +
                      std::to_string(config.image_size.height) + "x" + std::to_string(config.image_size.width));
  }
  params.encoder.config.check_input(dataset.image_size.height, dataset.image_size.width);
  if (params.classifier.num_classes() != dataset.num_classes) {
    throw ConfigError("classifier has " + std::to_string(params.classifier.num_classes()) +
                      " classes, dataset has " + std::to_string(dataset.num_classes));
  }
}

double mean(const std::vector<double>& values) {
  double sum = 0.0;
  for (double v : values) sum += v;
  return values.empty() ? 0.0 : sum / double(values.size());
}

/// Shared loop of pretrain and cotrain.
Checkpoint paired_training(const TrainConfig& config, const DatasetManifest& dataset, const ModelParams& init,
                           bool with_classifier) {
  config.validate();
  check_dataset(config, dataset, init);
  Rng rng(config.seed);
  Optimizer optimizer(config.weight_decay);
  Checkpoint ckpt;
  ckpt.params = init;
  ckpt.train_config = config;
  const double ce_weight = with_classifier ? config.lambda_cotrain : 0.0;
  const auto& groups = with_classifier ? kAllGroups : kEmbeddingGroups;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<double> losses;
    for (const auto& batch : pretrain_batches(dataset.size(), config.batch_size, rng)) {
      const StepResult step = contrastive_step(ckpt.params, dataset, batch, config, ce_weight, with_classifier);
      if (!std::isfinite(step.total)) throw Error("training diverged: non-finite loss");
      optimizer.step(ckpt.params, step.grads, config.lr, groups);
      losses.push_back(step.total);
    }
    ckpt.loss_history.push_back(mean(losses));
    ckpt.epoch = epoch + 1;
  }
  ckpt.rng_state = rng.state();
  return ckpt;
}

}  // namespace

std::vector<PairedBatch> pretrain_batches(std::size_t n, int batch_size, Rng& rng) {
  const std::size_t m = std::size_t(batch_size);
  if (n < 2 * m) {
    throw InsufficientDataError("pretraining needs at least 2 x batch_size = " + std::to_string(2 * m) +
                                " images, dataset has " + std::to_string(n));
  }
  // Queries partition one shuffle; anchors walk a second shuffle cyclically,
  // skipping the step's own queries so no image is drawn twice in a step.
  const auto perm = rng.permutation(n);
  const auto anchor_order = rng.permutation(n);
  std::vector<PairedBatch> batches(n / m);
  std::vector<char> is_query(n, 0);
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < batches.size(); ++s) {
    auto& b = batches[s];
    b.queries.assign(perm.begin() + long(m * s), perm.begin() + long(m * (s + 1)));
    for (auto q : b.queries) is_query[q] = 1;
    while (b.anchors.size() < m) {
      const std::size_t candidate = anchor_order[cursor];
      cursor = (cursor + 1) % n;
      if (!is_query[candidate]) b.anchors.push_back(candidate);
    }
    for (auto q : b.queries) is_query[q] = 0;
  }
  return batches;
}

StepResult contrastive_step(const ModelParams& params, const DatasetManifest& dataset, const PairedBatch& batch,
                            const TrainConfig& config, double ce_weight, bool with_classifier) {
  ForwardPass pass;
  for (std::size_t i = 0; i < batch.queries.size(); ++i) {
    forward_image(params, dataset, batch.queries[i], Side::kQuery, int(i), pass);
  }
  for (std::size_t i = 0; i < batch.anchors.size(); ++i) {
    forward_image(params, dataset, batch.anchors[i], Side::kAnchor, int(i), pass);
  }

  ContrastiveBatch cb;
  cb.tau = config.tau;
  cb.positive_mode = config.positive_mode;
  cb.include_self = config.include_self;
  cb.embeddings.reserve(pass.regions.size());
  for (const auto& region : pass.regions) cb.embeddings.push_back({region.side, region.slot, region.box.label, region.z_norm});
  const LossResult contrastive = region_contrastive_loss(cb);

  StepResult out;
  out.grads = zeros_like(params);
  out.contrastive = contrastive.loss;
  std::vector<VectorXd> grad_z(pass.regions.size());
  for (std::size_t r = 0; r < pass.regions.size(); ++r) {
    grad_z[r] = l2_normalize_backward(pass.regions[r].z, contrastive.grads[r]);
  }
  if (with_classifier) out.cross_entropy = classification_terms(params, pass, ce_weight, grad_z, out.grads);
  out.total = with_classifier ? cotrain_loss(out.contrastive, out.cross_entropy, ce_weight) : out.contrastive;
  backprop_regions(params, pass, grad_z, out.grads);
  return out;
}

StepResult finetune_step(const ModelParams& params, const DatasetManifest& dataset,
                         const std::vector<std::size_t>& images) {
  ForwardPass pass;
  for (std::size_t i = 0; i < images.size(); ++i) forward_image(params, dataset, images[i], Side::kQuery, int(i), pass);
  StepResult out;
  out.grads = zeros_like(params);
  std::vector<VectorXd> grad_z(pass.regions.size(), VectorXd::Zero(params.projection.out_dim()));
  out.cross_entropy = classification_terms(params, pass, 1.0, grad_z, out.grads);
  out.total = out.cross_entropy;
  backprop_regions(params, pass, grad_z, out.grads);
  return out;
}

Checkpoint pretrain(const TrainConfig& config, const DatasetManifest& dataset, const ModelParams& init) {
  if (config.stage != Stage::kPretrain) throw ConfigError("pretrain called with stage " + to_string(config.stage));
  return paired_training(config, dataset, init, false);
}

Checkpoint cotrain(const TrainConfig& config, const DatasetManifest& dataset, const ModelParams& init) {
  if (config.stage != Stage::kCotrain) throw ConfigError("cotrain called with stage " + to_string(config.stage));
  return paired_training(config, dataset, init, true);
}

Checkpoint finetune(const TrainConfig& config, const DatasetManifest& dataset, const Checkpoint& init) {
  if (config.stage != Stage::kFinetune && config.stage != Stage::kScratch) {
    throw ConfigError("finetune called with stage " + to_string(config.stage));
  }
  config.validate();
  check_dataset(config, dataset, init.params);
  const std::size_t m = std::size_t(config.batch_size);
  if (dataset.size() < m) {
    throw InsufficientDataError("finetuning needs at least batch_size = " + std::to_string(m) + " images, dataset has " +
                                std::to_string(dataset.size()));
  }
  Rng rng(config.seed);
  Optimizer optimizer(config.weight_decay);
  Checkpoint ckpt;
  ckpt.params = init.params;
  ckpt.train_config = config;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto perm = rng.permutation(dataset.size());
    std::vector<double> losses;
    for (std::size_t s = 0; s + m <= perm.size(); s += m) {
      const std::vector<std::size_t> images(perm.begin() + long(s), perm.begin() + long(s + m));
      const StepResult step = finetune_step(ckpt.params, dataset, images);
      if (!std::isfinite(step.total)) throw Error("training diverged: non-finite loss");
      optimizer.step(ckpt.params, step.grads, config.lr, kAllGroups);
      losses.push_back(step.total);
    }
    ckpt.loss_history.push_back(mean(losses));
    ckpt.epoch = epoch + 1;
  }
  ckpt.rng_state = rng.state();
  return ckpt;
}

Checkpoint train_scratch(const TrainConfig& config, const DatasetManifest& dataset, const ModelConfig& model) {
  Checkpoint init;
  init.params = model_init(model, config.seed);
  return finetune(config, dataset, init);
}

std::vector<RegionPrediction> region_predictions(const ModelParams& params, const DatasetManifest& dataset) {
  std::vector<RegionPrediction> out;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    for (auto& emb : embed_regions(params.encoder, params.projection, dataset.samples[i])) {
      VectorXd logits = classify(params.classifier, emb.z);
      const int predicted = predict(logits);
      out.push_back({i, emb.label, std::move(logits), predicted});
    }
  }
  return out;
}

ClassificationReport summarize_predictions(const std::vector<RegionPrediction>& predictions, int num_classes) {
  ClassificationReport report;
  report.confusion.assign(std::size_t(num_classes), std::vector<std::size_t>(std::size_t(num_classes), 0));
  for (const auto& p : predictions) {
    if (p.label < 0 || p.label >= num_classes || p.predicted < 0 || p.predicted >= num_classes) {
      throw ParameterError("prediction label out of range");
    }
    report.confusion[std::size_t(p.label)][std::size_t(p.predicted)] += 1;
    report.correct += p.label == p.predicted ? 1 : 0;
    report.total += 1;
  }
  report.accuracy = report.total ? double(report.correct) / double(report.total) : 0.0;
  return report;
}

ClassificationReport eval_classification(const ModelParams& params, const DatasetManifest& dataset) {
  if (dataset.samples.empty()) throw ParameterError("eval_classification: empty split");
  const auto predictions = region_predictions(params, dataset);
  if (predictions.empty()) throw ParameterError("eval_classification: split has no annotated regions");
  return summarize_predictions(predictions, int(params.classifier.num_classes()));
}

}  // namespace regionmir
