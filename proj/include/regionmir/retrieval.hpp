#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "regionmir/dataset.hpp"
#include "regionmir/rng.hpp"
#include "regionmir/tensor.hpp"
#include "regionmir/trainer.hpp"

namespace regionmir {

// ---------------------------------------------------------------------------
// Embedding database
// ---------------------------------------------------------------------------

struct DbRecord {
  std::string image_id;
  int label = 0;
  VectorXf z;  // unit norm

  friend bool operator==(const DbRecord& a, const DbRecord& b) {
    return a.image_id == b.image_id && a.label == b.label && a.z.size() == b.z.size() && a.z == b.z;
  }
};

/// Precomputed region embeddings of the training split, stored as f32.
class EmbeddingDB {
 public:
  EmbeddingDB() = default;
  explicit EmbeddingDB(Index dim) : dim_(dim) {}

  void add(DbRecord record);

  Index dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  const std::vector<DbRecord>& records() const noexcept { return records_; }
  const DbRecord& operator[](std::size_t i) const { return records_[i]; }

  /// Labels present, ascending.
  std::vector<int> labels() const;
  /// Record indices carrying `label`, ascending.
  const std::vector<std::uint32_t>& members(int label) const;

  friend bool operator==(const EmbeddingDB& a, const EmbeddingDB& b) {
    return a.dim_ == b.dim_ && a.records_ == b.records_;
  }

 private:
  Index dim_ = 0;
  std::vector<DbRecord> records_;
  std::vector<std::vector<std::uint32_t>> by_label_;
};

/// embed_regions over every sample (sample order, then label order).
EmbeddingDB build_db(const ModelParams& params, const DatasetManifest& split);

inline constexpr std::uint32_t kDbVersion = 1;
std::string encode_db(const EmbeddingDB& db);
EmbeddingDB decode_db(const std::string& bytes);
void save_db(const EmbeddingDB& db, const std::filesystem::path& path);
EmbeddingDB load_db(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

struct KMeansResult {
  std::vector<VectorXf> centroids;
  std::vector<std::uint32_t> assignment;  // per point, centroid id
  double inertia = 0.0;                   // against the stored f32 centroids
  std::vector<double> inertia_history;    // after each Lloyd assignment step
  std::vector<bool> empty;                // centroid had no members
  int requested_k = 0;
  int iterations = 0;

  int k() const { return int(centroids.size()); }
  bool reduced() const { return k() < requested_k; }
};

inline constexpr int kKMeansRestarts = 10;

/// k-means++ seeding, then Lloyd until the assignment stops changing or
/// max_iters; the lowest-inertia of kKMeansRestarts seedings is kept, with its
/// own inertia history. Ties go to the lowest centroid id. K is reduced to the
/// point count when there are fewer points than K.
KMeansResult kmeans_fit(const std::vector<VectorXf>& points, int k, Rng& rng, int max_iters = 100);

/// Index of the nearest centroid (squared Euclidean, lowest id on ties).
std::uint32_t nearest_centroid(const VectorXf& point, const std::vector<VectorXf>& centroids);

double squared_distance(const VectorXf& a, const VectorXf& b);

// ---------------------------------------------------------------------------
// Per-anatomy index
// ---------------------------------------------------------------------------

struct AnatomyModel {
  int label = 0;
  int requested_k = 0;
  double inertia = 0.0;
  std::vector<VectorXf> centroids;
  std::vector<std::vector<std::uint32_t>> members;  // DB record indices per centroid

  int k() const { return int(centroids.size()); }
  bool reduced() const { return k() < requested_k; }
  std::size_t record_count() const;

  friend bool operator==(const AnatomyModel& a, const AnatomyModel& b);
};

class AnatomyIndex {
 public:
  AnatomyIndex() = default;
  AnatomyIndex(Index dim, std::vector<AnatomyModel> models);

  Index dim() const noexcept { return dim_; }
  const std::vector<AnatomyModel>& models() const noexcept { return models_; }
  /// nullptr when the label has no model.
  const AnatomyModel* find(int label) const;

  friend bool operator==(const AnatomyIndex&, const AnatomyIndex&) = default;

 private:
  Index dim_ = 0;
  std::vector<AnatomyModel> models_;  // ascending label
};

/// One kmeans_fit per label present in the DB, in ascending label order.
AnatomyIndex build_index(const EmbeddingDB& db, int k, Rng& rng, int max_iters = 100);

inline constexpr std::uint32_t kIndexVersion = 1;
std::string encode_index(const AnatomyIndex& index);
AnatomyIndex decode_index(const std::string& bytes);
void save_index(const AnatomyIndex& index, const std::filesystem::path& path);
AnatomyIndex load_index(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Queries
// ---------------------------------------------------------------------------

struct Hit {
  std::uint32_t record = 0;
  std::string image_id;
  int label = 0;
  double similarity = 0.0;
};

struct QueryResult {
  std::vector<Hit> hits;  // similarity non-increasing
  std::size_t candidates_evaluated = 0;
  int pseudo_label = -1;
};

enum class LabelSource { kClassifier, kGiven };

/// Embedding and classifier output for one query region.
struct QueryEmbedding {
  VectorXf z;  // unit norm, f32 like the DB
  int predicted_label = 0;
};

QueryEmbedding embed_query(const ModelParams& params, const AnnotatedImage& image, const BoundingBox& box);

/// Centroid ranking, then member ranking inside the best cluster, spilling
/// into the next-best clusters until k hits or the anatomy is exhausted.
QueryResult search_hierarchical(const AnatomyIndex& index, const EmbeddingDB& db, const VectorXf& query, int label,
                                std::size_t k);

/// Exact top-k over all records (or only those with `restrict_label`).
QueryResult search_bruteforce(const EmbeddingDB& db, const VectorXf& query, std::size_t k,
                              std::optional<int> restrict_label = std::nullopt);

QueryResult query_hierarchical(const AnatomyIndex& index, const EmbeddingDB& db, const ModelParams& params,
                               const AnnotatedImage& image, const BoundingBox& box, std::size_t k,
                               LabelSource label_source);

QueryResult query_bruteforce(const EmbeddingDB& db, const ModelParams& params, const AnnotatedImage& image,
                             const BoundingBox& box, std::size_t k, std::optional<int> restrict_label = std::nullopt);

/// Fraction of returned hits whose label equals `true_label`.
double precision_at_k(const QueryResult& result, int true_label);

/// |A ∩ B| / max(|A|, |B|) over returned record ids.
double overlap_fraction(const QueryResult& a, const QueryResult& b);

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

struct LabeledVector {
  int label = 0;
  VectorXd z;
};

/// c×c mean pairwise cosine similarity between anatomy groups. Off-diagonal
/// entries average every cross pair; diagonal entries average distinct
/// unordered pairs and are absent for classes with fewer than two vectors.
std::vector<std::vector<std::optional<double>>> similarity_matrix(const std::vector<LabeledVector>& embeddings,
                                                                  int num_classes);

std::vector<LabeledVector> db_vectors(const EmbeddingDB& db);

}  // namespace regionmir
