#include "regionmir/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "regionmir/binary_io.hpp"
#include "regionmir/numerics.hpp"

namespace regionmir {

namespace {

constexpr std::string_view kDbMagic = "RMDB";
constexpr std::string_view kIndexMagic = "RMIX";

/// Cosine similarity that ranks a degenerate centroid last instead of throwing.
double safe_cosine(const VectorXf& a, const VectorXf& b) {
  if (!(double(a.norm()) > kDegenerateEps) || !(double(b.norm()) > kDegenerateEps)) return -2.0;
  return cosine_similarity(a, b);
}

void sort_hits(std::vector<Hit>& hits) {
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.record < b.record;
  });
}

Hit make_hit(const EmbeddingDB& db, std::uint32_t record, double similarity) {
  if (record >= db.size()) throw FormatError("index refers to record " + std::to_string(record) + " beyond the database");
  return {record, db[record].image_id, db[record].label, similarity};
}

}  // namespace

// ---------------------------------------------------------------------------
// EmbeddingDB
// ---------------------------------------------------------------------------

void EmbeddingDB::add(DbRecord record) {
  if (record.z.size() != dim_) {
    throw DimensionError("EmbeddingDB: record length " + std::to_string(record.z.size()) + ", expected " +
                         std::to_string(dim_));
  }
  if (record.label < 0 || record.label > 0xFFFF) throw ParameterError("EmbeddingDB: label out of range");
  if (std::abs(double(record.z.norm()) - 1.0) > 1e-5) throw ParameterError("EmbeddingDB: record is not unit-norm");
  if (std::size_t(record.label) >= by_label_.size()) by_label_.resize(std::size_t(record.label) + 1);
  by_label_[std::size_t(record.label)].push_back(std::uint32_t(records_.size()));
  records_.push_back(std::move(record));
}

std::vector<int> EmbeddingDB::labels() const {
  std::vector<int> out;
  for (std::size_t l = 0; l < by_label_.size(); ++l) {
    if (!by_label_[l].empty()) out.push_back(int(l));
  }
  return out;
}

const std::vector<std::uint32_t>& EmbeddingDB::members(int label) const {
  static const std::vector<std::uint32_t> kNone;
  if (label < 0 || std::size_t(label) >= by_label_.size()) return kNone;
  return by_label_[std::size_t(label)];
}

EmbeddingDB build_db(const ModelParams& params, const DatasetManifest& split) {
  if (split.samples.empty()) throw ParameterError("build_db: empty split");
  EmbeddingDB db(params.projection.out_dim());
  for (const auto& sample : split.samples) {
    for (const auto& emb : embed_regions(params.encoder, params.projection, sample)) {
      db.add({emb.image_id, emb.label, emb.z_norm.cast<float>()});
    }
  }
  return db;
}

std::string encode_db(const EmbeddingDB& db) {
  ByteWriter w;
  w.bytes(kDbMagic);
  w.u32(kDbVersion);
  w.u32(std::uint32_t(db.dim()));
  w.u32(std::uint32_t(db.size()));
  for (const auto& record : db.records()) {
    w.string(record.image_id);
    w.u16(std::uint16_t(record.label));
    for (Index i = 0; i < record.z.size(); ++i) w.f32(record.z[i]);
  }
  return w.take();
}

EmbeddingDB decode_db(const std::string& bytes) {
  ByteReader r(bytes, "embedding db");
  r.expect_magic(kDbMagic);
  const std::uint32_t version = r.u32();
  if (version != kDbVersion) throw VersionError("embedding db: unsupported version " + std::to_string(version));
  const std::uint32_t dim = r.u32();
  const std::uint32_t count = r.u32();
  EmbeddingDB db(dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    DbRecord record;
    record.image_id = r.string();
    record.label = r.u16();
    record.z.resize(dim);
    for (std::uint32_t j = 0; j < dim; ++j) record.z[j] = r.f32();
    try {
      db.add(std::move(record));
    } catch (const Error& e) {
      throw FormatError(std::string("embedding db: invalid record: ") + e.what());
    }
  }
  if (!r.done()) throw FormatError("embedding db: trailing bytes");
  return db;
}

void save_db(const EmbeddingDB& db, const std::filesystem::path& path) { write_binary_file(path, encode_db(db)); }
EmbeddingDB load_db(const std::filesystem::path& path) { return decode_db(read_binary_file(path)); }

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

double squared_distance(const VectorXf& a, const VectorXf& b) {
  return (a.cast<double>() - b.cast<double>()).squaredNorm();
}

std::uint32_t nearest_centroid(const VectorXf& point, const std::vector<VectorXf>& centroids) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = squared_distance(point, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = std::uint32_t(c);
    }
  }
  return best;
}

KMeansResult kmeans_fit(const std::vector<VectorXf>& points, int k, Rng& rng, int max_iters) {
  if (points.empty()) throw ParameterError("kmeans_fit: empty point set");
  if (k < 1) throw ParameterError("kmeans_fit: K must be >= 1");
  if (max_iters < 1) throw ParameterError("kmeans_fit: max_iters must be >= 1");
  const std::size_t n = points.size();
  const Index dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw DimensionError("kmeans_fit: points differ in dimension");
  }
  const std::size_t kk = std::min<std::size_t>(std::size_t(k), n);

  std::vector<VectorXd> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = points[i].cast<double>();

  // One k-means++ seeding followed by Lloyd iterations.
  struct Run {
    std::vector<VectorXd> centroids;
    std::vector<double> history;
    int iterations = 0;
  };
  auto lloyd = [&] {
    Run run;
    auto& centroids = run.centroids;
    std::vector<bool> chosen(n, false);
    const std::size_t first = std::size_t(rng.below(n));
    centroids.push_back(x[first]);
    chosen[first] = true;
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = (x[i] - centroids[0]).squaredNorm();
    while (centroids.size() < kk) {
      double total = 0.0;
      for (double d : d2) total += d;
      std::size_t pick = n;
      if (total > 0.0) {
        const double target = rng.uniform() * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (d2[i] <= 0.0) continue;
          acc += d2[i];
          pick = i;
          if (acc > target) break;
        }
      } else {
        for (std::size_t i = 0; i < n && pick == n; ++i) {
          if (!chosen[i]) pick = i;
        }
      }
      chosen[pick] = true;
      centroids.push_back(x[pick]);
      for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], (x[i] - centroids.back()).squaredNorm());
    }

    std::vector<std::uint32_t> assignment(n, 0), previous;
    auto assign = [&] {
      double inertia = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < kk; ++c) {
          const double d = (x[i] - centroids[c]).squaredNorm();
          if (d < best) {
            best = d;
            assignment[i] = std::uint32_t(c);
          }
        }
        inertia += best;
      }
      return inertia;
    };

    for (int iter = 0; iter < max_iters; ++iter) {
      run.history.push_back(assign());
      if (iter > 0 && assignment == previous) break;
      previous = assignment;
      std::vector<VectorXd> sums(kk, VectorXd::Zero(dim));
      std::vector<std::size_t> counts(kk, 0);
      for (std::size_t i = 0; i < n; ++i) {
        sums[assignment[i]] += x[i];
        counts[assignment[i]] += 1;
      }
      for (std::size_t c = 0; c < kk; ++c) {
        if (counts[c] > 0) centroids[c] = sums[c] / double(counts[c]);
      }
      run.iterations = iter + 1;
    }
    run.history.push_back(assign());
    return run;
  };

  // Lloyd only finds a local optimum; keep the best of several seedings
  // (first wins on equal inertia).
  Run best = lloyd();
  for (int r = 1; r < kKMeansRestarts; ++r) {
    Run run = lloyd();
    if (run.history.back() < best.history.back()) best = std::move(run);
  }
  const auto& centroids = best.centroids;

  KMeansResult result;
  result.requested_k = k;
  result.iterations = best.iterations;
  result.inertia_history = std::move(best.history);
  result.inertia_history.pop_back();

  // Store f32 centroids and make the assignment exact against them.
  result.centroids.reserve(kk);
  for (const auto& c : centroids) result.centroids.push_back(c.cast<float>());
  result.assignment.resize(n);
  result.empty.assign(kk, true);
  result.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t c = nearest_centroid(points[i], result.centroids);
    result.assignment[i] = c;
    result.empty[c] = false;
    result.inertia += squared_distance(points[i], result.centroids[c]);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Index
// ---------------------------------------------------------------------------

std::size_t AnatomyModel::record_count() const {
  std::size_t n = 0;
  for (const auto& m : members) n += m.size();
  return n;
}

bool operator==(const AnatomyModel& a, const AnatomyModel& b) {
  if (a.label != b.label || a.requested_k != b.requested_k || a.inertia != b.inertia || a.members != b.members ||
      a.centroids.size() != b.centroids.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.centroids.size(); ++i) {
    if (a.centroids[i].size() != b.centroids[i].size() || a.centroids[i] != b.centroids[i]) return false;
  }
  return true;
}

AnatomyIndex::AnatomyIndex(Index dim, std::vector<AnatomyModel> models) : dim_(dim), models_(std::move(models)) {
  std::sort(models_.begin(), models_.end(), [](const auto& a, const auto& b) { return a.label < b.label; });
}

const AnatomyModel* AnatomyIndex::find(int label) const {
  for (const auto& m : models_) {
    if (m.label == label) return &m;
  }
  return nullptr;
}

AnatomyIndex build_index(const EmbeddingDB& db, int k, Rng& rng, int max_iters) {
  if (db.empty()) throw ParameterError("build_index: empty database");
  std::vector<AnatomyModel> models;
  for (int label : db.labels()) {
    const auto& ids = db.members(label);
    std::vector<VectorXf> points;
    points.reserve(ids.size());
    for (auto id : ids) points.push_back(db[id].z);
    const KMeansResult fit = kmeans_fit(points, k, rng, max_iters);
    AnatomyModel model;
    model.label = label;
    model.requested_k = k;
    model.inertia = fit.inertia;
    model.centroids = fit.centroids;
    model.members.assign(fit.centroids.size(), {});
    for (std::size_t i = 0; i < ids.size(); ++i) model.members[fit.assignment[i]].push_back(ids[i]);
    models.push_back(std::move(model));
  }
  return AnatomyIndex(db.dim(), std::move(models));
}

std::string encode_index(const AnatomyIndex& index) {
  ByteWriter w;
  w.bytes(kIndexMagic);
  w.u32(kIndexVersion);
  w.u32(std::uint32_t(index.dim()));
  w.u32(std::uint32_t(index.models().size()));
  for (const auto& model : index.models()) {
    w.u32(std::uint32_t(model.label));
    w.u32(std::uint32_t(model.requested_k));
    w.u32(std::uint32_t(model.k()));
    w.f64(model.inertia);
    for (const auto& c : model.centroids) {
      for (Index i = 0; i < c.size(); ++i) w.f32(c[i]);
    }
    for (const auto& members : model.members) {
      w.u32(std::uint32_t(members.size()));
      for (auto id : members) w.u32(id);
    }
  }
  return w.take();
}

AnatomyIndex decode_index(const std::string& bytes) {
  ByteReader r(bytes, "anatomy index");
  r.expect_magic(kIndexMagic);
  const std::uint32_t version = r.u32();
  if (version != kIndexVersion) throw VersionError("anatomy index: unsupported version " + std::to_string(version));
  const std::uint32_t dim = r.u32();
  const std::uint32_t count = r.u32();
  std::vector<AnatomyModel> models;
  std::set<int> seen;
  for (std::uint32_t m = 0; m < count; ++m) {
    AnatomyModel model;
    model.label = int(r.u32());
    model.requested_k = int(r.u32());
    const std::uint32_t k = r.u32();
    if (k == 0) throw FormatError("anatomy index: model with zero centroids");
    if (!seen.insert(model.label).second) throw FormatError("anatomy index: duplicate label block");
    model.inertia = r.f64();
    model.centroids.assign(k, VectorXf(dim));
    for (auto& c : model.centroids) {
      for (std::uint32_t i = 0; i < dim; ++i) c[i] = r.f32();
    }
    model.members.resize(k);
    for (auto& members : model.members) {
      members.resize(r.u32());
      for (auto& id : members) id = r.u32();
    }
    models.push_back(std::move(model));
  }
  if (!r.done()) throw FormatError("anatomy index: trailing bytes");
  return AnatomyIndex(dim, std::move(models));
}

void save_index(const AnatomyIndex& index, const std::filesystem::path& path) {
  write_binary_file(path, encode_index(index));
}
AnatomyIndex load_index(const std::filesystem::path& path) { return decode_index(read_binary_file(path)); }

// ---------------------------------------------------------------------------
// Queries
// ---------------------------------------------------------------------------

QueryEmbedding embed_query(const ModelParams& params, const AnnotatedImage& image, const BoundingBox& box) {
  if (!box.fits(image.height(), image.width())) throw ParameterError("query box is outside the query image");
  const FeatureMap fmap = encoder_forward(params.encoder, image_tensor(image.pixels));
  const Projection proj = project(params.projection, roi_pool(fmap, box));
  return {proj.z_norm.cast<float>(), predict(classify(params.classifier, proj.z))};
}

QueryResult search_hierarchical(const AnatomyIndex& index, const EmbeddingDB& db, const VectorXf& query, int label,
                                std::size_t k) {
  const AnatomyModel* model = index.find(label);
  if (!model) {
    throw UnknownAnatomyError(label, "no K-means model for anatomy label " + std::to_string(label));
  }
  if (query.size() != index.dim() || db.dim() != index.dim()) {
    throw DimensionError("search_hierarchical: query, index and database dimensions differ");
  }
  QueryResult result;
  result.pseudo_label = label;

  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t c = 0; c < model->centroids.size(); ++c) ranked.emplace_back(safe_cosine(query, model->centroids[c]), c);
  result.candidates_evaluated += ranked.size();
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  std::vector<Hit> pool;
  for (const auto& [score, c] : ranked) {
    if (pool.size() >= k) break;
    for (auto id : model->members[c]) {
      pool.push_back(make_hit(db, id, cosine_similarity(query, db[id].z)));
    }
    result.candidates_evaluated += model->members[c].size();
  }
  sort_hits(pool);
  if (pool.size() > k) pool.resize(k);
  result.hits = std::move(pool);
  return result;
}

QueryResult search_bruteforce(const EmbeddingDB& db, const VectorXf& query, std::size_t k,
                              std::optional<int> restrict_label) {
  if (query.size() != db.dim()) throw DimensionError("search_bruteforce: query dimension differs from database");
  QueryResult result;
  result.pseudo_label = restrict_label.value_or(-1);
  std::vector<Hit> pool;
  for (std::size_t i = 0; i < db.size(); ++i) {
    if (restrict_label && db[i].label != *restrict_label) continue;
    pool.push_back(make_hit(db, std::uint32_t(i), cosine_similarity(query, db[i].z)));
  }
  result.candidates_evaluated = pool.size();
  sort_hits(pool);
  if (pool.size() > k) pool.resize(k);
  result.hits = std::move(pool);
  return result;
}

QueryResult query_hierarchical(const AnatomyIndex& index, const EmbeddingDB& db, const ModelParams& params,
                               const AnnotatedImage& image, const BoundingBox& box, std::size_t k,
                               LabelSource label_source) {
  const QueryEmbedding q = embed_query(params, image, box);
  const int label = label_source == LabelSource::kGiven ? box.label : q.predicted_label;
  return search_hierarchical(index, db, q.z, label, k);
}

QueryResult query_bruteforce(const EmbeddingDB& db, const ModelParams& params, const AnnotatedImage& image,
                             const BoundingBox& box, std::size_t k, std::optional<int> restrict_label) {
  return search_bruteforce(db, embed_query(params, image, box).z, k, restrict_label);
}

double precision_at_k(const QueryResult& result, int true_label) {
  if (result.hits.empty()) throw ParameterError("precision_at_k: empty result");
  std::size_t correct = 0;
  for (const auto& hit : result.hits) correct += hit.label == true_label ? 1 : 0;
  return double(correct) / double(result.hits.size());
}

double overlap_fraction(const QueryResult& a, const QueryResult& b) {
  const std::size_t denom = std::max(a.hits.size(), b.hits.size());
  if (denom == 0) return 1.0;
  std::set<std::uint32_t> ids;
  for (const auto& h : a.hits) ids.insert(h.record);
  std::size_t shared = 0;
  for (const auto& h : b.hits) shared += ids.count(h.record);
  return double(shared) / double(denom);
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

std::vector<std::vector<std::optional<double>>> similarity_matrix(const std::vector<LabeledVector>& embeddings,
                                                                  int num_classes) {
  if (num_classes < 1) throw ParameterError("similarity_matrix: num_classes must be >= 1");
  std::vector<std::vector<const VectorXd*>> groups(static_cast<std::size_t>(num_classes));
  for (const auto& e : embeddings) {
    if (e.label < 0 || e.label >= num_classes) throw ParameterError("similarity_matrix: label out of range");
    groups[std::size_t(e.label)].push_back(&e.z);
  }
  const std::size_t c = std::size_t(num_classes);
  std::vector<std::vector<std::optional<double>>> out(c, std::vector<std::optional<double>>(c));
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = i; j < c; ++j) {
      double sum = 0.0;
      std::size_t pairs = 0;
      if (i == j) {
        for (std::size_t a = 0; a < groups[i].size(); ++a) {
          for (std::size_t b = a + 1; b < groups[i].size(); ++b, ++pairs) {
            sum += cosine_similarity(*groups[i][a], *groups[i][b]);
          }
        }
      } else {
        for (const auto* a : groups[i]) {
          for (const auto* b : groups[j]) {
            sum += cosine_similarity(*a, *b);
            ++pairs;
          }
        }
      }
      if (pairs > 0) out[i][j] = out[j][i] = sum / double(pairs);
    }
  }
  return out;
}

std::vector<LabeledVector> db_vectors(const EmbeddingDB& db) {
  std::vector<LabeledVector> out;
  out.reserve(db.size());
  for (const auto& r : db.records()) out.push_back({r.label, r.z.cast<double>()});
  return out;
}

}  // namespace regionmir
