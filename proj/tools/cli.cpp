#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <thread>

#include "regionmir/errors.hpp"
#include "regionmir/retrieval.hpp"
#include "regionmir/trainer.hpp"

namespace regionmir::cli {

namespace fs = std::filesystem;

namespace {

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

void require_file(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing file: " + path.string());
}

void require_dataset(const fs::path& root) {
  require_file(root);
  require_file(root / "manifest.json");
}

// Which samples of a dataset a command sees.
struct SplitOptions {
  int holdout = 0;
  int folds = 0;
  int fold = 0;
  std::uint64_t split_seed = 0;
  std::string split = "all";

  void add(CLI::App& app) {
    app.add_option("--holdout", holdout, "Last N samples form the test split")->check(CLI::NonNegativeNumber);
    app.add_option("--folds", folds, "Number of cross-validation folds")->check(CLI::NonNegativeNumber);
    app.add_option("--fold", fold, "Fold id in [0, folds)")->check(CLI::NonNegativeNumber);
    app.add_option("--split-seed", split_seed, "Seed of the fold partition");
    app.add_option("--split", split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  }

  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> indices(std::size_t n) const {
    if (holdout > 0 && folds > 0) throw ConfigError("--holdout and --folds are exclusive");
    std::vector<std::size_t> train, test;
    if (folds > 0) {
      if (fold >= folds) throw ConfigError("--fold must be below --folds");
      Rng rng(split_seed);
      const auto parts = split_folds(n, folds, rng);
      return {parts[std::size_t(fold)].train, parts[std::size_t(fold)].test};
    }
    if (std::size_t(holdout) >= n && holdout > 0) throw ConfigError("--holdout leaves no training samples");
    for (std::size_t i = 0; i < n; ++i) (i + std::size_t(holdout) < n ? train : test).push_back(i);
    return {train, test};
  }

  DatasetManifest select(const DatasetManifest& ds) const {
    if (split == "all") {
      if (holdout > 0 || folds > 0) throw ConfigError("--split train|test is required with --holdout/--folds");
      return ds;
    }
    auto [train, test] = indices(ds.size());
    return ds.subset(split == "train" ? train : test);
  }
};

BoundingBox parse_box(const std::string& text) {
  BoundingBox box;
  if (std::sscanf(text.c_str(), "%d,%d,%d,%d,%d", &box.label, &box.x0, &box.y0, &box.x1, &box.y1) != 5) {
    throw ConfigError("--box expects label,x0,y0,x1,y1, got '" + text + "'");
  }
  return box;
}

void write_log(const Checkpoint& ck, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  for (std::size_t i = 0; i < ck.loss_history.size(); ++i) f << (i + 1) << '\t' << fixed(ck.loss_history[i], 10) << '\n';
  if (!f) throw IoError("cannot write " + path.string());
}

// Hyperparameters shared by train and the cross-validation driver.
struct TrainFlags {
  std::optional<int> epochs, batch_size, k;
  std::optional<double> lr, weight_decay, tau, lambda;
  std::optional<std::string> positive_mode;
  bool include_self = false;
  std::uint64_t seed = 0;
  int hidden = 128, embed = 64;

  void add(CLI::App& app) {
    app.add_option("--epochs", epochs)->check(CLI::PositiveNumber);
    app.add_option("--batch-size", batch_size)->check(CLI::PositiveNumber);
    app.add_option("--lr", lr);
    app.add_option("--weight-decay", weight_decay);
    app.add_option("--tau", tau);
    app.add_option("--lambda", lambda, "Cross-entropy weight for cotrain");
    app.add_option("--positive-mode", positive_mode)->check(CLI::IsMember({"paired", "all_pairs"}));
    app.add_flag("--include-self", include_self);
    app.add_option("--k", k, "K-means clusters per anatomy (batch size must exceed it)");
    app.add_option("--seed", seed);
    app.add_option("--hidden", hidden)->check(CLI::PositiveNumber);
    app.add_option("--embed", embed)->check(CLI::PositiveNumber);
  }

  TrainConfig config(Stage stage, const DatasetManifest& ds) const {
    auto c = TrainConfig::defaults(stage);
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (k) c.kmeans_k = *k;
    if (lr) c.lr = *lr;
    if (weight_decay) c.weight_decay = *weight_decay;
    if (tau) c.tau = *tau;
    if (lambda) c.lambda_cotrain = *lambda;
    if (positive_mode) c.positive_mode = *positive_mode == "paired" ? PositiveMode::kPaired : PositiveMode::kAllPairs;
    c.include_self = include_self;
    c.image_size = ds.image_size;
    c.seed = seed;
    c.validate();
    return c;
  }

  ModelConfig model(const DatasetManifest& ds) const {
    ModelConfig m;
    m.hidden_dim = hidden;
    m.embed_dim = embed;
    m.num_classes = ds.num_classes;
    m.validate();
    return m;
  }
};

// Runs one stage; `init` is required for finetune and optional for pretrain/cotrain.
Checkpoint run_stage(Stage stage, const TrainFlags& flags, const DatasetManifest& train,
                     const std::optional<Checkpoint>& init) {
  const auto config = flags.config(stage, train);
  const auto start = [&] { return init ? init->params : model_init(flags.model(train), flags.seed); };
  switch (stage) {
    case Stage::kPretrain: return pretrain(config, train, start());
    case Stage::kCotrain: return cotrain(config, train, start());
    case Stage::kScratch: return train_scratch(config, train, flags.model(train));
    case Stage::kFinetune:
      if (!init) throw ConfigError("--stage finetune requires --init");
      return finetune(config, train, *init);
  }
  throw ConfigError("unknown stage");
}

struct QueryStats {
  double precision = 0.0;
  double overlap = 0.0;
  double candidates = 0.0;
  double brute_candidates = 0.0;
  std::size_t queries = 0;
  std::size_t pseudo_correct = 0;
};

// Every region of `split` (up to `limit`) as a query with classifier pseudo labels.
QueryStats query_stats(const AnatomyIndex& index, const EmbeddingDB& db, const ModelParams& params,
                       const DatasetManifest& split, std::size_t k, std::size_t limit) {
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t s = 0; s < split.size(); ++s)
    for (std::size_t b = 0; b < split.samples[s].boxes.size(); ++b) jobs.emplace_back(s, b);
  if (limit > 0 && jobs.size() > limit) jobs.resize(limit);
  if (jobs.empty()) throw ParameterError("no query regions in the split");

  struct Row {
    double precision = 0, overlap = 0, candidates = 0, brute = 0;
    bool pseudo_ok = false;
  };
  std::vector<Row> rows(jobs.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t j = begin; j < jobs.size(); j += stride) {
      const auto& sample = split.samples[jobs[j].first];
      const auto& box = sample.boxes[jobs[j].second];
      const auto q = embed_query(params, sample, box);
      auto& row = rows[j];
      row.pseudo_ok = q.predicted_label == box.label;
      if (!index.find(q.predicted_label)) continue;  // counts as zero precision
      const auto h = search_hierarchical(index, db, q.z, q.predicted_label, k);
      const auto b = search_bruteforce(db, q.z, k, q.predicted_label);
      row.precision = precision_at_k(h, box.label);
      row.overlap = overlap_fraction(h, b);
      row.candidates = double(h.candidates_evaluated);
      row.brute = double(b.candidates_evaluated);
    }
  };
  const std::size_t workers = std::min<std::size_t>(worker_count(), jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work, w, workers);
  work(0, workers);
  for (auto& t : pool) t.join();

  QueryStats st;
  st.queries = rows.size();
  for (const auto& r : rows) {
    st.precision += r.precision;
    st.overlap += r.overlap;
    st.candidates += r.candidates;
    st.brute_candidates += r.brute;
    st.pseudo_correct += r.pseudo_ok;
  }
  const double n = double(rows.size());
  st.precision /= n;
  st.overlap /= n;
  st.candidates /= n;
  st.brute_candidates /= n;
  return st;
}

void print_report(const ClassificationReport& r, std::ostream& out) {
  out << "accuracy=" << fixed(r.accuracy, 6) << " correct=" << r.correct << " total=" << r.total << '\n';
  for (std::size_t t = 0; t < r.confusion.size(); ++t) {
    out << "confusion[" << t << "]";
    for (auto v : r.confusion[t]) out << '\t' << v;
    out << '\n';
  }
}

}  // namespace

unsigned worker_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("REGIONMIR_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) n = std::min<unsigned>(n, unsigned(v));
  }
  return n;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Region embeddings and anatomy-partitioned image retrieval", "regionmir"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic annotated dataset");
  fs::path gen_out;
  int gen_n = 200, gen_classes = 6, gen_size = 64;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--n", gen_n)->check(CLI::PositiveNumber);
  gen->add_option("--classes", gen_classes)->check(CLI::PositiveNumber);
  gen->add_option("--size", gen_size)->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed);

  // train
  auto* train = app.add_subcommand("train", "Train a model stage and write a checkpoint plus loss log");
  std::string stage_name;
  fs::path train_data, train_out, train_init, train_log;
  TrainFlags train_flags;
  SplitOptions train_split;
  train->add_option("--stage", stage_name)->required()->check(CLI::IsMember({"pretrain", "finetune", "scratch", "cotrain"}));
  train->add_option("--data", train_data)->required();
  train->add_option("--out", train_out)->required();
  train->add_option("--init", train_init, "Checkpoint to start from");
  train->add_option("--log", train_log, "Loss log path (default: <out>.log)");
  train_flags.add(*train);
  train_split.add(*train);

  // embed
  auto* embed = app.add_subcommand("embed", "Embed every region of a split into a database");
  fs::path embed_ckpt, embed_data, embed_out;
  SplitOptions embed_split;
  embed->add_option("--ckpt", embed_ckpt)->required();
  embed->add_option("--data", embed_data)->required();
  embed->add_option("--out", embed_out)->required();
  embed_split.add(*embed);

  // build-index
  auto* bidx = app.add_subcommand("build-index", "Fit per-anatomy K-means models over a database");
  fs::path bidx_db, bidx_out;
  int bidx_k = 4, bidx_iters = 100;
  std::uint64_t bidx_seed = 0;
  bidx->add_option("--db", bidx_db)->required();
  bidx->add_option("--out", bidx_out)->required();
  bidx->add_option("--k", bidx_k)->check(CLI::PositiveNumber);
  bidx->add_option("--max-iters", bidx_iters)->check(CLI::PositiveNumber);
  bidx->add_option("--seed", bidx_seed);

  // query
  auto* query = app.add_subcommand("query", "Retrieve the top-k records for one image region");
  fs::path q_index, q_db, q_ckpt, q_image;
  std::string q_box, q_source = "classifier";
  std::size_t q_k = 5;
  bool q_brute = false;
  query->add_option("--index", q_index);
  query->add_option("--db", q_db)->required();
  query->add_option("--ckpt", q_ckpt)->required();
  query->add_option("--image", q_image)->required();
  query->add_option("--box", q_box, "label,x0,y0,x1,y1")->required();
  query->add_option("--k", q_k)->check(CLI::PositiveNumber);
  query->add_flag("--brute-force", q_brute, "Exact scan over the anatomy's records");
  query->add_option("--label-source", q_source)->check(CLI::IsMember({"classifier", "given"}));

  // eval
  auto* eval = app.add_subcommand("eval", "Classification accuracy and retrieval precision reports");
  fs::path e_ckpt, e_data, e_db, e_index;
  std::size_t e_k = 5, e_queries = 0;
  std::string e_regime = "pretrain-finetune";
  int e_pretrain_epochs = 0;
  TrainFlags e_flags;
  SplitOptions e_split;
  eval->add_option("--ckpt", e_ckpt);
  eval->add_option("--data", e_data)->required();
  eval->add_option("--db", e_db);
  eval->add_option("--index", e_index);
  eval->add_option("--top-k", e_k, "Retrieval depth for precision@k")->check(CLI::PositiveNumber);
  eval->add_option("--queries", e_queries, "Cap on query regions (0: all)");
  eval->add_option("--regime", e_regime, "Cross-validation regime without --ckpt")
      ->check(CLI::IsMember({"pretrain-finetune", "scratch", "cotrain"}));
  eval->add_option("--pretrain-epochs", e_pretrain_epochs, "Pretrain epochs (default: --epochs)");
  e_flags.add(*eval);
  e_split.add(*eval);

  // sim-matrix
  auto* sim = app.add_subcommand("sim-matrix", "Mean cosine similarity between anatomy groups as CSV");
  fs::path s_ckpt, s_data, s_out;
  SplitOptions s_split;
  sim->add_option("--ckpt", s_ckpt)->required();
  sim->add_option("--data", s_data)->required();
  sim->add_option("--out", s_out, "CSV path (default: stdout)");
  s_split.add(*sim);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    if (!app.get_subcommands().empty()) err << app.get_subcommands().front()->help();
    return kExitUsage;
  }

  try {
    if (*gen) {
      Rng rng(gen_seed);
      const auto ds = gen_synthetic(rng, gen_n, gen_classes, {gen_size, gen_size});
      save_dataset(ds, gen_out);
      out << "samples=" << ds.size() << " classes=" << ds.num_classes << " size=" << gen_size << "x" << gen_size << '\n';
      for (int c = 0; c < ds.num_classes; ++c) out << c << '\t' << ds.class_names[std::size_t(c)] << '\n';
    } else if (*train) {
      require_dataset(train_data);
      std::optional<Checkpoint> init;
      if (!train_init.empty()) {
        require_file(train_init);
        init = load_checkpoint(train_init);
      }
      const auto stage = parse_stage(stage_name);
      if (train_split.split == "test") throw ConfigError("training on the test split is not allowed");
      if (train_split.split == "all" && (train_split.holdout > 0 || train_split.folds > 0)) train_split.split = "train";
      const auto ds = train_split.select(load_dataset(train_data));
      const auto ck = run_stage(stage, train_flags, ds, init);
      save_checkpoint(ck, train_out);
      const fs::path log = train_log.empty() ? fs::path(train_out.string() + ".log") : train_log;
      write_log(ck, log);
      out << "stage=" << stage_name << " epochs=" << ck.epoch << " samples=" << ds.size();
      if (!ck.loss_history.empty()) out << " final_loss=" << fixed(ck.loss_history.back(), 6);
      out << '\n';
    } else if (*embed) {
      require_file(embed_ckpt);
      require_dataset(embed_data);
      const auto ck = load_checkpoint(embed_ckpt);
      const auto ds = embed_split.select(load_dataset(embed_data));
      const auto db = build_db(ck.params, ds);
      save_db(db, embed_out);
      out << "records=" << db.size() << " dim=" << db.dim() << '\n';
    } else if (*bidx) {
      require_file(bidx_db);
      const auto db = load_db(bidx_db);
      Rng rng(bidx_seed);
      const auto index = build_index(db, bidx_k, rng, bidx_iters);
      save_index(index, bidx_out);
      for (const auto& m : index.models())
        out << "label=" << m.label << " k=" << m.k() << " records=" << m.record_count()
            << " inertia=" << fixed(m.inertia, 6) << (m.reduced() ? " reduced" : "") << '\n';
    } else if (*query) {
      if (!q_brute && q_index.empty()) throw ConfigError("query requires --index unless --brute-force is given");
      require_file(q_db);
      require_file(q_ckpt);
      require_file(q_image);
      if (!q_brute) require_file(q_index);
      const auto box = parse_box(q_box);
      AnnotatedImage image;
      image.id = q_image.stem().string();
      image.pixels = read_pgm(q_image);
      if (!box.fits(image.height(), image.width())) throw ConfigError("--box lies outside the image");
      image.boxes = {box};
      const auto ck = load_checkpoint(q_ckpt);
      const auto db = load_db(q_db);
      const auto source = q_source == "given" ? LabelSource::kGiven : LabelSource::kClassifier;
      QueryResult result;
      if (q_brute) {
        const int label = source == LabelSource::kGiven ? box.label : embed_query(ck.params, image, box).predicted_label;
        result = query_bruteforce(db, ck.params, image, box, q_k, label);
      } else {
        result = query_hierarchical(load_index(q_index), db, ck.params, image, box, q_k, source);
      }
      for (std::size_t i = 0; i < result.hits.size(); ++i) {
        const auto& h = result.hits[i];
        out << (i + 1) << '\t' << h.image_id << '\t' << h.label << '\t' << fixed(h.similarity, 6) << '\n';
      }
      out << "candidates=" << result.candidates_evaluated << '\n';
      err << "pseudo_label=" << result.pseudo_label << '\n';
    } else if (*eval) {
      require_dataset(e_data);
      const auto ds = load_dataset(e_data);
      if (!e_ckpt.empty()) {
        require_file(e_ckpt);
        const auto ck = load_checkpoint(e_ckpt);
        const auto split = e_split.select(ds);
        print_report(eval_classification(ck.params, split), out);
        if (!e_db.empty() || !e_index.empty()) {
          if (e_db.empty() || e_index.empty()) throw ConfigError("precision@k needs both --db and --index");
          require_file(e_db);
          require_file(e_index);
          const auto st = query_stats(load_index(e_index), load_db(e_db), ck.params, split, e_k, e_queries);
          out << "queries=" << st.queries << " precision@" << e_k << "=" << fixed(st.precision, 6)
              << " overlap=" << fixed(st.overlap, 6) << " pseudo_label_accuracy="
              << fixed(double(st.pseudo_correct) / double(st.queries), 6)
              << " mean_candidates=" << fixed(st.candidates, 2) << " brute_candidates=" << fixed(st.brute_candidates, 2)
              << '\n';
        }
      } else {
        // Cross-validation driver: train every fold from the same seed, test on its held-out part.
        if (e_split.folds < 2) throw ConfigError("eval without --ckpt needs --folds >= 2");
        double sum = 0.0;
        for (int f = 0; f < e_split.folds; ++f) {
          auto fold = e_split;
          fold.fold = f;
          fold.split = "train";
          const auto train_ds = fold.select(ds);
          fold.split = "test";
          const auto test_ds = fold.select(ds);
          Checkpoint ck;
          if (e_regime == "pretrain-finetune") {
            auto pre_flags = e_flags;
            if (e_pretrain_epochs > 0) pre_flags.epochs = e_pretrain_epochs;
            const auto pre = run_stage(Stage::kPretrain, pre_flags, train_ds, std::nullopt);
            ck = run_stage(Stage::kFinetune, e_flags, train_ds, pre);
          } else {
            ck = run_stage(e_regime == "scratch" ? Stage::kScratch : Stage::kCotrain, e_flags, train_ds, std::nullopt);
          }
          const auto r = eval_classification(ck.params, test_ds);
          out << "fold=" << f << " accuracy=" << fixed(r.accuracy, 6) << " correct=" << r.correct << " total=" << r.total
              << '\n';
          sum += r.accuracy;
        }
        out << "mean_accuracy=" << fixed(sum / e_split.folds, 6) << '\n';
      }
    } else if (*sim) {
      require_file(s_ckpt);
      require_dataset(s_data);
      const auto ck = load_checkpoint(s_ckpt);
      const auto ds = s_split.select(load_dataset(s_data));
      std::vector<LabeledVector> embs;
      for (const auto& s : ds.samples)
        for (auto& e : embed_regions(ck.params.encoder, ck.params.projection, s)) embs.push_back({e.label, e.z_norm});
      const auto m = similarity_matrix(embs, ds.num_classes);
      std::ostringstream csv;
      csv << "class";
      for (const auto& name : ds.class_names) csv << ',' << name;
      csv << '\n';
      for (int a = 0; a < ds.num_classes; ++a) {
        csv << ds.class_names[std::size_t(a)];
        for (int b = 0; b < ds.num_classes; ++b) {
          csv << ',';
          if (m[std::size_t(a)][std::size_t(b)]) csv << fixed(*m[std::size_t(a)][std::size_t(b)], 6);
        }
        csv << '\n';
      }
      if (s_out.empty()) {
        out << csv.str();
      } else {
        std::ofstream f(s_out);
        if (!(f << csv.str())) throw IoError("cannot write " + s_out.string());
      }
    }
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    err << "validation error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitOk;
}

}  // namespace regionmir::cli
