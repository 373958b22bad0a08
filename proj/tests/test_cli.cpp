#include <cstdlib>
#include <map>
#include <regex>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "regionmir/retrieval.hpp"
#include "test_util.hpp"

using namespace regionmir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = regionmir::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string s(const fs::path& p) { return p.string(); }

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  return files;
}

// Small model so the pipeline runs in seconds.
const std::vector<std::string> kSmall = {"--hidden", "16", "--embed", "8", "--seed", "1"};

std::vector<std::string> with(std::vector<std::string> args, const std::vector<std::string>& extra) {
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

// gen-data, pretrain, finetune, embed and build-index into `dir`; returns the query output.
std::string pipeline(const TempDir& dir) {
  const auto d = s(dir / "d");
  REQUIRE(invoke({"gen-data", "--out", d, "--n", "24", "--classes", "4", "--size", "32", "--seed", "3"}).code == 0);
  REQUIRE(invoke(with({"train", "--stage", "pretrain", "--data", d, "--epochs", "2", "--holdout", "4", "--out",
                    s(dir / "c1.rmir")},
                   kSmall))
              .code == 0);
  REQUIRE(invoke(with({"train", "--stage", "finetune", "--init", s(dir / "c1.rmir"), "--data", d, "--epochs", "2",
                    "--holdout", "4", "--out", s(dir / "c2.rmir")},
                   kSmall))
              .code == 0);
  REQUIRE(invoke({"embed", "--ckpt", s(dir / "c2.rmir"), "--data", d, "--holdout", "4", "--split", "train", "--out",
               s(dir / "e.rmdb")})
              .code == 0);
  REQUIRE(invoke({"build-index", "--db", s(dir / "e.rmdb"), "--k", "2", "--seed", "5", "--out", s(dir / "i.rmix")}).code ==
          0);
  const auto r = invoke({"query", "--index", s(dir / "i.rmix"), "--db", s(dir / "e.rmdb"), "--ckpt", s(dir / "c2.rmir"),
                      "--image", s(dir / "d" / "images" / "img0022.pgm"), "--box", "1,2,2,20,20", "--k", "5"});
  REQUIRE(r.code == 0);
  return r.out;
}

}  // namespace

TEST_CASE("gen-data") {
  TempDir dir("cli_gen");
  const auto r = invoke({"gen-data", "--out", s(dir / "a"), "--n", "200", "--classes", "6", "--size", "64", "--seed", "1"});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("samples=200 classes=6 size=64x64", 0) == 0);
  const auto files = tree(dir / "a");
  CHECK(files.size() == 201);
  CHECK(files.count("manifest.json") == 1);
  CHECK(load_dataset(dir / "a").size() == 200);

  REQUIRE(invoke({"gen-data", "--out", s(dir / "b"), "--n", "200", "--classes", "6", "--size", "64", "--seed", "1"}).code ==
          0);
  CHECK(tree(dir / "b") == files);

  CHECK(invoke({"gen-data", "--out", s(dir / "c"), "--n", "-3"}).code == cli::kExitUsage);
  CHECK(invoke({"gen-data", "--n", "3"}).code == cli::kExitUsage);
  CHECK(invoke({"gen-data", "--out", s(dir / "c"), "--classes", "99"}).code == cli::kExitValidation);
}

TEST_CASE("train") {
  TempDir dir("cli_train");
  const auto d = s(dir / "d");
  REQUIRE(invoke({"gen-data", "--out", d, "--n", "16", "--classes", "4", "--size", "32", "--seed", "2"}).code == 0);

  const auto pre = invoke(with({"train", "--stage", "pretrain", "--data", d, "--epochs", "5", "--out", s(dir / "c1.rmir")},
                            kSmall));
  REQUIRE(pre.code == 0);
  const auto log = lines(slurp(dir / "c1.rmir.log"));
  REQUIRE(log.size() == 5);
  CHECK(std::regex_match(log[4], std::regex(R"(5\t[0-9]+\.[0-9]{10})")));
  CHECK(load_checkpoint(dir / "c1.rmir").epoch == 5);

  const auto before = slurp(dir / "c1.rmir");
  REQUIRE(invoke(with({"train", "--stage", "finetune", "--init", s(dir / "c1.rmir"), "--data", d, "--epochs", "2", "--out",
                    s(dir / "c2.rmir"), "--log", s(dir / "ft.txt")},
                   kSmall))
              .code == 0);
  CHECK(slurp(dir / "c1.rmir") == before);
  CHECK(lines(slurp(dir / "ft.txt")).size() == 2);
  CHECK_FALSE(load_checkpoint(dir / "c2.rmir").params == load_checkpoint(dir / "c1.rmir").params);

  SUBCASE("scratch is reproducible through eval") {
    for (const char* out : {"s1.rmir", "s2.rmir"})
      REQUIRE(invoke(with({"train", "--stage", "scratch", "--data", d, "--epochs", "2", "--out", s(dir / out)}, kSmall))
                  .code == 0);
    CHECK(slurp(dir / "s1.rmir") == slurp(dir / "s2.rmir"));
    const auto e1 = invoke({"eval", "--ckpt", s(dir / "s1.rmir"), "--data", d});
    const auto e2 = invoke({"eval", "--ckpt", s(dir / "s2.rmir"), "--data", d});
    REQUIRE(e1.code == 0);
    CHECK(e1.out == e2.out);
  }
  SUBCASE("cotrain") {
    CHECK(invoke(with({"train", "--stage", "cotrain", "--data", d, "--epochs", "1", "--lambda", "0.5", "--out",
                    s(dir / "co.rmir")},
                   kSmall))
              .code == 0);
  }
  SUBCASE("errors") {
    CHECK(invoke(with({"train", "--stage", "pretrain", "--data", d, "--batch-size", "4", "--k", "4", "--out",
                    s(dir / "x.rmir")},
                   kSmall))
              .code == cli::kExitValidation);
    CHECK(invoke(with({"train", "--stage", "finetune", "--data", d, "--out", s(dir / "x.rmir")}, kSmall)).code ==
          cli::kExitValidation);
    CHECK(invoke({"train", "--stage", "bogus", "--data", d, "--out", s(dir / "x.rmir")}).code == cli::kExitUsage);
    CHECK(invoke({"train", "--stage", "pretrain", "--data", d, "--epochs", "0", "--out", s(dir / "x.rmir")}).code ==
          cli::kExitUsage);
    const auto missing = invoke({"train", "--stage", "pretrain", "--data", s(dir / "nowhere"), "--out", s(dir / "x")});
    CHECK(missing.code == cli::kExitIo);
    CHECK(missing.err.find("nowhere") != std::string::npos);
    const auto no_init =
        invoke({"train", "--stage", "finetune", "--init", s(dir / "none.rmir"), "--data", d, "--out", s(dir / "x")});
    CHECK(no_init.code == cli::kExitIo);
    CHECK(no_init.err.find("none.rmir") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "x.rmir"));
  }
}

TEST_CASE("query, eval and sim-matrix") {
  TempDir dir("cli_query");
  const auto out = pipeline(dir);
  const auto rows = lines(out);
  REQUIRE(rows.size() == 6);
  const std::regex hit(R"((\d+)\t(img\d{4})\t(\d+)\t(-?\d+\.\d{6}))");
  double prev = 2.0;
  for (int i = 0; i < 5; ++i) {
    std::smatch m;
    REQUIRE(std::regex_match(rows[std::size_t(i)], m, hit));
    CHECK(std::stoi(m[1]) == i + 1);
    CHECK(std::stod(m[4]) <= prev);
    prev = std::stod(m[4]);
  }
  CHECK(std::regex_match(rows[5], std::regex(R"(candidates=\d+)")));

  const auto db = load_db(dir / "e.rmdb");
  const auto d = s(dir / "d");
  const auto q = s(dir / "d" / "images" / "img0022.pgm");

  SUBCASE("brute force scans the whole label scope") {
    const auto r = invoke({"query", "--brute-force", "--db", s(dir / "e.rmdb"), "--ckpt", s(dir / "c2.rmir"), "--image", q,
                        "--box", "1,2,2,20,20", "--k", "5", "--label-source", "given"});
    REQUIRE(r.code == 0);
    CHECK(lines(r.out).back() == "candidates=" + std::to_string(db.members(1).size()));
    for (std::size_t i = 0; i < 5; ++i) CHECK(lines(r.out)[i].find("\t1\t") != std::string::npos);
  }
  SUBCASE("given label source over the index") {
    const auto r = invoke({"query", "--index", s(dir / "i.rmix"), "--db", s(dir / "e.rmdb"), "--ckpt", s(dir / "c2.rmir"),
                        "--image", q, "--box", "3,2,2,20,20", "--label-source", "given"});
    REQUIRE(r.code == 0);
    CHECK(r.err.find("pseudo_label=3") != std::string::npos);
  }
  SUBCASE("query errors") {
    const auto base = std::vector<std::string>{"query", "--index", s(dir / "i.rmix"), "--db", s(dir / "e.rmdb"),
                                               "--ckpt", s(dir / "c2.rmir"), "--image", q};
    CHECK(invoke(with(base, {"--box", "1,2,2,40,20"})).code == cli::kExitValidation);
    CHECK(invoke(with(base, {"--box", "1,2,2"})).code == cli::kExitValidation);
    CHECK(invoke(with(base, {"--box", "9,2,2,20,20", "--label-source", "given"})).code == cli::kExitValidation);
    const auto missing = invoke({"query", "--index", s(dir / "gone.rmix"), "--db", s(dir / "e.rmdb"), "--ckpt",
                              s(dir / "c2.rmir"), "--image", q, "--box", "1,2,2,20,20"});
    CHECK(missing.code == cli::kExitIo);
    CHECK(missing.err.find("gone.rmix") != std::string::npos);
    spit(dir / "bad.rmdb", "not a database");
    CHECK(invoke({"query", "--index", s(dir / "i.rmix"), "--db", s(dir / "bad.rmdb"), "--ckpt", s(dir / "c2.rmir"),
               "--image", q, "--box", "1,2,2,20,20"})
              .code == cli::kExitIo);
  }
  SUBCASE("eval matches the library") {
    const auto r = invoke({"eval", "--ckpt", s(dir / "c2.rmir"), "--data", d, "--holdout", "4", "--split", "test", "--db",
                        s(dir / "e.rmdb"), "--index", s(dir / "i.rmix"), "--top-k", "3"});
    REQUIRE(r.code == 0);
    const auto ds = load_dataset(dir / "d");
    const auto report = eval_classification(load_checkpoint(dir / "c2.rmir").params, ds.subset({20, 21, 22, 23}));
    char expected[128];
    std::snprintf(expected, sizeof expected, "accuracy=%.6f correct=%zu total=%zu", report.accuracy, report.correct,
                  report.total);
    CHECK(lines(r.out)[0] == expected);
    CHECK(r.out.find("queries=16 precision@3=") != std::string::npos);
  }
  SUBCASE("eval output does not depend on the worker count") {
    const std::vector<std::string> args = {"eval", "--ckpt", s(dir / "c2.rmir"), "--data", d, "--db", s(dir / "e.rmdb"),
                                           "--index", s(dir / "i.rmix")};
    setenv("REGIONMIR_THREADS", "1", 1);
    CHECK(cli::worker_count() == 1);
    const auto one = invoke(args);
    setenv("REGIONMIR_THREADS", "4", 1);
    const auto four = invoke(args);
    unsetenv("REGIONMIR_THREADS");
    REQUIRE(one.code == 0);
    CHECK(one.out == four.out);
  }
  SUBCASE("sim-matrix csv") {
    REQUIRE(invoke({"sim-matrix", "--ckpt", s(dir / "c2.rmir"), "--data", d, "--out", s(dir / "m.csv")}).code == 0);
    const auto csv = lines(slurp(dir / "m.csv"));
    REQUIRE(csv.size() == 5);
    CHECK(csv[0] == "class,rectangle,ellipse,cross,ring");
    std::vector<std::vector<std::string>> cells;
    for (std::size_t i = 1; i < csv.size(); ++i) {
      std::vector<std::string> row;
      std::stringstream ss(csv[i]);
      for (std::string c; std::getline(ss, c, ',');) row.push_back(c);
      REQUIRE(row.size() == 5);
      cells.push_back(row);
    }
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < 4; ++b) CHECK(cells[a][b + 1] == cells[b][a + 1]);
    CHECK(invoke({"sim-matrix", "--ckpt", s(dir / "c2.rmir"), "--data", d}).out == slurp(dir / "m.csv"));
  }
  SUBCASE("cross-validation driver") {
    const auto r = invoke(with({"eval", "--data", d, "--folds", "3", "--regime", "scratch", "--epochs", "1"}, kSmall));
    REQUIRE(r.code == 0);
    const auto rows = lines(r.out);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].rfind("fold=0 accuracy=", 0) == 0);
    CHECK(rows[3].rfind("mean_accuracy=", 0) == 0);
    CHECK(invoke({"eval", "--data", d}).code == cli::kExitValidation);
  }
}

TEST_CASE("pipeline is deterministic") {
  TempDir a("cli_det_a"), b("cli_det_b");
  CHECK(pipeline(a) == pipeline(b));
  for (const char* f : {"c1.rmir", "c2.rmir", "e.rmdb", "i.rmix", "c1.rmir.log"}) CHECK(slurp(a / f) == slurp(b / f));
}
