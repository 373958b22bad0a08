#include <set>

#include "doctest.h"
#include "regionmir/dataset.hpp"
#include "test_util.hpp"

using namespace regionmir;

namespace {

DatasetManifest two_image_dataset() {
  DatasetManifest m;
  m.num_classes = 2;
  m.class_names = {"a", "b"};
  m.image_size = {4, 5};
  for (int i = 0; i < 2; ++i) {
    AnnotatedImage img;
    img.id = "s" + std::to_string(i);
    img.pixels = RowMatrixXd::Zero(4, 5);
    for (Index j = 0; j < img.pixels.size(); ++j) img.pixels.data()[j] = double((j * 37 + i * 11) % 256) / 255.0;
    img.boxes = {{0, 0, 0, 2, 2}, {1, 1, 1, 5, 4}};
    m.samples.push_back(img);
  }
  return m;
}

}  // namespace

TEST_CASE("gen_synthetic") {
  SUBCASE("cardinality") {
    Rng rng(7);
    const auto m = gen_synthetic(rng, 1, 3, {64, 64});
    REQUIRE(m.size() == 1);
    REQUIRE(m.samples[0].boxes.size() == 3);
    std::set<int> labels;
    for (const auto& b : m.samples[0].boxes) labels.insert(b.label);
    CHECK(labels == std::set<int>{0, 1, 2});
    CHECK(m.class_names == std::vector<std::string>{"rectangle", "ellipse", "cross"});
  }
  SUBCASE("deterministic") {
    Rng a(3), b(3);
    const auto ma = gen_synthetic(a, 4, 6, {64, 64});
    const auto mb = gen_synthetic(b, 4, 6, {64, 64});
    CHECK(ma == mb);
    TempDir da("gen_a"), db("gen_b");
    save_dataset(ma, da.path());
    save_dataset(mb, db.path());
    CHECK(slurp(da / "manifest.json") == slurp(db / "manifest.json"));
    CHECK(slurp(da.path() / "images" / "img0002.pgm") == slurp(db.path() / "images" / "img0002.pgm"));
  }
  SUBCASE("boxes valid over a 100-seed sweep") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      const ImageSize size{seed % 2 ? 32 : 64, seed % 3 ? 64 : 48};
      const auto m = gen_synthetic(rng, 2, 8, size);
      CHECK_NOTHROW(validate_manifest(m));
      for (const auto& s : m.samples) {
        CHECK(s.boxes.size() == 8);
        for (const auto& b : s.boxes) CHECK(b.fits(size.height, size.width));
        CHECK(s.pixels.minCoeff() >= 0.0);
        CHECK(s.pixels.maxCoeff() <= 1.0);
      }
    }
  }
  SUBCASE("boxes are tight around the rendered shape") {
    for (int label = 0; label < kSyntheticArchetypes; ++label) {
      const ShapePlacement p{label, 30, 33, 7, 0.8};
      const RowMatrixXd mask = render_shape(p, {64, 64});
      CHECK(mask.maxCoeff() == doctest::Approx(0.8));
      int x0 = 64, x1 = 0, y0 = 64, y1 = 0;
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
          if (mask(y, x) > 0) {
            x0 = std::min(x0, x), x1 = std::max(x1, x + 1), y0 = std::min(y0, y), y1 = std::max(y1, y + 1);
          }
      // The mask never leaves the placement square.
      CHECK(x0 >= 30 - 7);
      CHECK(x1 <= 30 + 8);
      CHECK(y0 >= 33 - 7);
      CHECK(y1 <= 33 + 8);
      CHECK(x1 - x0 >= 3);
    }
  }
  SUBCASE("too many classes") {
    Rng rng(1);
    CHECK_THROWS_AS(gen_synthetic(rng, 1, 9, {64, 64}), UnsupportedClassCountError);
  }
}

TEST_CASE("save and load") {
  TempDir dir("ds");
  SUBCASE("round trip") {
    const auto m = two_image_dataset();
    save_dataset(m, dir.path());
    const auto loaded = load_dataset(dir.path());
    CHECK(loaded.size() == 2);
    CHECK(loaded == m);
  }
  SUBCASE("synthetic round trip and byte-stable resave") {
    Rng rng(12);
    const auto m = gen_synthetic(rng, 3, 6, {64, 64});
    save_dataset(m, dir / "a");
    const auto loaded = load_dataset(dir / "a");
    CHECK(loaded == m);
    save_dataset(loaded, dir / "b");
    CHECK(slurp(dir.path() / "a" / "manifest.json") == slurp(dir.path() / "b" / "manifest.json"));
    for (const auto& s : m.samples) {
      CHECK(slurp(dir.path() / "a" / "images" / (s.id + ".pgm")) ==
            slurp(dir.path() / "b" / "images" / (s.id + ".pgm")));
    }
  }
  SUBCASE("empty manifest") {
    DatasetManifest m = two_image_dataset();
    m.samples.clear();
    save_dataset(m, dir.path());
    const auto loaded = load_dataset(dir.path());
    CHECK(loaded.size() == 0);
    CHECK(slurp(dir / "manifest.json").find("\"samples\": []") != std::string::npos);
  }
  SUBCASE("out-of-bounds box names the image") {
    auto m = two_image_dataset();
    save_dataset(m, dir.path());
    std::string text = slurp(dir / "manifest.json");
    const auto pos = text.find("\"x1\": 5");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 7, "\"x1\": 6");
    spit(dir / "manifest.json", text);
    try {
      load_dataset(dir.path());
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(e.kind() == LoadError::Kind::kOutOfBoundsBox);
      CHECK(std::string(e.what()).find("s0") != std::string::npos);
    }
  }
  SUBCASE("duplicate label") {
    auto m = two_image_dataset();
    m.samples[1].boxes[1].label = 0;
    save_dataset(m, dir.path());
    try {
      load_dataset(dir.path());
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(e.kind() == LoadError::Kind::kDuplicateLabel);
    }
  }
  SUBCASE("missing files") {
    try {
      load_dataset(dir.path());
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(e.kind() == LoadError::Kind::kMissingFile);
    }
    save_dataset(two_image_dataset(), dir.path());
    std::filesystem::remove(dir.path() / "images" / "s1.pgm");
    try {
      load_dataset(dir.path());
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(e.kind() == LoadError::Kind::kMissingFile);
    }
  }
  SUBCASE("malformed pgm") {
    save_dataset(two_image_dataset(), dir.path());
    spit(dir.path() / "images" / "s0.pgm", "P2\n5 4\n255\n");
    try {
      load_dataset(dir.path());
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(e.kind() == LoadError::Kind::kMalformedPgm);
    }
    spit(dir.path() / "images" / "s0.pgm", "P5\n5 4\n255\nabc");
    CHECK_THROWS_AS(load_dataset(dir.path()), LoadError);
  }
  SUBCASE("malformed manifest") {
    spit(dir / "manifest.json", "{\"num_classes\": 2");
    try {
      load_dataset(dir.path());
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(e.kind() == LoadError::Kind::kMalformedManifest);
    }
  }
  SUBCASE("pgm maxval is range-normalized") {
    std::string bytes = "P5\n# comment\n2 1\n100\n";
    bytes.push_back(char(50));
    bytes.push_back(char(100));
    spit(dir / "x.pgm", bytes);
    const RowMatrixXd px = read_pgm(dir / "x.pgm");
    CHECK(px(0, 0) == 0.5);
    CHECK(px(0, 1) == 1.0);
  }
}

TEST_CASE("split_folds") {
  Rng rng(5);
  const auto folds = split_folds(10, 5, rng);
  REQUIRE(folds.size() == 5);
  std::vector<int> test_count(10, 0), train_count(10, 0);
  for (const auto& f : folds) {
    CHECK(f.test.size() == 2);
    CHECK(f.train.size() == 8);
    for (auto i : f.test) test_count[i] += 1;
    for (auto i : f.train) train_count[i] += 1;
    std::set<std::size_t> overlap(f.test.begin(), f.test.end());
    for (auto i : f.train) CHECK(overlap.count(i) == 0);
  }
  for (int i = 0; i < 10; ++i) {
    CHECK(test_count[i] == 1);
    CHECK(train_count[i] == 4);
  }
  Rng again(5);
  const auto folds2 = split_folds(10, 5, again);
  for (std::size_t f = 0; f < 5; ++f) CHECK(folds[f].test == folds2[f].test);

  Rng uneven(1);
  for (const auto& f : split_folds(13, 5, uneven)) CHECK((f.test.size() == 2 || f.test.size() == 3));
  CHECK_THROWS_AS(split_folds(3, 5, rng), InsufficientDataError);
  CHECK_THROWS_AS(split_folds(10, 1, rng), ParameterError);
}

TEST_CASE("resize") {
  Rng rng(9);
  const auto m = gen_synthetic(rng, 1, 6, {64, 64});
  const auto& img = m.samples[0];
  SUBCASE("identity") { CHECK(resize(img, {64, 64}) == img); }
  SUBCASE("halving") {
    const auto half = resize(img, {32, 32});
    CHECK(half.height() == 32);
    CHECK(half.width() == 32);
    for (std::size_t i = 0; i < img.boxes.size(); ++i) {
      const auto& b = img.boxes[i];
      const auto& h = half.boxes[i];
      CHECK(h.x0 == b.x0 / 2);
      CHECK(h.y0 == b.y0 / 2);
      CHECK(h.x1 == (b.x1 + 1) / 2);
      CHECK(h.y1 == (b.y1 + 1) / 2);
    }
  }
  SUBCASE("resized boxes contain the resized shape") {
    for (int trial = 0; trial < 40; ++trial) {
      const int label = trial % kSyntheticArchetypes;
      const ShapePlacement p{label, 10 + int(rng.below(44)), 10 + int(rng.below(44)), 4 + int(rng.below(5)), 1.0};
      AnnotatedImage clean;
      clean.id = "c";
      clean.pixels = render_shape(p, {64, 64});
      BoundingBox box{label, 64, 64, 0, 0};
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
          if (clean.pixels(y, x) > 0) {
            box.x0 = std::min(box.x0, x), box.y0 = std::min(box.y0, y);
            box.x1 = std::max(box.x1, x + 1), box.y1 = std::max(box.y1, y + 1);
          }
      clean.boxes = {box};
      for (ImageSize target : {ImageSize{32, 32}, ImageSize{48, 40}, ImageSize{100, 90}}) {
        const auto r = resize(clean, target);
        const auto& rb = r.boxes[0];
        CHECK(rb.fits(target.height, target.width));
        for (int y = 0; y < target.height; ++y)
          for (int x = 0; x < target.width; ++x)
            if (r.pixels(y, x) >= 0.5) {
              CHECK(x >= rb.x0);
              CHECK(x < rb.x1);
              CHECK(y >= rb.y0);
              CHECK(y < rb.y1);
            }
      }
    }
  }
}
