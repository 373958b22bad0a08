#include "regionmir/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "json.hpp"
#include "regionmir/errors.hpp"

namespace regionmir {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr std::array<const char*, kSyntheticArchetypes> kArchetypeNames = {
    "rectangle", "ellipse", "cross", "ring", "triangle", "bar", "l_shape", "dot_grid"};

// Home positions as fractions of (width, height): a 3×3 grid without its center.
constexpr std::array<std::pair<double, double>, kSyntheticArchetypes> kHomePositions = {{
    {0.2, 0.2}, {0.5, 0.2}, {0.8, 0.2}, {0.2, 0.5}, {0.8, 0.5}, {0.2, 0.8}, {0.5, 0.8}, {0.8, 0.8}}};

constexpr double kBackground = 0.1;
constexpr double kNoiseSigma = 0.05;
constexpr double kJitterFraction = 0.1;
constexpr double kShapeFraction = 0.1;
constexpr int kPlacementAttempts = 256;

double class_intensity(int label) { return 0.45 + 0.07 * label; }

bool shape_covers(int label, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (label) {
    case 0:  // rectangle
      return ax <= r && ay <= 0.6 * r;
    case 1: {  // ellipse
      const double ex = dx / r, ey = dy / (0.7 * r);
      return ex * ex + ey * ey <= 1.0;
    }
    case 2:  // cross
      return (ax <= r && ay <= r / 3.0) || (ay <= r && ax <= r / 3.0);
    case 3: {  // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3025 * r * r;
    }
    case 4:  // triangle, apex up
      return dy >= -r && dy <= r && ax <= (dy + r) / 2.0;
    case 5:  // vertical bar
      return ax <= r / 4.0 && ay <= r;
    case 6: {  // L-shape
      const double stroke = 2.0 * r / 3.0;
      const bool vertical = dx >= -r && dx <= -r + stroke && ay <= r;
      const bool horizontal = dy >= r - stroke && dy <= r && ax <= r;
      return vertical || horizontal;
    }
    case 7: {  // 3×3 dot grid
      const double spacing = 2.0 * r / 3.0;
      const double dot = std::max(1.0, r / 4.0);
      for (int gy = -1; gy <= 1; ++gy) {
        for (int gx = -1; gx <= 1; ++gx) {
          const double ox = dx - gx * spacing, oy = dy - gy * spacing;
          if (ox * ox + oy * oy <= dot * dot) return true;
        }
      }
      return false;
    }
    default:
      return false;
  }
}

[[noreturn]] void load_fail(LoadError::Kind kind, const std::string& what) { throw LoadError(kind, what); }

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) load_fail(LoadError::Kind::kMissingFile, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

DatasetManifest DatasetManifest::subset(const std::vector<std::size_t>& indices) const {
  DatasetManifest out;
  out.num_classes = num_classes;
  out.class_names = class_names;
  out.image_size = image_size;
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) out.samples.push_back(samples.at(i));
  return out;
}

void validate_manifest(const DatasetManifest& manifest) {
  if (manifest.num_classes < 2) {
    load_fail(LoadError::Kind::kMalformedManifest,
              "num_classes must be >= 2, got " + std::to_string(manifest.num_classes));
  }
  if (int(manifest.class_names.size()) != manifest.num_classes) {
    load_fail(LoadError::Kind::kMalformedManifest, "class_names length does not match num_classes");
  }
  std::set<std::string> ids;
  for (const auto& sample : manifest.samples) {
    if (!ids.insert(sample.id).second) {
      load_fail(LoadError::Kind::kMalformedManifest, "duplicate sample id '" + sample.id + "'");
    }
    if (sample.height() != manifest.image_size.height || sample.width() != manifest.image_size.width) {
      load_fail(LoadError::Kind::kMalformedPgm, "image '" + sample.id + "' is " +
                                                    std::to_string(sample.height()) + "x" +
                                                    std::to_string(sample.width()) +
                                                    ", manifest says " +
                                                    std::to_string(manifest.image_size.height) + "x" +
                                                    std::to_string(manifest.image_size.width));
    }
    std::set<int> labels;
    for (const auto& box : sample.boxes) {
      if (box.label < 0 || box.label >= manifest.num_classes) {
        load_fail(LoadError::Kind::kLabelOutOfRange,
                  "image '" + sample.id + "': label " + std::to_string(box.label) + " out of range");
      }
      if (!box.fits(sample.height(), sample.width())) {
        load_fail(LoadError::Kind::kOutOfBoundsBox,
                  "image '" + sample.id + "': box for label " + std::to_string(box.label) +
                      " is out of bounds");
      }
      if (!labels.insert(box.label).second) {
        load_fail(LoadError::Kind::kDuplicateLabel,
                  "image '" + sample.id + "': duplicate label " + std::to_string(box.label));
      }
    }
  }
}

RowMatrixXd quantize_8bit(const RowMatrixXd& pixels) {
  return pixels.unaryExpr([](double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; });
}

RowMatrixXd read_pgm(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  auto malformed = [&](const std::string& why) -> void {
    load_fail(LoadError::Kind::kMalformedPgm, path.string() + ": " + why);
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    long value = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + (bytes[pos] - '0');
      if (value > 1'000'000) malformed("header value too large");
      ++pos;
      ++digits;
    }
    if (digits == 0) malformed("expected integer in header");
    return value;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') malformed("missing P5 magic");
  pos = 2;
  const long width = read_int();
  const long height = read_int();
  const long maxval = read_int();
  if (width <= 0 || height <= 0) malformed("non-positive dimensions");
  if (maxval <= 0 || maxval > 255) malformed("maxval must be in 1..255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    malformed("missing whitespace after header");
  }
  ++pos;
  if (bytes.size() - pos != std::size_t(width * height)) malformed("pixel payload has wrong length");

  RowMatrixXd pixels(height, width);
  for (long i = 0; i < width * height; ++i) {
    pixels.data()[i] = double(static_cast<unsigned char>(bytes[pos + std::size_t(i)])) / double(maxval);
  }
  return pixels;
}

void write_pgm(const RowMatrixXd& pixels, const fs::path& path) {
  std::string bytes = "P5\n" + std::to_string(pixels.cols()) + " " + std::to_string(pixels.rows()) + "\n255\n";
  bytes.reserve(bytes.size() + std::size_t(pixels.size()));
  for (Index i = 0; i < pixels.size(); ++i) {
    const double v = std::clamp(pixels.data()[i], 0.0, 1.0);
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  write_file(path, bytes);
}

DatasetManifest load_dataset(const fs::path& root) {
  const fs::path manifest_path = root / "manifest.json";
  const std::string text = read_file(manifest_path);
  DatasetManifest manifest;
  try {
    const auto doc = nlohmann::json::parse(text);
    manifest.num_classes = doc.at("num_classes").get<int>();
    manifest.class_names = doc.at("class_names").get<std::vector<std::string>>();
    const auto size = doc.at("image_size").get<std::vector<int>>();
    if (size.size() != 2) load_fail(LoadError::Kind::kMalformedManifest, "image_size must be [H, W]");
    manifest.image_size = {size[0], size[1]};
    for (const auto& entry : doc.at("samples")) {
      AnnotatedImage sample;
      sample.id = entry.at("id").get<std::string>();
      const auto image_rel = entry.at("image").get<std::string>();
      for (const auto& b : entry.at("boxes")) {
        sample.boxes.push_back({b.at("label").get<int>(), b.at("x0").get<int>(), b.at("y0").get<int>(),
                                b.at("x1").get<int>(), b.at("y1").get<int>()});
      }
      const fs::path image_path = root / image_rel;
      if (!fs::exists(image_path)) {
        load_fail(LoadError::Kind::kMissingFile,
                  "image file " + image_path.string() + " for sample '" + sample.id + "' not found");
      }
      sample.pixels = read_pgm(image_path);
      manifest.samples.push_back(std::move(sample));
    }
  } catch (const nlohmann::json::exception& e) {
    load_fail(LoadError::Kind::kMalformedManifest, manifest_path.string() + ": " + e.what());
  }
  validate_manifest(manifest);
  return manifest;
}

void save_dataset(const DatasetManifest& manifest, const fs::path& root) {
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  if (ec) throw IoError("cannot create " + (root / "images").string() + ": " + ec.message());

  ordered_json doc;
  doc["num_classes"] = manifest.num_classes;
  doc["class_names"] = manifest.class_names;
  doc["image_size"] = {manifest.image_size.height, manifest.image_size.width};
  doc["samples"] = ordered_json::array();
  for (const auto& sample : manifest.samples) {
    ordered_json entry;
    entry["id"] = sample.id;
    entry["image"] = "images/" + sample.id + ".pgm";
    entry["boxes"] = ordered_json::array();
    for (const auto& box : sample.boxes) {
      entry["boxes"].push_back(
          {{"label", box.label}, {"x0", box.x0}, {"y0", box.y0}, {"x1", box.x1}, {"y1", box.y1}});
    }
    doc["samples"].push_back(std::move(entry));
    write_pgm(sample.pixels, root / "images" / (sample.id + ".pgm"));
  }
  write_file(root / "manifest.json", doc.dump(2) + "\n");
}

std::string archetype_name(int label) {
  if (label < 0 || label >= kSyntheticArchetypes) {
    throw UnsupportedClassCountError("no synthetic archetype for class " + std::to_string(label));
  }
  return kArchetypeNames[std::size_t(label)];
}

RowMatrixXd render_shape(const ShapePlacement& p, ImageSize size) {
  RowMatrixXd mask = RowMatrixXd::Zero(size.height, size.width);
  const double r = p.half_extent;
  for (int y = std::max(0, p.center_y - p.half_extent); y <= std::min(size.height - 1, p.center_y + p.half_extent); ++y) {
    for (int x = std::max(0, p.center_x - p.half_extent); x <= std::min(size.width - 1, p.center_x + p.half_extent); ++x) {
      if (shape_covers(p.label, x - p.center_x, y - p.center_y, r)) mask(y, x) = p.intensity;
    }
  }
  return mask;
}

DatasetManifest gen_synthetic(Rng& rng, int n, int num_classes, ImageSize size) {
  if (num_classes > kSyntheticArchetypes) {
    throw UnsupportedClassCountError("synthetic generator supports at most " +
                                     std::to_string(kSyntheticArchetypes) + " classes, got " +
                                     std::to_string(num_classes));
  }
  if (num_classes < 2) throw ParameterError("synthetic generator needs at least 2 classes");
  if (size.height < 32 || size.width < 32) throw ParameterError("synthetic images must be at least 32x32");
  if (n < 0) throw ParameterError("sample count must be non-negative");

  DatasetManifest manifest;
  manifest.num_classes = num_classes;
  manifest.image_size = size;
  for (int k = 0; k < num_classes; ++k) manifest.class_names.push_back(archetype_name(k));

  const int digits = std::max<int>(4, int(std::to_string(std::max(n - 1, 0)).size()));
  const double base_extent = kShapeFraction * std::min(size.height, size.width);
  for (int i = 0; i < n; ++i) {
    AnnotatedImage sample;
    std::string id = std::to_string(i);
    sample.id = "img" + std::string(std::size_t(digits) - id.size(), '0') + id;
    sample.pixels = RowMatrixXd::Constant(size.height, size.width, kBackground);

    std::vector<ShapePlacement> squares;
    for (int k = 0; k < num_classes; ++k) {
      ShapePlacement p;
      p.label = k;
      p.half_extent = std::max(3, int(std::lround(base_extent * rng.uniform(0.8, 1.2))));
      const auto [fx, fy] = kHomePositions[std::size_t(k)];
      const auto place = [&](double jx, double jy) {
        p.center_x = std::clamp(int(std::lround(fx * size.width + jx)), p.half_extent, size.width - 1 - p.half_extent);
        p.center_y =
            std::clamp(int(std::lround(fy * size.height + jy)), p.half_extent, size.height - 1 - p.half_extent);
      };
      // Redraw the jitter while the shape would touch an earlier one, so no
      // anatomy occludes another. The unjittered fallback is rarely needed.
      bool placed = false;
      for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
        place(rng.uniform(-kJitterFraction, kJitterFraction) * size.width,
              rng.uniform(-kJitterFraction, kJitterFraction) * size.height);
        placed = std::none_of(squares.begin(), squares.end(), [&](const ShapePlacement& q) {
          return std::abs(p.center_x - q.center_x) <= p.half_extent + q.half_extent + 1 &&
                 std::abs(p.center_y - q.center_y) <= p.half_extent + q.half_extent + 1;
        });
      }
      if (!placed) place(0.0, 0.0);
      squares.push_back(p);
      p.intensity = class_intensity(k);

      const RowMatrixXd mask = render_shape(p, size);
      BoundingBox box{k, size.width, size.height, 0, 0};
      for (int y = 0; y < size.height; ++y) {
        for (int x = 0; x < size.width; ++x) {
          if (mask(y, x) > 0.0) {
            sample.pixels(y, x) = mask(y, x);
            box.x0 = std::min(box.x0, x);
            box.y0 = std::min(box.y0, y);
            box.x1 = std::max(box.x1, x + 1);
            box.y1 = std::max(box.y1, y + 1);
          }
        }
      }
      sample.boxes.push_back(box);
    }

    for (Index j = 0; j < sample.pixels.size(); ++j) sample.pixels.data()[j] += kNoiseSigma * rng.normal();
    sample.pixels = quantize_8bit(sample.pixels);
    manifest.samples.push_back(std::move(sample));
  }
  validate_manifest(manifest);
  return manifest;
}

std::vector<Fold> split_folds(std::size_t n, int folds, Rng& rng) {
  if (folds < 2) throw ParameterError("split_folds: need at least 2 folds");
  if (n < std::size_t(folds)) {
    throw InsufficientDataError("split_folds: " + std::to_string(n) + " samples cannot fill " +
                                std::to_string(folds) + " folds");
  }
  const auto perm = rng.permutation(n);
  std::vector<int> fold_of(n);
  for (std::size_t i = 0; i < n; ++i) fold_of[perm[i]] = int(i % std::size_t(folds));
  std::vector<Fold> out(static_cast<std::size_t>(folds));
  for (std::size_t idx = 0; idx < n; ++idx) {
    for (int f = 0; f < folds; ++f) {
      (fold_of[idx] == f ? out[std::size_t(f)].test : out[std::size_t(f)].train).push_back(idx);
    }
  }
  return out;
}

AnnotatedImage resize(const AnnotatedImage& image, ImageSize target) {
  if (target.height < 8 || target.width < 8) throw ParameterError("resize: target must be at least 8x8");
  const int src_h = image.height(), src_w = image.width();
  if (src_h == target.height && src_w == target.width) return image;

  const double sy = double(src_h) / target.height;
  const double sx = double(src_w) / target.width;
  AnnotatedImage out;
  out.id = image.id;
  out.pixels.resize(target.height, target.width);

  auto sample_axis = [](int dst, double scale, int extent, int& i0, int& i1, double& t) {
    const double src = std::clamp((dst + 0.5) * scale - 0.5, 0.0, double(extent - 1));
    i0 = int(std::floor(src));
    i1 = std::min(i0 + 1, extent - 1);
    t = src - i0;
  };
  for (int y = 0; y < target.height; ++y) {
    int y0, y1;
    double ty;
    sample_axis(y, sy, src_h, y0, y1, ty);
    for (int x = 0; x < target.width; ++x) {
      int x0, x1;
      double tx;
      sample_axis(x, sx, src_w, x0, x1, tx);
      const double top = (1 - tx) * image.pixels(y0, x0) + tx * image.pixels(y0, x1);
      const double bottom = (1 - tx) * image.pixels(y1, x0) + tx * image.pixels(y1, x1);
      out.pixels(y, x) = (1 - ty) * top + ty * bottom;
    }
  }

  const double fx = double(target.width) / src_w;
  const double fy = double(target.height) / src_h;
  for (const auto& box : image.boxes) {
    BoundingBox b;
    b.label = box.label;
    b.x0 = std::clamp(int(std::floor(box.x0 * fx)), 0, target.width - 1);
    b.y0 = std::clamp(int(std::floor(box.y0 * fy)), 0, target.height - 1);
    b.x1 = std::clamp(int(std::ceil(box.x1 * fx)), b.x0 + 1, target.width);
    b.y1 = std::clamp(int(std::ceil(box.y1 * fy)), b.y0 + 1, target.height);
    out.boxes.push_back(b);
  }
  return out;
}

}  // namespace regionmir
