#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "regionmir/rng.hpp"
#include "regionmir/tensor.hpp"

namespace regionmir {

/// Axis-aligned box in pixel coordinates; x1/y1 exclusive.
struct BoundingBox {
  int label = 0;
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const noexcept { return x1 - x0; }
  int height() const noexcept { return y1 - y0; }

  /// 0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height.
  bool fits(int image_height, int image_width) const noexcept {
    return 0 <= x0 && x0 < x1 && x1 <= image_width && 0 <= y0 && y0 < y1 && y1 <= image_height;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Grayscale image in [0, 1] plus at most one box per anatomy class.
struct AnnotatedImage {
  std::string id;
  RowMatrixXd pixels;  // H×W
  std::vector<BoundingBox> boxes;

  int height() const noexcept { return int(pixels.rows()); }
  int width() const noexcept { return int(pixels.cols()); }

  friend bool operator==(const AnnotatedImage& a, const AnnotatedImage& b) {
    return a.id == b.id && a.pixels.rows() == b.pixels.rows() && a.pixels.cols() == b.pixels.cols() &&
           a.pixels == b.pixels && a.boxes == b.boxes;
  }
};

struct ImageSize {
  int height = 64;
  int width = 64;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

struct DatasetManifest {
  int num_classes = 0;
  std::vector<std::string> class_names;
  ImageSize image_size;
  std::vector<AnnotatedImage> samples;

  std::size_t size() const noexcept { return samples.size(); }

  /// Subset by index, preserving the given order.
  DatasetManifest subset(const std::vector<std::size_t>& indices) const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Number of distinct shapes the synthetic generator can draw.
inline constexpr int kSyntheticArchetypes = 8;

/// Throws LoadError on the first violated invariant (box bounds, duplicate
/// or out-of-range labels, image size mismatch, too few classes).
void validate_manifest(const DatasetManifest& manifest);

DatasetManifest load_dataset(const std::filesystem::path& root);

/// Writes root/manifest.json and root/images/<id>.pgm (P5, maxval 255).
void save_dataset(const DatasetManifest& manifest, const std::filesystem::path& root);

/// Quantize to the 8-bit grid the PGM files store.
RowMatrixXd quantize_8bit(const RowMatrixXd& pixels);

/// Binary PGM (P5, maxval 255) helpers; pixels are normalized to [0, 1].
RowMatrixXd read_pgm(const std::filesystem::path& path);
void write_pgm(const RowMatrixXd& pixels, const std::filesystem::path& path);

/// Name of the synthetic archetype drawn for a class id.
std::string archetype_name(int label);

/// Synthetic "anatomy" images: class k is a fixed shape at a fixed home
/// position with per-sample jitter, class intensity and additive noise.
DatasetManifest gen_synthetic(Rng& rng, int n, int num_classes, ImageSize size);

/// Noise-free, unquantized mask of one class's shape for the given sample
/// parameters; exposed so tests can check box tightness.
struct ShapePlacement {
  int label = 0;
  int center_x = 0;
  int center_y = 0;
  int half_extent = 0;
  double intensity = 0.0;
};
RowMatrixXd render_shape(const ShapePlacement& placement, ImageSize size);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded k-fold partition; test folds have sizes differing by at most one.
std::vector<Fold> split_folds(std::size_t n, int folds, Rng& rng);
inline std::vector<Fold> split_folds(const DatasetManifest& manifest, int folds, Rng& rng) {
  return split_folds(manifest.size(), folds, rng);
}

/// Bilinear resample (half-pixel centers); boxes scale with outward rounding.
AnnotatedImage resize(const AnnotatedImage& image, ImageSize target);

}  // namespace regionmir
