#include "doctest.h"
#include "oracles.hpp"
#include "regionmir/encoder.hpp"

using namespace regionmir;

namespace {

TensorD random_image(Index c, Index h, Index w, Rng& rng) {
  TensorD t({c, h, w});
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform();
  return t;
}

// Scalar probe: weighted sum of the feature map with fixed random weights.
struct Probe {
  TensorD weights;
  double operator()(const EncoderParams& p, const TensorD& image) const {
    return encoder_forward(p, image).data.flat().dot(weights.flat());
  }
};

Probe make_probe(const EncoderParams& p, const TensorD& image, Rng& rng) {
  const Shape shape = encoder_forward(p, image).data.shape();
  TensorD w(shape);
  for (Index i = 0; i < w.size(); ++i) w[i] = rng.normal();
  return {w};
}

EncoderParams with_random_biases(EncoderParams p, Rng& rng) {
  for (auto& b : p.biases)
    for (Index i = 0; i < b.size(); ++i) b[i] = 0.1 * rng.normal();
  return p;
}

}  // namespace

TEST_CASE("encoder_init") {
  const EncoderConfig config;
  Rng a(4), b(4);
  const auto pa = encoder_init(config, a);
  CHECK(pa == encoder_init(config, b));
  REQUIRE(pa.kernels.size() == 3);
  CHECK(pa.kernels[0].shape() == Shape{16, 1, 3, 3});
  CHECK(pa.kernels[2].shape() == Shape{64, 32, 3, 3});
  for (const auto& bias : pa.biases) CHECK(bias.flat().isZero(0.0));

  SUBCASE("He variance") {
    EncoderConfig wide;
    wide.in_channels = 8;
    wide.layers = {{256, 1}};
    Rng rng(99);
    const auto p = encoder_init(wide, rng);
    const auto& k = p.kernels[0].flat();
    REQUIRE(k.size() >= 10000);
    const double mean = k.mean();
    const double var = (k.array() - mean).square().sum() / double(k.size() - 1);
    const double expected = 2.0 / (8 * 9);
    CHECK(std::abs(var - expected) / expected < 0.2);
  }
  SUBCASE("bad config") {
    EncoderConfig empty;
    empty.layers.clear();
    CHECK_THROWS_AS(encoder_init(empty, a), ConfigError);
    EncoderConfig stride3;
    stride3.layers = {{4, 3}};
    CHECK_THROWS_AS(encoder_init(stride3, a), ConfigError);
  }
}

TEST_CASE("encoder_forward") {
  const EncoderConfig config;
  Rng rng(6);
  const auto params = encoder_init(config, rng);

  SUBCASE("shape") {
    const auto f = encoder_forward(params, random_image(1, 64, 64, rng));
    CHECK(f.data.shape() == Shape{64, 8, 8});
    CHECK(f.downsample_factor == 8);
    for (Index side : {8, 16, 24, 40, 72}) {
      const auto g = encoder_forward(params, random_image(1, side, 2 * side, rng));
      CHECK(g.height() == side / 8);
      CHECK(g.width() == 2 * side / 8);
    }
  }
  SUBCASE("zero image") {
    CHECK(encoder_forward(params, TensorD({1, 32, 32})).data.flat().isZero(0.0));
  }
  SUBCASE("incompatible size") {
    CHECK_THROWS_AS(encoder_forward(params, TensorD({1, 60, 64})), DimensionError);
    CHECK_THROWS_AS(encoder_forward(params, TensorD({2, 64, 64})), DimensionError);
  }
  SUBCASE("matches per-layer loop oracle") {
    const auto p = with_random_biases(params, rng);
    const TensorD image = random_image(1, 24, 16, rng);
    std::vector<double> x(image.data(), image.data() + image.size());
    int c = 1, h = 24, w = 16;
    for (std::size_t l = 0; l < p.kernels.size(); ++l) {
      const int f = int(p.kernels[l].dim(0));
      int oh = 0, ow = 0;
      auto y = oracle::direct_conv(x, c, h, w,
                                   std::vector<double>(p.kernels[l].data(), p.kernels[l].data() + p.kernels[l].size()),
                                   f, int(config.layers[l].stride), 1, oh, ow);
      for (int ch = 0; ch < f; ++ch)
        for (int i = 0; i < oh * ow; ++i) {
          double& v = y[std::size_t(ch * oh * ow + i)];
          v = std::max(0.0, v + p.biases[l][ch]);
        }
      x = std::move(y);
      c = f, h = oh, w = ow;
    }
    const auto out = encoder_forward(p, image);
    REQUIRE(out.data.size() == Index(x.size()));
    for (Index i = 0; i < out.data.size(); ++i) CHECK(std::abs(out.data[i] - x[std::size_t(i)]) < 1e-12);
  }
  SUBCASE("deterministic") {
    const TensorD image = random_image(1, 32, 32, rng);
    CHECK(encoder_forward(params, image).data == encoder_forward(params, image).data);
  }
}

TEST_CASE("encoder_backward") {
  const EncoderConfig config;

  SUBCASE("zero grad_out") {
    Rng rng(1);
    const auto p = encoder_init(config, rng);
    EncoderCache cache;
    const auto f = encoder_forward(p, random_image(1, 16, 16, rng), &cache);
    const auto g = encoder_backward(p, cache, TensorD(f.data.shape()));
    for (const auto& k : g.kernels) CHECK(k.flat().isZero(0.0));
    for (const auto& b : g.biases) CHECK(b.flat().isZero(0.0));
    CHECK(g.input.flat().isZero(0.0));
    CHECK_THROWS_AS(encoder_backward(p, cache, TensorD({3, 2, 2})), DimensionError);
  }

  SUBCASE("dead units pass no gradient") {
    EncoderConfig one;
    one.layers = {{4, 1}};
    Rng rng(2);
    auto p = encoder_init(one, rng);
    // Strongly negative bias on filter 0 kills it everywhere.
    p.biases[0][0] = -100.0;
    EncoderCache cache;
    const auto f = encoder_forward(p, random_image(1, 6, 6, rng), &cache);
    TensorD g(f.data.shape());
    g.flat().setOnes();
    const auto grads = encoder_backward(p, cache, g);
    CHECK(grads.biases[0][0] == 0.0);
    for (Index i = 0; i < 9; ++i) CHECK(grads.kernels[0][i] == 0.0);
  }

  for (std::uint64_t seed : {11u, 12u, 13u, 14u}) {
    CAPTURE(seed);
    Rng rng(seed);
    const auto p = with_random_biases(encoder_init(config, rng), rng);
    const TensorD image = random_image(1, 8, 8, rng);
    const Probe probe = make_probe(p, image, rng);

    EncoderCache cache;
    encoder_forward(p, image, &cache);
    const auto grads = encoder_backward(p, cache, probe.weights);

    for (std::size_t l = 0; l < p.kernels.size(); ++l) {
      CAPTURE(l);
      const auto fk = finite_diff_grad(
          [&](const TensorD& k) {
            auto q = p;
            q.kernels[l] = k;
            return probe(q, image);
          },
          p.kernels[l]);
      CHECK(relative_error(grads.kernels[l], fk) < 1e-5);
      const auto fb = finite_diff_grad(
          [&](const TensorD& b) {
            auto q = p;
            q.biases[l] = b;
            return probe(q, image);
          },
          p.biases[l]);
      CHECK(relative_error(grads.biases[l], fb) < 1e-5);
    }
    const auto fx = finite_diff_grad([&](const TensorD& x) { return probe(p, x); }, image);
    CHECK(relative_error(grads.input, fx) < 1e-5);
  }
}
