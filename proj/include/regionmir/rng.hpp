#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace regionmir {

/// Seeded random stream built on std::mt19937_64.
///
/// The engine's output sequence is fixed by the C++ standard. The standard
/// distributions are not, so every transform below is written out here to
/// keep draws identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by rejection (no modulo bias).
  std::uint64_t below(std::uint64_t n);

  /// Standard normal via Box-Muller; the cosine branch only.
  double normal();

  /// Fisher-Yates shuffle of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

  /// Derive an independent stream (used to give sub-tasks their own seeds).
  Rng split() { return Rng(engine_() ^ 0x9E3779B97F4A7C15ULL); }

  /// Engine state as text (std::mt19937_64 stream format).
  std::string state() const;
  void set_state(const std::string& state);

  friend bool operator==(const Rng& a, const Rng& b) {
    return a.seed_ == b.seed_ && a.engine_ == b.engine_;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace regionmir
