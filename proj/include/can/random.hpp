#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace can {

/// Seeded random source. Every stochastic component takes one of these
/// explicitly; there is no global generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    return dist(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    return dist(engine_);
  }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(engine_);
  }

  bool bernoulli(double p) { return uniform(0.0, 1.0) < p; }

  std::mt19937_64& engine() { return engine_; }

  /// Independent stream seed for item `stream` of a run seeded with `seed`
  /// (splitmix64 finalizer), so per-item generation does not depend on order.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace can
