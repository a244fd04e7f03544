#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace icre {

/// Deterministic RNG: mt19937_64 plus fixed bit->double mappings so streams
/// do not depend on libstdc++ distribution internals. Serializable for
/// checkpoints.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : seed_(seed), eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  /// Uniform in [0,1), 53-bit mantissa.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be > 0.
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Box-Muller without spare caching (keeps the stream stateless apart
  /// from the engine itself).
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  /// Independent stream derived from (seed, stream_id), e.g. one per
  /// data-loading worker.
  Rng spawn(uint64_t stream_id) const { return Rng(mix(seed_, stream_id)); }

  uint64_t seed() const { return seed_; }

  static uint64_t mix(uint64_t a, uint64_t b) {
    // splitmix64 finalizer over the combined words
    uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::string serialize() const {
    std::ostringstream os;
    os << seed_ << ' ' << eng_;
    return os.str();
  }
  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> seed_ >> eng_;
  }

 private:
  uint64_t seed_ = 0;
  std::mt19937_64 eng_;
};

}  // namespace icre
