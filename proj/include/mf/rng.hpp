#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mf {

// Deterministic random stream. std::mt19937_64 has a standard-mandated bit
// sequence; the helpers below replace the std::*_distribution wrappers, whose
// output is implementation-defined, so the same seed yields the same values
// on every platform. The draw counter makes the stream checkpointable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t next_u64() {
    ++count_;
    return engine_();
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n == 0 returns 0.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) return 0;
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Box-Muller without caching: exactly two draws per sample.
  double normal(double mean = 0.0, double sigma = 1.0) {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sigma * r * std::cos(6.283185307179586476925287 * u2);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draw_count() const { return count_; }

  // Rebuilds the stream state recorded by (seed, draw_count).
  static Rng restore(std::uint64_t seed, std::uint64_t draws) {
    Rng r(seed);
    r.engine_.discard(draws);
    r.count_ = draws;
    return r;
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  std::uint64_t count_ = 0;
};

// splitmix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace mf
