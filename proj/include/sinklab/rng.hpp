#pragma once

#include <cstdint>
#include <random>

namespace sinklab {

// splitmix64 finaliser; used to decorrelate user seeds before they reach the
// Mersenne Twister so that seeds s and s+1 give unrelated streams.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic PRNG stream. std::mt19937_64 output is fixed by the standard;
// the mapping to doubles is done here (top 53 bits) rather than through
// std::uniform_real_distribution, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  // Uniform in [0, 1).
  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }
  // Uniform integer in [0, n); n must be > 0.
  std::uint64_t below(std::uint64_t n) { return engine_() % n; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace sinklab
