#pragma once

#include <cstdint>
#include <string_view>

namespace catx {

// Deterministic counter-style RNG (splitmix64). Every random draw in the
// project flows through this so that training runs, checkpoint resumes and
// re-generated datasets are bit-reproducible from a single master seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; draws two uniforms per call, no caching.
  double normal();

  // Normal(0, stddev) resampled until |z| <= clip * stddev.
  double trunc_normal(double stddev, double clip = 2.0);

  int index(int n) { return int(next_u64() % uint64_t(n)); }

  // Derive an independent stream seed from parts.
  static uint64_t mix(uint64_t a, uint64_t b);
  static uint64_t hash_str(std::string_view s);

 private:
  uint64_t state_;
};

}  // namespace catx
