#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace tact {

// Deterministic random source. All distributions are implemented on top of
// the raw mt19937_64 stream (the standard distributions are implementation
// defined), so a seed produces the same values on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the pair's second value is cached.
  double normal();

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  int uniform_int(int n);

  bool bernoulli(double p) { return uniform() < p; }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives a substream seed from (seed, tag, counters); used so that every
  // stochastic component of a run owns an independent, resumable stream.
  static std::uint64_t mix(std::uint64_t seed, std::string_view tag,
                           std::uint64_t a = 0, std::uint64_t b = 0);

 private:
  std::mt19937_64 engine_;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace tact
