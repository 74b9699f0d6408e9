#include "tact/rng.hpp"

#include <cmath>
#include <numbers>

#include "tact/errors.hpp"

namespace tact {

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_normal_;
  }
  // u1 in (0, 1] so the log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * std::numbers::pi * u2;
  cached_normal_ = r * std::sin(theta);
  has_cached_ = true;
  return r * std::cos(theta);
}

int Rng::uniform_int(int n) {
  if (n <= 0) throw ConfigError("Rng::uniform_int: n must be positive, got " + std::to_string(n));
  const std::uint64_t un = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = (UINT64_MAX / un) * un;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<int>(x % un);
}

std::uint64_t Rng::mix(std::uint64_t seed, std::string_view tag, std::uint64_t a, std::uint64_t b) {
  // FNV-1a over the tag, then splitmix64 finalization over the counters.
  std::uint64_t h = 14695981039346656037ull;
  auto absorb = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  absorb(seed);
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  absorb(a);
  absorb(b);
  h += 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  return h ^ (h >> 31);
}

}  // namespace tact
