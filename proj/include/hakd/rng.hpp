#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace hakd {

// Deterministic, implementation-independent random stream. std::mt19937_64
// supplies the bits; uniform/normal conversion is done by hand so the byte
// stream never depends on the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(split_mix(seed)) {}

  std::uint64_t next_u64() {
    // xorshift* keeps the generator header-only and fully portable.
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545F4914F6CDD1DULL;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  bool coin() { return (next_u64() & 1ULL) != 0; }

  // Box-Muller; consumes two uniforms per pair, caches the second draw.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Derives an independent stream for a named phase of a run, so adding or
  // removing one phase cannot shift the draws seen by another.
  static std::uint64_t derive(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = 1469598103934665603ULL ^ seed;
    for (char c : tag) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 1099511628211ULL;
    }
    return split_mix(h);
  }

 private:
  static std::uint64_t split_mix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    x = x ^ (x >> 31);
    return x != 0 ? x : 0x4D595DF4D0F33173ULL;  // xorshift state must be nonzero
  }

  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace hakd
