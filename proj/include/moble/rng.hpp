#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace moble {

// Deterministic random stream. All float/int derivation from the raw 64-bit
// output is done here instead of through std::*_distribution, so a given seed
// produces the same values on any standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0,1) with 24-bit resolution; every value is exactly representable in float.
  float uniform() {
    return static_cast<float>(next_u64() >> 40) * 0x1p-24f;
  }

  // [lo,hi)
  float uniform_range(float lo, float hi) {
    return lo + (hi - lo) * uniform();
  }

  // Integer in [0,n). Multiply-shift mapping; bias is O(n/2^64).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller; second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = static_cast<double>(next_u64() >> 11) * 0x1p-53;
    } while (u1 <= 0.0);
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(idx[i - 1], idx[j]);
    }
    return idx;
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stable derivation of sub-stream seeds (FNV-1a over the tag, mixed with the seed).
inline std::uint64_t derive_seed(std::uint64_t seed, const char* tag) {
  std::uint64_t h = 1469598103934665603ull;
  for (const char* p = tag; *p; ++p) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(*p));
    h *= 1099511628211ull;
  }
  h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return h;
}

}  // namespace moble
