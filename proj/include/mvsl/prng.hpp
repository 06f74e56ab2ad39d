// Portable deterministic PRNG.
//
// Weight initialization and data synthesis must produce bit-identical streams
// on every platform for a given seed, so nothing here may touch libm or the
// standard <random> distributions (their rounding is implementation-defined).
// SplitMix64 supplies the integer stream; uniforms come from the 53-bit
// mantissa ladder; normals are synthesized as (sum of 12 uniforms - 6), which
// is exact in binary64 given exact uniforms and close enough to Gaussian for
// init/noise purposes (tails clipped at +-6 sigma).
#pragma once

#include <cstdint>
#include <vector>

namespace mvsl {

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Approximate standard normal: Irwin-Hall with n=12 recentred at zero.
  double next_normal() {
    double s = 0.0;
    for (int i = 0; i < 12; ++i) s += next_uniform();
    return s - 6.0;
  }

  // Uniform integer in [0, n). n must be >= 1. Modulo bias is ~n/2^64 and
  // irrelevant at desk scale; what matters is portability.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  // In-place Fisher-Yates shuffle with a pinned visitation order.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

// Decorrelated child seed for a named sub-stream (per-tensor, per-epoch, ...).
// Hashing both operands through the generator keeps streams independent of
// the order in which callers draw from the parent.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  SplitMix64 g(seed ^ (0xA0761D6478BD642FULL * (stream + 1)));
  g.next_u64();
  return g.next_u64();
}

}  // namespace mvsl
