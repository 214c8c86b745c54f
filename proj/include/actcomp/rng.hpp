#pragma once

#include <cmath>
#include <cstdint>

#include "actcomp/matrix.hpp"

namespace actcomp {

// Counter-based deterministic generator: output i is the SplitMix64 finalizer
// applied to key + GAMMA*(i+1). Identical seed + identical call sequence gives
// an identical u64 stream on every platform. Gaussians use the Box-Muller
// cosine branch (two uniforms per sample, no cached spare), so streams stay a
// pure function of (key, counter); their bits match across platforms up to
// libm rounding of log/cos.
struct RngState {
  std::uint64_t key = 0;
  std::uint64_t counter = 0;

  RngState() = default;
  explicit RngState(std::uint64_t seed) : key(seed) {}

  static std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

  std::uint64_t next_u64() {
    ++counter;
    return mix64(key + kGamma * counter);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_gaussian() {
    double u1 = 1.0 - next_unit();  // (0, 1]
    double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n) by rejection, exact for any n.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw ContractViolation("RngState::next_below: n must be positive");
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }
};

// Purpose tags keep independent streams from colliding. Every consumer derives
// its stream from (seed, tag, a, b) instead of sharing a sequential state.
namespace stream_tag {
constexpr std::uint64_t model_init = 1;
constexpr std::uint64_t data = 2;
constexpr std::uint64_t batch_sampler = 3;
constexpr std::uint64_t node_compress = 4;
constexpr std::uint64_t analysis = 5;
}  // namespace stream_tag

inline RngState derive_stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0,
                              std::uint64_t b = 0) {
  std::uint64_t h = seed;
  h = RngState::mix64(h + RngState::kGamma * (tag + 1));
  h = RngState::mix64(h + RngState::kGamma * (a + 1));
  h = RngState::mix64(h + RngState::kGamma * (b + 1));
  return RngState(h);
}

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, RngState& rng) {
  if (!(stddev > 0.0)) throw ContractViolation("gaussian_matrix: stddev must be positive");
  Matrix m(rows, cols);
  for (double& x : m.a) x = stddev * rng.next_gaussian();
  return m;
}

}  // namespace actcomp
