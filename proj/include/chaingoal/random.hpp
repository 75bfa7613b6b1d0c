#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "chaingoal/common.hpp"

namespace chaingoal {

// PCG64 (XSL-RR 128/64). Small, fast, and identical output on every platform
// we build for, which is what the reproducibility guarantees lean on. The
// stream id selects an independent sequence for the same seed, so one run
// seed fans out into per-purpose generators (init, sampling, eval, ...)
// without coupling their draw counts.
class Pcg64 {
 public:
  using u128 = unsigned __int128;

  Pcg64() : Pcg64(0xcafef00dd15ea5e5ULL, 0) {}

  Pcg64(std::uint64_t seed, std::uint64_t stream) {
    inc_ = (static_cast<u128>(stream) << 1) | 1u;
    state_ = 0;
    next_u64();
    state_ += (static_cast<u128>(seed) << 64) | seed;
    next_u64();
  }

  std::uint64_t next_u64() {
    u128 old = state_;
    state_ = old * kMult + inc_;
    std::uint64_t xored = static_cast<std::uint64_t>(old >> 64) ^ static_cast<std::uint64_t>(old);
    unsigned rot = static_cast<unsigned>(old >> 122);
    return (xored >> rot) | (xored << ((-rot) & 63u));
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Integer in [0, n). Rejection sampling keeps it exactly uniform.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw NumericError("Pcg64::next_below: n must be positive");
    std::uint64_t threshold = (-n) % n;
    for (;;) {
      std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller. The cached second value keeps draw
  // counts deterministic (exactly one u64 pair per two normals).
  double next_normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(theta);
    have_cached_ = true;
    return r * std::cos(theta);
  }

  // Geometric number of steps ahead for future-goal relabeling: returns
  // delta >= 1 with P(delta = d) = (1 - gamma) * gamma^(d-1), i.e. the
  // success probability is (1 - gamma). Inversion keeps it one draw.
  std::uint64_t next_geometric(double gamma) {
    if (!(gamma > 0.0 && gamma < 1.0))
      throw NumericError("Pcg64::next_geometric: gamma must be in (0, 1)");
    double u = next_double();
    while (u <= 0.0) u = next_double();
    double d = std::floor(std::log(u) / std::log(gamma));
    if (d < 0.0) d = 0.0;
    if (d > 1e12) d = 1e12;
    return static_cast<std::uint64_t>(d) + 1;
  }

 private:
  static constexpr u128 kMult =
      (static_cast<u128>(2549297995355413924ULL) << 64) | 4865540595714422341ULL;
  u128 state_ = 0;
  u128 inc_ = 0;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

// Fixed stream ids. Every consumer of randomness in a run gets its own
// stream derived from the single run seed, so adding draws in one place
// never perturbs another.
namespace rng_stream {
constexpr std::uint64_t kPolicyInit = 1;
constexpr std::uint64_t kValueInit = 2;
constexpr std::uint64_t kDecoderInit = 3;
constexpr std::uint64_t kValueSampling = 4;
constexpr std::uint64_t kPolicySampling = 5;
constexpr std::uint64_t kEval = 6;
constexpr std::uint64_t kDataGen = 7;
}  // namespace rng_stream

inline Pcg64 make_rng(std::uint64_t seed, std::uint64_t stream) { return Pcg64(seed, stream); }

}  // namespace chaingoal
