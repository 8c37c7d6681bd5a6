#pragma once

#include <cmath>
#include <cstdint>

namespace skelnet {

// SplitMix64 finalizer; full-period bijection on 64-bit words.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based random stream (SplitMix64).  A stream is identified by its
/// 64-bit state; `derive(key)` yields a statistically independent child
/// stream for each distinct key, so consumers (per-node weight matrices,
/// data samplers, ...) can be seeded reproducibly and independently of the
/// order in which they draw.
class RngStream {
 public:
  RngStream() : RngStream(0) {}
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  RngStream derive(std::uint64_t key) const {
    return RngStream(mix64(state_ + 0x9e3779b97f4a7c15ULL * (2 * key + 1)));
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_);
  }

  // Uniform in [0,1), 53-bit resolution.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; second variate cached.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_unit();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = next_unit();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Stream-derivation keys.  Weight streams are keyed by the internal node's
// topological index first, then by role; non-weight consumers use the
// high-bit reserved keys so they can never collide with a node index.
namespace rng_role {
inline constexpr std::uint64_t kInputWeights = 0;
inline constexpr std::uint64_t kInternalWeights = 1;
inline constexpr std::uint64_t kBias = 2;
inline constexpr std::uint64_t kPrediction = 3;
inline constexpr std::uint64_t kTrainData = (1ULL << 40) + 0;
inline constexpr std::uint64_t kEvalData = (1ULL << 40) + 1;
inline constexpr std::uint64_t kProbeData = (1ULL << 40) + 2;
inline constexpr std::uint64_t kTask = (1ULL << 40) + 3;
}  // namespace rng_role

}  // namespace skelnet
