#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace apcnet {

/// splitmix64 step; used for seeding and for deriving sub-stream seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Deterministically derives an independent stream seed from a root seed and
/// a path of integers (e.g. {kTrajectoryStream, row}).  The same (seed, path)
/// always yields the same stream, regardless of call order elsewhere.
inline std::uint64_t derive_seed(std::uint64_t root,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = root;
  (void)splitmix64(s);
  for (std::uint64_t p : path) {
    s ^= 0x9e3779b97f4a7c15ULL + p;
    (void)splitmix64(s);
  }
  return splitmix64(s);
}

/// xoshiro256++ with Box-Muller normals.  Self-contained so that streams are
/// bit-reproducible and cheap to split per trajectory / per dropout pass.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Bernoulli(p_true).
  bool bernoulli(double p_true) { return uniform() < p_true; }

  /// Standard normal via Box-Muller; generates pairs and caches one.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    // u1 in (0, 1] so the log is finite.
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4];
  double cached_ = 0.0;
  bool has_cached_ = false;
};

// Stream tags for derive_seed paths, so independent uses never collide.
namespace stream {
inline constexpr std::uint64_t kTrajectory = 1;
inline constexpr std::uint64_t kNetInit = 2;
inline constexpr std::uint64_t kDropoutEpoch = 3;
inline constexpr std::uint64_t kDropoutPass = 4;
inline constexpr std::uint64_t kTrainData = 5;
inline constexpr std::uint64_t kTestData = 6;
inline constexpr std::uint64_t kActiveStep = 7;
}  // namespace stream

}  // namespace apcnet
