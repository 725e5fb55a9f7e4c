#pragma once
#include <cmath>
#include <cstdint>

namespace cqa {

// Counter-based PRNG built on the splitmix64 finalizer. Each draw hashes
// (key, counter), so streams can be split without sharing state and the
// sequence is identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() {
    std::uint64_t z = key_ + 0x9e3779b97f4a7c15ULL * ++counter_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Derives an independent stream; child draws never collide with the parent's.
  Rng split(std::uint64_t stream) const {
    Rng child(0);
    child.key_ = mix(mix(key_ ^ 0xa0761d6478bd642fULL) + stream);
    return child;
  }

  double next_double() {  // uniform [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  double normal(double mean = 0.0, double sigma = 1.0) {
    // Box-Muller; the unused second deviate is discarded.
    double u1 = next_double(), u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sigma * r * std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace cqa
