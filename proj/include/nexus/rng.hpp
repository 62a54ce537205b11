#pragma once
#include <cmath>
#include <cstdint>

namespace nexus {

// Counter-style generator: the whole state is one u64, so snapshots are a
// single number and streams can be forked per sample with split().
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    // splitmix64 (Steele et al.)
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

  // Box-Muller; the sine branch is discarded so the state stays a plain counter.
  double normal() {
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Independent stream for item i (per-sample seeds in dataset generation).
  Rng split(uint64_t i) const {
    Rng r(state_ ^ (0x9e3779b97f4a7c15ull * (i + 1)));
    r.next_u64();
    return r;
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

 private:
  uint64_t state_;
};

}  // namespace nexus
