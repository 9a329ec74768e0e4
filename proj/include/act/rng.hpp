#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace act {

namespace detail {
inline uint64_t splitmix_bump(uint64_t& s) {
  s += 0x9E3779B97F4A7C15ULL;
  uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
}  // namespace detail

// Counter-based splitmix64 stream. The entire state is one u64, which keeps
// checkpoint serialization and per-sample stream derivation trivial, and the
// output sequence does not depend on the standard library implementation.
class Rng {
 public:
  Rng() : state_(0) {}
  explicit Rng(uint64_t seed) : state_(seed) {
    // burn one step so that nearby seeds decorrelate
    (void)next_u64();
  }

  uint64_t next_u64() { return detail::splitmix_bump(state_); }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in (0,1), never exactly 0 or 1
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 12) + 0.5) * 0x1.0p-52;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased-enough integer in [0, n)
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double gumbel() { return -std::log(-std::log(uniform_open())); }

 private:
  uint64_t state_;
};

// Derives an independent stream from (seed, ids...). Used so that the result
// of a run never depends on how work is batched or ordered.
inline Rng derive_rng(uint64_t seed, std::initializer_list<uint64_t> ids) {
  uint64_t s = seed;
  (void)detail::splitmix_bump(s);
  for (uint64_t id : ids) {
    s ^= id + 0x9E3779B97F4A7C15ULL + (s << 6) + (s >> 2);
    (void)detail::splitmix_bump(s);
  }
  return Rng(s);
}

}  // namespace act
