#pragma once

#include <cmath>
#include <cstdint>

namespace ode2vae {

// splitmix64 generator with hand-rolled distributions; deterministic across
// platforms and standard-library versions.
struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }  // [0,1)
  double next_open() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  double next_gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = next_open();
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925287 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  int next_below(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  double next_rademacher() { return (next_u64() & 1u) ? 1.0 : -1.0; }

 private:
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  Rng r(a);
  const uint64_t x = r.next_u64() ^ b;
  Rng r2(x);
  return r2.next_u64();
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  return mix_seed(mix_seed(a, b, c), d);
}

}  // namespace ode2vae
