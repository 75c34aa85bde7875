#pragma once

#include <cstdint>
#include <cmath>
#include <random>

namespace cml {

// Domain tags keep the streams of different consumers disjoint even when
// they share a master seed and an index.
enum class StreamDomain : std::uint32_t {
  trajectory = 1,
  ulam_cell = 2,
  centering = 3,
  green_kubo = 4,
  radius_start = 5,
  coupling_probe = 6,
  bv_suite = 7,
  generic = 99,
};

// Random stream for one unit of work (a trajectory, an Ulam cell, ...).
// The engine state is a pure function of (master seed, index, domain), so
// results never depend on which worker ran the unit or in what order.
class Stream {
 public:
  Stream(std::uint64_t master_seed, std::uint64_t index,
         StreamDomain domain = StreamDomain::generic) {
    std::seed_seq seq{static_cast<std::uint32_t>(master_seed),
                      static_cast<std::uint32_t>(master_seed >> 32),
                      static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32),
                      static_cast<std::uint32_t>(domain)};
    engine_.seed(seq);
  }

  std::uint64_t bits() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits; independent of the standard
  // library's distribution implementations.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (one draw per call, second value dropped).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : bits() % n; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cml
