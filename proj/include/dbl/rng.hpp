#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dbl/matrix.hpp"

namespace dbl {

// Deterministic seeded randomness. The generator is pinned so that a seed
// reproduces the same stream on every platform:
//
//   * state setup: SplitMix64 over the 64-bit seed
//   * stream:      xoshiro256++ (Blackman & Vigna)
//   * uniforms:    top 53 bits scaled by 2^-53, giving doubles in [0,1)
//   * normals:     Marsaglia polar method on the uniform stream
//   * shuffles:    Fisher-Yates with modulo rejection sampling
//
// The integer stream is bit-exact everywhere; the float transforms involve
// only IEEE arithmetic plus sqrt/log from libm.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : seed_(seed) {
    uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via the polar method.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    have_spare_ = true;
    return u * f;
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n) by rejection, bias-free.
  uint64_t index(uint64_t n) {
    if (n == 0) throw shape_error("RngStream::index: empty range");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  Matrix uniform_matrix(int rows, int cols, double lo, double hi) {
    Matrix m(rows, cols);
    for (auto& v : m.raw()) v = uniform(lo, hi);
    return m;
  }

  Matrix normal_matrix(int rows, int cols, double mean = 0.0, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (auto& v : m.raw()) v = normal(mean, stddev);
    return m;
  }

  // Derive an independent child stream from a label. All sub-seeding in the
  // project goes through this, so a run is a pure function of its master seed.
  RngStream fork(const std::string& label) const {
    uint64_t h = 14695981039346656037ull;  // FNV-1a 64
    for (unsigned char c : label) {
      h ^= c;
      h *= 1099511628211ull;
    }
    uint64_t x = seed_ ^ h;
    return RngStream(splitmix64(x));
  }

  RngStream fork(const std::string& label, uint64_t n) const {
    return fork(label + "#" + std::to_string(n));
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t seed_;
  uint64_t state_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dbl
