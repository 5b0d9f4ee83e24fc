#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>

#include <Eigen/Dense>

namespace csa {

// Counter-based generator: output i is mix(seed + i*gamma), so streams can be
// keyed, split, and replayed deterministically on any platform.  Normal draws
// use Box-Muller on top of it because the distribution adaptors in <random>
// are implementation-defined and would break cross-platform reproducibility.
// The generator is named and versioned; artifacts that depend on a stream
// record kRngName so a change here is an observable format change.
inline constexpr const char* kRngName = "splitmix64-boxmuller-v1";

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // splitmix64 finalizer (Steele, Lea & Flood 2014).
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  // Uniform on (0,1]; never 0 so log() below is safe.
  double next_unit() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Unbiased uniform integer in [0, n) via rejection.
  std::uint64_t uniform_below(std::uint64_t n) {
    assert(n > 0);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = next_unit();
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
    return m;
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Deterministic substream key: replication seeds, per-k subset seeds, etc.
// Distinct tags give decorrelated streams under the same master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag) {
  return Rng::mix(master + 0x9e3779b97f4a7c15ULL * (tag + 1));
}

}  // namespace csa
