#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmtr {

// Dense row-major doubles everywhere. Vectors are Nx1 or 1xN matrices,
// scalars are 1x1, so every value on the tape carries an explicit shape.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline std::string shape_str(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// Sum whose result depends only on the multiset of addends, not on their
// order: values are sorted before accumulation. Used by the solver-side
// reductions so that relabeling association-graph nodes permutes outputs
// bit-exactly.
double order_invariant_sum(std::vector<double>& buf);

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  int epoch;
  int batch;
  DivergenceError(int e, int b)
      : std::runtime_error("training diverged (non-finite loss) at epoch " + std::to_string(e) +
                           ", batch " + std::to_string(b)),
        epoch(e),
        batch(b) {}
};

// Deterministic RNG wrapper. All distribution transforms are spelled out
// here instead of using std::*_distribution, whose output is
// implementation-defined; seeded streams are identical across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int n) {  // in [0, n)
    return static_cast<int>(eng_() % static_cast<std::uint64_t>(n));
  }

  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  // normal(0, std) truncated to [-2 std, 2 std]
  double trunc_normal(double stddev) {
    while (true) {
      const double x = normal();
      if (std::abs(x) <= 2.0) return x * stddev;
    }
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
      const int j = uniform_int(i + 1);
      std::swap(p[i], p[j]);
    }
    return p;
  }

  // Derive an independent per-instance stream from a base seed.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 eng_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace gmtr
