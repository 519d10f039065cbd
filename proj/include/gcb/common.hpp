#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gcb {

using StateId = int;
using ActionId = int;

/// Raised when an input object violates one or more invariants. Carries every
/// violation found, not only the first.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(std::vector<std::string> violations);
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  std::vector<std::string> violations_;
};

/// An iterative procedure ran out of iterations before reaching its tolerance.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double last_residual, int iterations);
  double last_residual() const { return last_residual_; }
  int iterations() const { return iterations_; }

 private:
  double last_residual_;
  int iterations_;
};

/// Seeded random source. Wraps mt19937_64 with distribution mappings that do
/// not depend on the standard library implementation, so streams are
/// reproducible across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  int uniform_int(int n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Derive an independent child stream.
  Rng split(std::uint64_t stream) { return Rng(derive_seed(engine_(), stream)); }
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// 64-bit FNV-1a, hex encoded. Used for config and content hashes.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace gcb
