#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ebats {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Numerical breakdown that should not occur under the engine's own
/// invariants (e.g. an indefinite covariance that jitter cannot repair).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs that do not belong together (model/stats hash mismatch etc.).
class InputMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration values or unreadable config files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A constructive generator (oracle model, corpus) exhausted its retries.
class GenerationError : public std::runtime_error {
 public:
  GenerationError(const std::string& what, int attempts)
      : std::runtime_error(what), attempts_used(attempts) {}
  int attempts_used;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent sub-seed from a base seed and a stream index.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

/// Deterministic random source. Wraps mt19937_64 but generates normals
/// itself (Box-Muller) because std::normal_distribution is
/// implementation-defined and would break seed-pinned fixtures.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<std::int64_t>(gen_() % span);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so log() stays finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Vector normal_vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  /// Uniform in the d-ball of the given radius.
  Vector ball(Eigen::Index d, double radius) {
    Vector dir = normal_vector(d);
    const double n = dir.norm();
    if (n == 0.0) return Vector::Zero(d);
    const double r = radius * std::pow(uniform(), 1.0 / static_cast<double>(d));
    return dir * (r / n);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Compensated (Kahan) accumulator; keeps corpus-level reductions stable
/// to ~1e-10 regardless of summation order.
class KahanSum {
 public:
  void add(double x) {
    const double y = x - c_;
    const double t = s_ + y;
    c_ = (t - s_) - y;
    s_ = t;
  }
  double value() const { return s_; }

 private:
  double s_ = 0.0;
  double c_ = 0.0;
};

class KahanVector {
 public:
  explicit KahanVector(Eigen::Index n)
      : s_(Vector::Zero(n)), c_(Vector::Zero(n)) {}

  void add(const Vector& x) {
    for (Eigen::Index i = 0; i < s_.size(); ++i) {
      const double y = x(i) - c_(i);
      const double t = s_(i) + y;
      c_(i) = (t - s_(i)) - y;
      s_(i) = t;
    }
  }
  const Vector& value() const { return s_; }

 private:
  Vector s_;
  Vector c_;
};

inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

}  // namespace ebats
