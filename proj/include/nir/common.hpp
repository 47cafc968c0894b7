#pragma once

// Shared scalar/matrix aliases, error taxonomy and seeded RNG helpers used
// across the library.

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nir {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

enum class ErrorCode {
  ZeroVector,
  DimensionMismatch,
  NoNegativeProxies,
  EmptyBatch,
  MissingProxy,
  EmptySynthetic,
  ShapeMismatch,
  NonFiniteGradient,
  NonFiniteLoss,
  InsufficientClasses,
  InsufficientSamples,
  DegenerateSpectrum,
  InvalidSpec,
  VersionMismatch,
  ConfigError,
  IoError,
};

inline const char* error_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NoNegativeProxies: return "NoNegativeProxies";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::MissingProxy: return "MissingProxy";
    case ErrorCode::EmptySynthetic: return "EmptySynthetic";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::InsufficientClasses: return "InsufficientClasses";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::DegenerateSpectrum: return "DegenerateSpectrum";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_name(code)) + ": " + what),
        code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

inline Matrix gaussian_matrix(int rows, int cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

inline Vector gaussian_vector(int size, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(size);
  for (int i = 0; i < size; ++i) v(i) = normal(rng);
  return v;
}

// Uniform draw in [0, bound) by rejection. Explicit so that serialized models
// regenerate identical permutations regardless of the standard library.
inline std::uint64_t uniform_index(std::uint64_t bound, Rng& rng) {
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() -
      std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % bound;
}

inline std::vector<int> random_permutation(int n, Rng& rng) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const auto j = uniform_index(static_cast<std::uint64_t>(i) + 1, rng);
    std::swap(p[i], p[static_cast<int>(j)]);
  }
  return p;
}

inline std::uint64_t fnv1a64(const void* data, std::size_t size) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// log(1 + e^x) without overflow.
inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace nir
