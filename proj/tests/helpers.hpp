#pragma once

// Shared test utilities: finite differencing and random instances.

#include <functional>

#include "nir/embedding.hpp"

namespace nirtest {

using nir::Matrix;
using nir::Rng;
using nir::Vector;

// Central-difference gradient of a scalar function of a matrix, every entry.
inline Matrix fd_grad(const std::function<double(const Matrix&)>& f,
                      const Matrix& x, double step = 1e-6) {
  Matrix g(x.rows(), x.cols());
  Matrix xp = x;
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) {
      xp(i, j) = x(i, j) + step;
      const double up = f(xp);
      xp(i, j) = x(i, j) - step;
      const double dn = f(xp);
      xp(i, j) = x(i, j);
      g(i, j) = (up - dn) / (2.0 * step);
    }
  return g;
}

inline double max_rel_err(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) {
      const double denom = std::max({std::abs(a(i, j)), std::abs(b(i, j)), 1e-6});
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
    }
  return worst;
}

inline nir::EmbeddingBatch random_batch(int n, int num_classes, int dim,
                                        std::uint64_t seed) {
  Rng rng(seed);
  nir::EmbeddingBatch b;
  b.data = nir::l2_normalize_rows(nir::gaussian_matrix(n, dim, rng));
  b.labels.resize(n);
  for (int i = 0; i < n; ++i) b.labels[i] = i % num_classes;
  return b;
}

}  // namespace nirtest
