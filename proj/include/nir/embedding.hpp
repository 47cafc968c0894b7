#pragma once

// Embedding-space data model: batches of unit-norm representations, one
// learnable proxy per class, cosine similarity and the von Mises-Fisher
// mixture posterior that proxy objectives implicitly optimize.

#include <cmath>
#include <vector>

#include "nir/common.hpp"

namespace nir {

// n x d feature rows with integer class labels. Rows are expected to live on
// the unit hypersphere; `normalize_rows` enforces that.
struct EmbeddingBatch {
  Matrix data;
  std::vector<int> labels;

  int size() const { return static_cast<int>(data.rows()); }
  int dim() const { return static_cast<int>(data.cols()); }
};

// One d-dimensional proxy per class id 0..C-1, rows kept unit-norm.
struct ProxySet {
  Matrix proxies;
  std::vector<int> class_ids;

  int num_classes() const { return static_cast<int>(proxies.rows()); }
  int dim() const { return static_cast<int>(proxies.cols()); }

  // i.i.d. standard normal rows, l2-normalized.
  static ProxySet random(int num_classes, int dim, std::uint64_t seed) {
    require(num_classes >= 1, ErrorCode::InvalidSpec, "need at least one class");
    Rng rng(seed);
    ProxySet p;
    p.proxies = gaussian_matrix(num_classes, dim, rng);
    for (int c = 0; c < num_classes; ++c) {
      p.proxies.row(c) /= p.proxies.row(c).norm();
      p.class_ids.push_back(c);
    }
    return p;
  }

  void renormalize() {
    for (int c = 0; c < num_classes(); ++c) {
      const double n = proxies.row(c).norm();
      require(n >= 1e-12, ErrorCode::ZeroVector, "proxy row collapsed to zero");
      proxies.row(c) /= n;
    }
  }
};

// Class-independent concentration; the vMF normalizer cancels in the mixture
// posterior and is never evaluated.
struct VmfConfig {
  double kappa = 1.0;
};

inline Vector l2_normalize(const Vector& v) {
  const double n = v.norm();
  require(n >= 1e-12, ErrorCode::ZeroVector, "cannot normalize near-zero vector");
  return v / n;
}

// Backward of row-wise normalization psi = v/|v|: projects the upstream
// gradient onto the tangent space and rescales by the raw norm.
inline Matrix l2_normalize_rows_backward(const Matrix& raw,
                                         const Matrix& normalized,
                                         const Matrix& g_norm) {
  Matrix g_raw(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const double norm = raw.row(i).norm();
    const double dot = normalized.row(i).dot(g_norm.row(i));
    g_raw.row(i) = (g_norm.row(i) - dot * normalized.row(i)) / norm;
  }
  return g_raw;
}

inline Matrix l2_normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    require(n >= 1e-12, ErrorCode::ZeroVector, "cannot normalize near-zero row");
    out.row(i) /= n;
  }
  return out;
}

inline bool rows_unit_norm(const Matrix& m, double tol = 1e-6) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    if (std::abs(m.row(i).norm() - 1.0) > tol) return false;
  return true;
}

// Pairwise cosine similarity; rows of a and b must already be unit-norm, so
// this is a plain inner product.
inline Matrix cosine_similarity_matrix(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), ErrorCode::DimensionMismatch,
          "column counts differ");
  return a * b.transpose();
}

// Mixture posterior p(rho | psi) under class-independent kappa and uniform
// mixture weights: softmax over kappa * s(psi, rho).
inline Vector vmf_posterior(const Vector& psi, const ProxySet& proxies,
                            const VmfConfig& cfg) {
  require(proxies.dim() == psi.size(), ErrorCode::DimensionMismatch,
          "proxy/embedding dimensionality differs");
  Vector logits = cfg.kappa * (proxies.proxies * psi);
  const double m = logits.maxCoeff();
  Vector p = (logits.array() - m).exp();
  return p / p.sum();
}

inline void check_labels_have_proxies(const EmbeddingBatch& batch,
                                      const ProxySet& proxies) {
  // losses index proxy rows by label, so row y must carry class id y
  for (int y : batch.labels)
    require(y >= 0 && y < proxies.num_classes() && proxies.class_ids[y] == y,
            ErrorCode::MissingProxy,
            "label " + std::to_string(y) + " has no proxy");
}

}  // namespace nir
