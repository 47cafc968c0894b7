#pragma once

// Retrieval metrics (Recall@K, NMI against a K-means clustering, mAP@1000)
// and structural metrics of the embedding distribution: singular-spectrum
// decay, intra/inter distance ratio, pairwise RBF uniformity and the variance
// of per-class concentration.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include <Eigen/SVD>

#include "nir/common.hpp"
#include "nir/embedding.hpp"

namespace nir {

struct MetricsReport {
  std::map<int, double> recall_at;
  double nmi = 0.0;
  double map_at_1000 = 0.0;
  double spectral_decay = 0.0;
  double pi_density = 0.0;
  double uniformity_g2 = 0.0;
  double concentration_variance = 0.0;
};

namespace detail {

// Neighbor indices of each query sorted by descending cosine similarity,
// self excluded. Ties break on the smaller index for determinism.
inline std::vector<std::vector<int>> neighbor_rankings(const Matrix& data) {
  const int n = static_cast<int>(data.rows());
  const Matrix S = data * data.transpose();
  std::vector<std::vector<int>> ranks(n);
  for (int i = 0; i < n; ++i) {
    ranks[i].reserve(n - 1);
    for (int j = 0; j < n; ++j)
      if (j != i) ranks[i].push_back(j);
    std::sort(ranks[i].begin(), ranks[i].end(), [&](int a, int b) {
      if (S(i, a) != S(i, b)) return S(i, a) > S(i, b);
      return a < b;
    });
  }
  return ranks;
}

}  // namespace detail

inline std::map<int, double> recall_at_k(const EmbeddingBatch& batch,
                                         const std::vector<int>& ks) {
  require(batch.size() >= 2, ErrorCode::EmptyBatch,
          "recall needs at least two samples");
  const auto ranks = detail::neighbor_rankings(batch.data);
  std::map<int, double> out;
  for (int k : ks) {
    int hits = 0;
    for (int i = 0; i < batch.size(); ++i) {
      const int limit = std::min<int>(k, static_cast<int>(ranks[i].size()));
      for (int r = 0; r < limit; ++r)
        if (batch.labels[ranks[i][r]] == batch.labels[i]) {
          ++hits;
          break;
        }
    }
    out[k] = static_cast<double>(hits) / batch.size();
  }
  return out;
}

inline double map_at_1000(const EmbeddingBatch& batch) {
  require(batch.size() >= 2, ErrorCode::EmptyBatch,
          "mAP needs at least two samples");
  const auto ranks = detail::neighbor_rankings(batch.data);
  const int cutoff = 1000;
  double sum_ap = 0.0;
  int queries = 0;
  for (int i = 0; i < batch.size(); ++i) {
    int relevant = 0;
    for (int j = 0; j < batch.size(); ++j)
      if (j != i && batch.labels[j] == batch.labels[i]) ++relevant;
    if (relevant == 0) continue;
    ++queries;
    const int limit = std::min<int>(cutoff, static_cast<int>(ranks[i].size()));
    int found = 0;
    double ap = 0.0;
    for (int r = 0; r < limit; ++r)
      if (batch.labels[ranks[i][r]] == batch.labels[i]) {
        ++found;
        ap += static_cast<double>(found) / (r + 1);
      }
    sum_ap += ap / std::min(relevant, cutoff);
  }
  require(queries > 0, ErrorCode::InsufficientSamples,
          "no query has a relevant neighbor");
  return sum_ap / queries;
}

namespace detail {

struct KMeansResult {
  std::vector<int> assignment;
  double inertia = 0.0;
};

inline KMeansResult kmeans_once(const Matrix& data, int k, Rng& rng) {
  const int n = static_cast<int>(data.rows());
  Matrix centers(k, data.cols());

  // k-means++ seeding
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  int first = static_cast<int>(uniform_index(n, rng));
  centers.row(0) = data.row(first);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const double d = (data.row(i) - centers.row(c - 1)).squaredNorm();
      d2[i] = std::min(d2[i], d);
      total += d2[i];
    }
    int pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng);
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<int>(uniform_index(n, rng));
    }
    centers.row(c) = data.row(pick);
  }

  KMeansResult res;
  res.assignment.assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (data.row(i) - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (best != res.assignment[i]) changed = true;
      res.assignment[i] = best;
    }
    centers.setZero();
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      centers.row(res.assignment[i]) += data.row(i);
      ++counts[res.assignment[i]];
    }
    for (int c = 0; c < k; ++c)
      if (counts[c] > 0) centers.row(c) /= counts[c];
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      // restart an empty cluster at the point farthest from its own center
      int far = 0;
      double far_d = -1.0;
      for (int i = 0; i < n; ++i) {
        if (counts[res.assignment[i]] == 0) continue;
        const double d = (data.row(i) - centers.row(res.assignment[i])).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      centers.row(c) = data.row(far);
      changed = true;
    }
    if (!changed && iter > 0) break;
  }
  res.inertia = 0.0;
  for (int i = 0; i < n; ++i)
    res.inertia += (data.row(i) - centers.row(res.assignment[i])).squaredNorm();
  return res;
}

inline double entropy_from_counts(const std::vector<int>& counts, int n) {
  double h = 0.0;
  for (int c : counts)
    if (c > 0) {
      const double p = static_cast<double>(c) / n;
      h -= p * std::log(p);
    }
  return h;
}

inline double mutual_information(const std::vector<int>& a,
                                 const std::vector<int>& b, int ka, int kb) {
  const int n = static_cast<int>(a.size());
  std::vector<std::vector<int>> joint(ka, std::vector<int>(kb, 0));
  std::vector<int> ca(ka, 0), cb(kb, 0);
  for (int i = 0; i < n; ++i) {
    ++joint[a[i]][b[i]];
    ++ca[a[i]];
    ++cb[b[i]];
  }
  double mi = 0.0;
  for (int i = 0; i < ka; ++i)
    for (int j = 0; j < kb; ++j)
      if (joint[i][j] > 0) {
        const double pij = static_cast<double>(joint[i][j]) / n;
        mi += pij * std::log(pij * n / (static_cast<double>(ca[i]) * cb[j] / n));
      }
  return mi;
}

// Remaps arbitrary label values onto 0..k-1.
inline std::vector<int> compact_labels(const std::vector<int>& labels, int* k) {
  std::map<int, int> ids;
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, inserted] = ids.emplace(labels[i], static_cast<int>(ids.size()));
    out[i] = it->second;
  }
  *k = static_cast<int>(ids.size());
  return out;
}

}  // namespace detail

// Normalized mutual information (arithmetic-mean normalization) between the
// ground-truth labels and the best-of-10 seeded K-means clustering with
// K = number of distinct labels.
inline double nmi(const EmbeddingBatch& batch, std::uint64_t seed = 0) {
  require(batch.size() > 0, ErrorCode::EmptyBatch, "empty batch");
  int k = 0;
  const std::vector<int> truth = detail::compact_labels(batch.labels, &k);
  require(batch.size() >= k, ErrorCode::InsufficientSamples,
          "fewer samples than classes");

  detail::KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < 10; ++r) {
    Rng rng(seed * 1000003ull + r);
    detail::KMeansResult res = detail::kmeans_once(batch.data, k, rng);
    if (res.inertia < best.inertia) best = res;
  }

  std::vector<int> ct(k, 0), cp(k, 0);
  for (int i = 0; i < batch.size(); ++i) {
    ++ct[truth[i]];
    ++cp[best.assignment[i]];
  }
  const double ht = detail::entropy_from_counts(ct, batch.size());
  const double hp = detail::entropy_from_counts(cp, batch.size());
  if (ht == 0.0 && hp == 0.0) return 1.0;
  const double mi = detail::mutual_information(truth, best.assignment, k, k);
  if (mi <= 1e-15) return 0.0;
  return mi / (0.5 * (ht + hp));
}

// KL(uniform || normalized singular spectrum) of the mean-centered embedding
// matrix; near-zero spectra are floored so rank-deficient input stays finite.
inline double spectral_decay(const EmbeddingBatch& batch) {
  require(batch.size() >= 2, ErrorCode::EmptyBatch,
          "spectral decay needs at least two samples");
  Matrix centered = batch.data;
  centered.rowwise() -= batch.data.colwise().mean();
  Eigen::BDCSVD<Matrix> svd(centered);
  Vector sv = svd.singularValues();
  const double floor = 1e-12;
  bool any = false;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) >= floor) any = true;
    sv(i) = std::max(sv(i), floor);
  }
  require(any, ErrorCode::DegenerateSpectrum, "all singular values vanish");
  sv /= sv.sum();
  const double u = 1.0 / static_cast<double>(sv.size());
  double kl = 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) kl += u * std::log(u / sv(i));
  return kl;
}

namespace detail {

struct ClassIndex {
  std::vector<std::vector<int>> members;  // per compact class
  Matrix centers;                         // class centers of mass
};

inline ClassIndex class_index(const EmbeddingBatch& batch) {
  int k = 0;
  const std::vector<int> compact = compact_labels(batch.labels, &k);
  ClassIndex idx;
  idx.members.resize(k);
  for (int i = 0; i < batch.size(); ++i) idx.members[compact[i]].push_back(i);
  idx.centers = Matrix::Zero(k, batch.dim());
  for (int c = 0; c < k; ++c) {
    for (int i : idx.members[c]) idx.centers.row(c) += batch.data.row(i);
    idx.centers.row(c) /= static_cast<double>(idx.members[c].size());
  }
  return idx;
}

inline double mean_center_distance(const Matrix& centers) {
  const int k = static_cast<int>(centers.rows());
  double sum = 0.0;
  int pairs = 0;
  for (int a = 0; a < k; ++a)
    for (int b = a + 1; b < k; ++b) {
      sum += (centers.row(a) - centers.row(b)).norm();
      ++pairs;
    }
  return sum / pairs;
}

}  // namespace detail

// Mean intraclass pairwise distance over mean distance between class centers.
inline double pi_density(const EmbeddingBatch& batch) {
  const auto idx = detail::class_index(batch);
  const int k = static_cast<int>(idx.members.size());
  require(k >= 2, ErrorCode::InsufficientSamples, "need at least two classes");
  double intra = 0.0;
  for (int c = 0; c < k; ++c) {
    const auto& m = idx.members[c];
    require(m.size() >= 2, ErrorCode::InsufficientSamples,
            "every class needs at least two samples");
    double sum = 0.0;
    int pairs = 0;
    for (std::size_t a = 0; a < m.size(); ++a)
      for (std::size_t b = a + 1; b < m.size(); ++b) {
        sum += (batch.data.row(m[a]) - batch.data.row(m[b])).norm();
        ++pairs;
      }
    intra += sum / pairs;
  }
  intra /= k;
  return intra / detail::mean_center_distance(idx.centers);
}

// Mean RBF affinity exp(-2 |u-v|^2) over distinct unordered pairs.
inline double uniformity_g2(const EmbeddingBatch& batch) {
  require(batch.size() >= 2, ErrorCode::EmptyBatch,
          "uniformity needs at least two samples");
  double sum = 0.0;
  int pairs = 0;
  for (int a = 0; a < batch.size(); ++a)
    for (int b = a + 1; b < batch.size(); ++b) {
      sum += std::exp(-2.0 * (batch.data.row(a) - batch.data.row(b)).squaredNorm());
      ++pairs;
    }
  return sum / pairs;
}

// Population variance over classes of (mean member distance to the class
// center) / (mean distance between class centers).
inline double concentration_variance(const EmbeddingBatch& batch) {
  const auto idx = detail::class_index(batch);
  const int k = static_cast<int>(idx.members.size());
  require(k >= 2, ErrorCode::InsufficientSamples, "need at least two classes");
  const double inter = detail::mean_center_distance(idx.centers);
  std::vector<double> kappa(k, 0.0);
  for (int c = 0; c < k; ++c) {
    double sum = 0.0;
    for (int i : idx.members[c])
      sum += (batch.data.row(i) - idx.centers.row(c)).norm();
    kappa[c] = sum / idx.members[c].size() / inter;
  }
  const double mean = std::accumulate(kappa.begin(), kappa.end(), 0.0) / k;
  double var = 0.0;
  for (double v : kappa) var += (v - mean) * (v - mean);
  return var / k;
}

inline MetricsReport evaluate_all(const EmbeddingBatch& batch,
                                  const std::vector<int>& ks = {1, 2, 4, 8},
                                  std::uint64_t nmi_seed = 0) {
  MetricsReport r;
  r.recall_at = recall_at_k(batch, ks);
  r.nmi = nmi(batch, nmi_seed);
  r.map_at_1000 = map_at_1000(batch);
  r.spectral_decay = spectral_decay(batch);
  r.pi_density = pi_density(batch);
  r.uniformity_g2 = uniformity_g2(batch);
  r.concentration_variance = concentration_variance(batch);
  return r;
}

}  // namespace nir
