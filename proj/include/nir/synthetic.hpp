#pragma once

// Desk-scale benchmark generator: classes are mixtures of von Mises-Fisher
// submodes on a low-dimensional sphere, lifted linearly into an ambient
// feature space with additive noise, and split into disjoint train/test
// class sets. Also the plain-text dataset table format.

#include <cinttypes>
#include <cstdio>
#include <string>
#include <vector>

#include "nir/common.hpp"
#include "nir/embedding.hpp"

namespace nir {

struct SyntheticSpec {
  int num_classes = 10;
  int samples_per_class = 60;
  int ambient_dim = 32;
  int sphere_dim = 16;
  int submodes_per_class = 3;
  double within_submode_kappa = 12.0;
  double submode_spread = 1.0;
  double noise = 0.01;
  double split = 0.5;  // fraction of classes held out for zero-shot testing
  std::uint64_t seed = 0;

  void validate() const {
    require(num_classes >= 1 && samples_per_class >= 1 && ambient_dim >= 1 &&
                sphere_dim >= 2 && submodes_per_class >= 1,
            ErrorCode::InvalidSpec, "all synthetic counts must be positive");
    require(within_submode_kappa > 0.0, ErrorCode::InvalidSpec,
            "within_submode_kappa must be positive");
    require(split >= 0.0 && split < 1.0, ErrorCode::InvalidSpec,
            "split fraction must lie in [0, 1)");
    require(noise >= 0.0 && submode_spread >= 0.0, ErrorCode::InvalidSpec,
            "noise and spread must be non-negative");
  }
};

// Draws from vMF(mu, kappa) with the classic envelope-rejection scheme for
// the cosine component and a uniform tangent direction.
inline Matrix sample_vmf(const Vector& mu, double kappa, int n, Rng& rng) {
  require(kappa > 0.0, ErrorCode::InvalidSpec, "kappa must be positive");
  const int d = static_cast<int>(mu.size());
  require(d >= 2, ErrorCode::InvalidSpec, "vMF needs dimension >= 2");
  const Vector mu_n = l2_normalize(mu);

  const double dm1 = d - 1.0;
  const double b = (-2.0 * kappa + std::sqrt(4.0 * kappa * kappa + dm1 * dm1)) / dm1;
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = kappa * x0 + dm1 * std::log(1.0 - x0 * x0);

  std::gamma_distribution<double> gamma(dm1 / 2.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix out(n, d);
  for (int i = 0; i < n; ++i) {
    double w = 0.0;
    for (;;) {
      const double g1 = gamma(rng);
      const double g2 = gamma(rng);
      const double z = g1 / (g1 + g2);
      const double u = unit(rng);
      w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
      if (kappa * w + dm1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
    }
    Vector g(d);
    for (int j = 0; j < d; ++j) g(j) = normal(rng);
    Vector tangent = g - g.dot(mu_n) * mu_n;
    const double tn = tangent.norm();
    if (tn < 1e-12) {
      // astronomically unlikely; fall back to any orthogonal direction
      tangent = Vector::Zero(d);
      tangent((std::abs(mu_n(0)) < 0.9) ? 0 : 1) = 1.0;
      tangent -= tangent.dot(mu_n) * mu_n;
      tangent /= tangent.norm();
    } else {
      tangent /= tn;
    }
    out.row(i) = (w * mu_n + std::sqrt(std::max(0.0, 1.0 - w * w)) * tangent)
                     .transpose();
  }
  return out;
}

struct RawDataset {
  Matrix features;
  std::vector<int> labels;

  int size() const { return static_cast<int>(features.rows()); }
  int dim() const { return static_cast<int>(features.cols()); }
};

struct Benchmark {
  RawDataset train, test;
  // generator internals kept for sanity checks: pre-lift on-sphere points in
  // train-then-test row order and their global submode index
  Matrix sphere_points;
  std::vector<int> submode_ids;
};

inline Benchmark make_benchmark(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  const int num_test = static_cast<int>(spec.split * spec.num_classes + 0.5);
  const int num_train = spec.num_classes - num_test;
  require(num_train >= 1, ErrorCode::InvalidSpec, "split leaves no train classes");

  // per-class submode means around a random class center
  std::vector<Matrix> submode_means(spec.num_classes);
  for (int cl = 0; cl < spec.num_classes; ++cl) {
    const Vector center = l2_normalize(gaussian_vector(spec.sphere_dim, rng));
    Matrix means(spec.submodes_per_class, spec.sphere_dim);
    for (int m = 0; m < spec.submodes_per_class; ++m)
      means.row(m) =
          l2_normalize(center + spec.submode_spread *
                                    gaussian_vector(spec.sphere_dim, rng))
              .transpose();
    submode_means[cl] = means;
  }

  const int total = spec.num_classes * spec.samples_per_class;
  Matrix sphere(total, spec.sphere_dim);
  std::vector<int> labels(total), submodes(total);
  int row = 0;
  for (int cl = 0; cl < spec.num_classes; ++cl)
    for (int i = 0; i < spec.samples_per_class; ++i) {
      const int m = static_cast<int>(
          uniform_index(static_cast<std::uint64_t>(spec.submodes_per_class), rng));
      sphere.row(row) =
          sample_vmf(submode_means[cl].row(m).transpose(),
                     spec.within_submode_kappa, 1, rng)
              .row(0);
      labels[row] = cl;
      submodes[row] = cl * spec.submodes_per_class + m;
      ++row;
    }

  // fixed random linear lift plus small noise
  const Matrix lift = gaussian_matrix(spec.ambient_dim, spec.sphere_dim, rng) /
                      std::sqrt(static_cast<double>(spec.sphere_dim));
  Matrix features = sphere * lift.transpose();
  if (spec.noise > 0.0)
    features += spec.noise * gaussian_matrix(total, spec.ambient_dim, rng);

  Benchmark bench;
  std::vector<int> order;  // train rows first, then test rows
  for (int cl = 0; cl < spec.num_classes; ++cl)
    if (cl < num_train)
      for (int i = 0; i < spec.samples_per_class; ++i)
        order.push_back(cl * spec.samples_per_class + i);
  for (int cl = num_train; cl < spec.num_classes; ++cl)
    for (int i = 0; i < spec.samples_per_class; ++i)
      order.push_back(cl * spec.samples_per_class + i);

  const int n_train = num_train * spec.samples_per_class;
  bench.train.features.resize(n_train, spec.ambient_dim);
  bench.test.features.resize(total - n_train, spec.ambient_dim);
  bench.sphere_points.resize(total, spec.sphere_dim);
  for (int k = 0; k < total; ++k) {
    const int src = order[k];
    bench.sphere_points.row(k) = sphere.row(src);
    bench.submode_ids.push_back(submodes[src]);
    if (k < n_train) {
      bench.train.features.row(k) = features.row(src);
      bench.train.labels.push_back(labels[src]);  // already 0..num_train-1
    } else {
      bench.test.features.row(k - n_train) = features.row(src);
      bench.test.labels.push_back(labels[src] - num_train);
    }
  }
  return bench;
}

// One row per sample: `label, f_0, ..., f_{D-1}`, preceded by a header line
// declaring the feature dimension and split tag. Floats use %.17g so a write
// followed by a read is bit-exact.
inline void write_table(const std::string& path, const RawDataset& ds,
                        const std::string& split_tag) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  require(f != nullptr, ErrorCode::IoError, "cannot open for writing: " + path);
  std::fprintf(f, "# dim=%d split=%s\n", ds.dim(), split_tag.c_str());
  for (int i = 0; i < ds.size(); ++i) {
    std::fprintf(f, "%d", ds.labels[i]);
    for (int j = 0; j < ds.dim(); ++j)
      std::fprintf(f, ", %.17g", ds.features(i, j));
    std::fprintf(f, "\n");
  }
  std::fclose(f);
}

inline RawDataset read_table(const std::string& path,
                             std::string* split_tag = nullptr) {
  std::FILE* f = std::fopen(path.c_str(), "r");
  require(f != nullptr, ErrorCode::IoError, "cannot open for reading: " + path);
  int dim = 0;
  char tag[256] = {0};
  if (std::fscanf(f, "# dim=%d split=%255s\n", &dim, tag) != 2) {
    std::fclose(f);
    fail(ErrorCode::IoError, "malformed table header in " + path);
  }
  RawDataset ds;
  std::vector<double> values;
  for (;;) {
    int label = 0;
    if (std::fscanf(f, "%d", &label) != 1) break;
    ds.labels.push_back(label);
    for (int j = 0; j < dim; ++j) {
      double v = 0.0;
      if (std::fscanf(f, " , %lf", &v) != 1) {
        std::fclose(f);
        fail(ErrorCode::IoError, "truncated row in " + path);
      }
      values.push_back(v);
    }
  }
  std::fclose(f);
  const int n = static_cast<int>(ds.labels.size());
  ds.features.resize(n, dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) ds.features(i, j) = values[i * dim + j];
  if (split_tag) *split_tag = tag;
  return ds;
}

}  // namespace nir
