#pragma once

// The four proxy-based objectives. Each works on the cosine similarity matrix
// S = psi * P^T, produces the scalar value plus exact gradients with respect
// to embeddings and proxies, and leaves it to the caller whether the proxy
// gradient is applied.

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "nir/common.hpp"
#include "nir/embedding.hpp"

namespace nir {

enum class LossKind { ProxyNca, ProxyNcaPP, ProxyAnchor, ProxyNcaStar };

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "proxy_nca") return LossKind::ProxyNca;
  if (s == "proxy_nca_pp") return LossKind::ProxyNcaPP;
  if (s == "proxy_anchor") return LossKind::ProxyAnchor;
  if (s == "proxy_nca_star") return LossKind::ProxyNcaStar;
  fail(ErrorCode::ConfigError, "unknown loss kind: " + s);
}

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::ProxyNca: return "proxy_nca";
    case LossKind::ProxyNcaPP: return "proxy_nca_pp";
    case LossKind::ProxyAnchor: return "proxy_anchor";
    case LossKind::ProxyNcaStar: return "proxy_nca_star";
  }
  fail(ErrorCode::InvalidSpec, "bad loss kind");
}

struct ProxyAnchorParams {
  double alpha = 32.0;
  double delta = 0.1;
};

struct LossConfig {
  LossKind kind = LossKind::ProxyAnchor;
  ProxyAnchorParams anchor;
};

struct LossValueWithGrads {
  double value = 0.0;
  Matrix d_embeddings;  // n x d
  Matrix d_proxies;     // C x d
};

namespace detail {

// Row index in `proxies` holding each sample's own class proxy.
inline std::vector<int> positive_rows(const EmbeddingBatch& batch,
                                      const ProxySet& proxies) {
  std::unordered_map<int, int> row_of;
  for (int c = 0; c < proxies.num_classes(); ++c) row_of[proxies.class_ids[c]] = c;
  std::vector<int> rows(batch.size());
  for (int i = 0; i < batch.size(); ++i) {
    auto it = row_of.find(batch.labels[i]);
    if (it == row_of.end())
      fail(ErrorCode::MissingProxy,
           "no proxy for label " + std::to_string(batch.labels[i]));
    rows[i] = it->second;
  }
  return rows;
}

inline void check_nonempty(const EmbeddingBatch& batch) {
  require(batch.size() > 0, ErrorCode::EmptyBatch, "empty batch");
}

// Chains a gradient on S = psi * P^T back onto psi and P.
inline LossValueWithGrads from_similarity_grad(double value, const Matrix& dS,
                                               const EmbeddingBatch& batch,
                                               const ProxySet& proxies) {
  LossValueWithGrads out;
  out.value = value;
  out.d_embeddings = dS * proxies.proxies;
  out.d_proxies = dS.transpose() * batch.data;
  return out;
}

}  // namespace detail

// -E[ log( e^{s(psi,rho_y)} / sum_{rho in P^{-y}} e^{s(psi,rho)} ) ]:
// the positive similarity enters only the numerator; the normalizer runs over
// the other classes' proxies.
inline LossValueWithGrads proxy_nca(const EmbeddingBatch& batch,
                                    const ProxySet& proxies) {
  detail::check_nonempty(batch);
  require(proxies.num_classes() >= 2, ErrorCode::NoNegativeProxies,
          "proxy_nca needs at least one negative proxy");
  const auto pos = detail::positive_rows(batch, proxies);
  const Matrix S = cosine_similarity_matrix(batch.data, proxies.proxies);
  const int n = batch.size();
  const int C = proxies.num_classes();
  const double inv_n = 1.0 / n;

  double value = 0.0;
  Matrix dS = Matrix::Zero(n, C);
  for (int i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < C; ++c)
      if (c != pos[i]) m = std::max(m, S(i, c));
    double z = 0.0;
    for (int c = 0; c < C; ++c)
      if (c != pos[i]) z += std::exp(S(i, c) - m);
    value += inv_n * (-S(i, pos[i]) + m + std::log(z));
    dS(i, pos[i]) -= inv_n;
    for (int c = 0; c < C; ++c)
      if (c != pos[i]) dS(i, c) += inv_n * std::exp(S(i, c) - m) / z;
  }
  return detail::from_similarity_grad(value, dS, batch, proxies);
}

// Log-softmax over the full proxy set; identical to the negative mean log
// mixture posterior at unit concentration.
inline LossValueWithGrads proxy_nca_pp(const EmbeddingBatch& batch,
                                       const ProxySet& proxies) {
  detail::check_nonempty(batch);
  const auto pos = detail::positive_rows(batch, proxies);
  const Matrix S = cosine_similarity_matrix(batch.data, proxies.proxies);
  const int n = batch.size();
  const int C = proxies.num_classes();
  const double inv_n = 1.0 / n;

  double value = 0.0;
  Matrix dS(n, C);
  for (int i = 0; i < n; ++i) {
    const double m = S.row(i).maxCoeff();
    double z = 0.0;
    for (int c = 0; c < C; ++c) z += std::exp(S(i, c) - m);
    value += inv_n * (-S(i, pos[i]) + m + std::log(z));
    for (int c = 0; c < C; ++c) dS(i, c) = inv_n * std::exp(S(i, c) - m) / z;
    dS(i, pos[i]) -= inv_n;
  }
  return detail::from_similarity_grad(value, dS, batch, proxies);
}

namespace detail {

// log(1 + sum_j e^{z_j}) with max subtraction; writes d/dz_j into `dz`.
inline double log1p_sum_exp(const std::vector<double>& z, std::vector<double>& dz) {
  double m = 0.0;
  for (double v : z) m = std::max(m, v);
  double acc = std::exp(-m);
  for (double v : z) acc += std::exp(v - m);
  const double val = m + std::log(acc);
  dz.resize(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) dz[j] = std::exp(z[j] - m) / acc;
  return val;
}

}  // namespace detail

// Two log-sum-exp terms: a pull over proxies with batch positives (averaged
// over those proxies) and a push over every proxy's batch negatives (averaged
// over all proxies).
inline LossValueWithGrads proxy_anchor(const EmbeddingBatch& batch,
                                       const ProxySet& proxies,
                                       const ProxyAnchorParams& p) {
  detail::check_nonempty(batch);
  require(p.alpha > 0.0, ErrorCode::InvalidSpec, "alpha must be positive");
  const auto pos = detail::positive_rows(batch, proxies);
  const Matrix S = cosine_similarity_matrix(batch.data, proxies.proxies);
  const int n = batch.size();
  const int C = proxies.num_classes();

  std::vector<std::vector<int>> members(C);
  for (int i = 0; i < n; ++i) members[pos[i]].push_back(i);
  int num_pos_proxies = 0;
  for (int c = 0; c < C; ++c)
    if (!members[c].empty()) ++num_pos_proxies;
  require(num_pos_proxies >= 1, ErrorCode::EmptyBatch, "no positive proxies");

  double value = 0.0;
  Matrix dS = Matrix::Zero(n, C);
  std::vector<double> z, dz;
  for (int c = 0; c < C; ++c) {
    if (!members[c].empty()) {
      z.clear();
      for (int i : members[c]) z.push_back(-p.alpha * (S(i, c) - p.delta));
      value += detail::log1p_sum_exp(z, dz) / num_pos_proxies;
      for (std::size_t j = 0; j < members[c].size(); ++j)
        dS(members[c][j], c) += -p.alpha * dz[j] / num_pos_proxies;
    }
    z.clear();
    std::vector<int> negs;
    for (int i = 0; i < n; ++i)
      if (pos[i] != c) {
        negs.push_back(i);
        z.push_back(p.alpha * (S(i, c) + p.delta));
      }
    value += detail::log1p_sum_exp(z, dz) / C;
    for (std::size_t j = 0; j < negs.size(); ++j)
      dS(negs[j], c) += p.alpha * dz[j] / C;
  }
  return detail::from_similarity_grad(value, dS, batch, proxies);
}

// Per-sample variant: one softplus pull on the own proxy plus a per-sample
// log-sum-exp push over all non-matching proxies.
inline LossValueWithGrads proxy_nca_star(const EmbeddingBatch& batch,
                                         const ProxySet& proxies,
                                         const ProxyAnchorParams& p) {
  detail::check_nonempty(batch);
  require(p.alpha > 0.0, ErrorCode::InvalidSpec, "alpha must be positive");
  const auto pos = detail::positive_rows(batch, proxies);
  const Matrix S = cosine_similarity_matrix(batch.data, proxies.proxies);
  const int n = batch.size();
  const int C = proxies.num_classes();
  const double inv_n = 1.0 / n;

  double value = 0.0;
  Matrix dS = Matrix::Zero(n, C);
  std::vector<double> z, dz;
  for (int i = 0; i < n; ++i) {
    const double zp = -p.alpha * (S(i, pos[i]) - p.delta);
    value += inv_n * softplus(zp);
    dS(i, pos[i]) += inv_n * -p.alpha * sigmoid(zp);

    z.clear();
    std::vector<int> negs;
    for (int c = 0; c < C; ++c)
      if (c != pos[i]) {
        negs.push_back(c);
        z.push_back(p.alpha * (S(i, c) + p.delta));
      }
    if (!negs.empty()) {
      value += inv_n * detail::log1p_sum_exp(z, dz);
      for (std::size_t j = 0; j < negs.size(); ++j)
        dS(i, negs[j]) += inv_n * p.alpha * dz[j];
    }
  }
  return detail::from_similarity_grad(value, dS, batch, proxies);
}

inline LossValueWithGrads proxy_loss(const EmbeddingBatch& batch,
                                     const ProxySet& proxies,
                                     const LossConfig& cfg) {
  switch (cfg.kind) {
    case LossKind::ProxyNca: return proxy_nca(batch, proxies);
    case LossKind::ProxyNcaPP: return proxy_nca_pp(batch, proxies);
    case LossKind::ProxyAnchor: return proxy_anchor(batch, proxies, cfg.anchor);
    case LossKind::ProxyNcaStar: return proxy_nca_star(batch, proxies, cfg.anchor);
  }
  fail(ErrorCode::InvalidSpec, "bad loss kind");
}

}  // namespace nir
