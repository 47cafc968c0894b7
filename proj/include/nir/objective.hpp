#pragma once

// Residual regularization and the combined training objective: the flow-based
// non-isotropy term, its monotone scaling wrappers, the optional negative-pair
// term, and generation of synthetic samples by running the flow in reverse.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "nir/common.hpp"
#include "nir/embedding.hpp"
#include "nir/flow.hpp"
#include "nir/losses.hpp"

namespace nir {

enum class ScalingKind { Exp, ExpTemperature, Softplus };

inline ScalingKind scaling_from_string(const std::string& s) {
  if (s == "exp") return ScalingKind::Exp;
  if (s == "exp_t") return ScalingKind::ExpTemperature;
  if (s == "softplus") return ScalingKind::Softplus;
  fail(ErrorCode::ConfigError, "unknown scaling kind: " + s);
}

inline std::string to_string(ScalingKind k) {
  switch (k) {
    case ScalingKind::Exp: return "exp";
    case ScalingKind::ExpTemperature: return "exp_t";
    case ScalingKind::Softplus: return "softplus";
  }
  fail(ErrorCode::InvalidSpec, "bad scaling kind");
}

enum class SelfRegMode { Off, Generate, ReverseMatch, GenerateAndMatch };

inline SelfRegMode self_reg_from_string(const std::string& s) {
  if (s == "off") return SelfRegMode::Off;
  if (s == "generate") return SelfRegMode::Generate;
  if (s == "reverse_match") return SelfRegMode::ReverseMatch;
  if (s == "generate_and_match") return SelfRegMode::GenerateAndMatch;
  fail(ErrorCode::ConfigError, "unknown self-reg mode: " + s);
}

inline std::string to_string(SelfRegMode m) {
  switch (m) {
    case SelfRegMode::Off: return "off";
    case SelfRegMode::Generate: return "generate";
    case SelfRegMode::ReverseMatch: return "reverse_match";
    case SelfRegMode::GenerateAndMatch: return "generate_and_match";
  }
  fail(ErrorCode::InvalidSpec, "bad self-reg mode");
}

struct NirConfig {
  bool enabled = true;
  double omega = 0.005;
  ScalingKind scaling = ScalingKind::Exp;
  double temperature = 1.0;
  double nir_exponent_clamp = 50.0;
  bool proxy_backprop = true;
  bool negative_pairs = false;
  double lambda_neg = 0.1;
  double grad_clip = 0.0;  // 0 disables clipping
  SelfRegMode self_reg = SelfRegMode::Off;
  int self_reg_per_class = 4;

  void validate() const {
    require(omega >= 0.0, ErrorCode::ConfigError, "omega must be >= 0");
    require(temperature > 0.0, ErrorCode::ConfigError, "temperature must be > 0");
    require(grad_clip >= 0.0, ErrorCode::ConfigError, "grad_clip must be >= 0");
    require(lambda_neg >= 0.0, ErrorCode::ConfigError, "lambda_neg must be >= 0");
  }
};

struct NirLossResult {
  double value = 0.0;
  Matrix d_embeddings;  // n x d
  Matrix d_proxies;     // C x d
  FlowGrads d_flow;
};

namespace detail {

// mean over rows of quad*|zeta|^2 - logdet_inv, plus a constant, with full
// gradients. The quadratic coefficient distinguishes the training form
// (quad=1, constant 0) from the exact Gaussian NLL (quad=1/2 plus d/2 log 2pi).
inline NirLossResult residual_quadratic_loss(const EmbeddingBatch& batch,
                                             const ProxySet& proxies,
                                             const ConditionalFlow& flow,
                                             double quad, double constant,
                                             bool proxy_backprop) {
  check_nonempty(batch);
  const auto pos = positive_rows(batch, proxies);
  const int n = batch.size();
  Matrix rho(n, proxies.dim());
  for (int i = 0; i < n; ++i) rho.row(i) = proxies.proxies.row(pos[i]);

  FlowCache cache;
  const FlowResult inv = flow_inverse(flow, batch.data, rho, &cache);

  NirLossResult out;
  out.value = constant +
              (quad * inv.out.rowwise().squaredNorm() - inv.logdet).mean();

  const Matrix d_zeta = (2.0 * quad / n) * inv.out;
  const Vector d_logdet_inv = Vector::Constant(n, -1.0 / n);
  out.d_flow = FlowGrads::zeros(flow);
  const FlowBackwardResult back =
      flow_inverse_backward(flow, cache, d_zeta, d_logdet_inv, out.d_flow);
  out.d_embeddings = back.d_in;
  out.d_proxies = Matrix::Zero(proxies.num_classes(), proxies.dim());
  if (proxy_backprop)
    for (int i = 0; i < n; ++i) out.d_proxies.row(pos[i]) += back.d_cond.row(i);
  return out;
}

}  // namespace detail

// mean over the batch of |tau^{-1}(psi | rho_y)|^2 - log|det J_{tau^{-1}}|,
// the squared norm unhalved and Gaussian constants dropped.
inline NirLossResult nir_loss(const EmbeddingBatch& batch,
                              const ProxySet& proxies,
                              const ConditionalFlow& flow,
                              bool proxy_backprop = true) {
  return detail::residual_quadratic_loss(batch, proxies, flow, 1.0, 0.0,
                                         proxy_backprop);
}

// Exact mean Gaussian NLL of the batch under the pushforward:
// mean of 1/2 |zeta|^2 + d/2 log 2pi - logdet_inv.
inline NirLossResult gaussian_nll_loss(const EmbeddingBatch& batch,
                                       const ProxySet& proxies,
                                       const ConditionalFlow& flow,
                                       bool proxy_backprop = true) {
  const double c =
      0.5 * batch.dim() * std::log(2.0 * std::numbers::pi);
  return detail::residual_quadratic_loss(batch, proxies, flow, 0.5, c,
                                         proxy_backprop);
}

// Value + derivative of the monotone wrapper f applied to the regularizer.
inline std::pair<double, double> apply_scaling(double l, const NirConfig& cfg) {
  switch (cfg.scaling) {
    case ScalingKind::Exp: {
      const double v = std::exp(std::min(l, cfg.nir_exponent_clamp));
      return {v, l <= cfg.nir_exponent_clamp ? v : 0.0};
    }
    case ScalingKind::ExpTemperature: {
      const double v =
          std::exp(std::min(l, cfg.nir_exponent_clamp) / cfg.temperature);
      return {v, l <= cfg.nir_exponent_clamp ? v / cfg.temperature : 0.0};
    }
    case ScalingKind::Softplus:
      return {softplus(l), sigmoid(l)};
  }
  fail(ErrorCode::InvalidSpec, "bad scaling kind");
}

// NLL maximization for mismatched sample-proxy pairs: one uniformly drawn
// non-matching proxy per sample, each pair's NLL clamped before entering the
// (negated) mean.
inline NirLossResult nir_negative_pair_term(const EmbeddingBatch& batch,
                                            const ProxySet& proxies,
                                            const ConditionalFlow& flow,
                                            const NirConfig& cfg, Rng& rng) {
  detail::check_nonempty(batch);
  require(proxies.num_classes() >= 2, ErrorCode::NoNegativeProxies,
          "negative pairs need at least two classes");
  const auto pos = detail::positive_rows(batch, proxies);
  const int n = batch.size();
  const int C = proxies.num_classes();

  std::vector<int> neg(n);
  Matrix rho(n, proxies.dim());
  for (int i = 0; i < n; ++i) {
    int c = static_cast<int>(uniform_index(static_cast<std::uint64_t>(C - 1), rng));
    if (c >= pos[i]) ++c;
    neg[i] = c;
    rho.row(i) = proxies.proxies.row(c);
  }

  FlowCache cache;
  const FlowResult inv = flow_inverse(flow, batch.data, rho, &cache);
  const double c0 = 0.5 * batch.dim() * std::log(2.0 * std::numbers::pi);

  NirLossResult out;
  out.d_flow = FlowGrads::zeros(flow);
  Matrix d_zeta = Matrix::Zero(n, batch.dim());
  Vector d_logdet_inv = Vector::Zero(n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double nll =
        0.5 * inv.out.row(i).squaredNorm() + c0 - inv.logdet(i);
    acc += std::min(nll, cfg.nir_exponent_clamp);
    if (nll < cfg.nir_exponent_clamp) {
      const double w = -cfg.lambda_neg / n;
      d_zeta.row(i) = w * inv.out.row(i);
      d_logdet_inv(i) = -w;
    }
  }
  out.value = -cfg.lambda_neg * acc / n;

  const FlowBackwardResult back =
      flow_inverse_backward(flow, cache, d_zeta, d_logdet_inv, out.d_flow);
  out.d_embeddings = back.d_in;
  out.d_proxies = Matrix::Zero(C, proxies.dim());
  if (cfg.proxy_backprop)
    for (int i = 0; i < n; ++i) out.d_proxies.row(neg[i]) += back.d_cond.row(i);
  return out;
}

struct CombinedResult {
  double value = 0.0;
  double nir_value = 0.0;       // unscaled regularizer
  double scaled_nir = 0.0;      // f(regularizer)
  double dml_value = 0.0;
  double neg_pair_value = 0.0;
  Matrix d_embeddings;
  Matrix d_proxies;
  FlowGrads d_flow;
};

// f(L_reg) + omega * L_proxy, plus the optional negative-pair term.
inline CombinedResult combined_objective(const EmbeddingBatch& batch,
                                         const ProxySet& proxies,
                                         const ConditionalFlow& flow,
                                         const LossConfig& dml,
                                         const NirConfig& cfg, Rng& rng) {
  cfg.validate();
  CombinedResult out;

  NirLossResult reg = nir_loss(batch, proxies, flow, cfg.proxy_backprop);
  out.nir_value = reg.value;
  const auto [fval, fprime] = apply_scaling(reg.value, cfg);
  out.scaled_nir = fval;

  LossValueWithGrads dml_part = proxy_loss(batch, proxies, dml);
  out.dml_value = dml_part.value;

  out.value = fval + cfg.omega * dml_part.value;
  out.d_embeddings =
      fprime * reg.d_embeddings + cfg.omega * dml_part.d_embeddings;
  out.d_proxies = fprime * reg.d_proxies + cfg.omega * dml_part.d_proxies;
  out.d_flow = FlowGrads::zeros(flow);
  out.d_flow.add_scaled(reg.d_flow, fprime);

  if (cfg.negative_pairs) {
    NirLossResult np = nir_negative_pair_term(batch, proxies, flow, cfg, rng);
    out.neg_pair_value = np.value;
    out.value += np.value;
    out.d_embeddings += np.d_embeddings;
    out.d_proxies += np.d_proxies;
    out.d_flow.add_scaled(np.d_flow, 1.0);
  }
  return out;
}

// Samples residuals, pushes them through the flow conditioned on each class
// proxy and renormalizes to the sphere. Labels carry the generating class.
inline EmbeddingBatch generate_synthetic(const ProxySet& proxies, int per_class,
                                         const ConditionalFlow& flow,
                                         std::uint64_t seed) {
  require(per_class >= 1, ErrorCode::InvalidSpec, "per_class must be >= 1");
  const int C = proxies.num_classes();
  const int n = C * per_class;
  const Matrix zeta = sample_residual(n, proxies.dim(), seed);
  Matrix rho(n, proxies.dim());
  EmbeddingBatch out;
  for (int c = 0; c < C; ++c)
    for (int k = 0; k < per_class; ++k) {
      rho.row(c * per_class + k) = proxies.proxies.row(c);
      out.labels.push_back(proxies.class_ids[c]);
    }
  const FlowResult fwd = flow_forward(flow, zeta, rho);
  out.data = l2_normalize_rows(fwd.out);
  return out;
}

// Proxy loss over synthetic samples with gradient routing per mode: generate
// keeps only the proxy gradient, reverse_match only the sample gradient,
// generate_and_match both.
inline LossValueWithGrads self_reg_loss(SelfRegMode mode,
                                        const EmbeddingBatch& synthetic,
                                        const ProxySet& proxies,
                                        const LossConfig& dml) {
  if (mode == SelfRegMode::Off) {
    LossValueWithGrads z;
    z.d_embeddings = Matrix::Zero(synthetic.size(), proxies.dim());
    z.d_proxies = Matrix::Zero(proxies.num_classes(), proxies.dim());
    return z;
  }
  require(synthetic.size() > 0, ErrorCode::EmptySynthetic,
          "self-regularization needs synthetic samples");
  LossValueWithGrads r = proxy_loss(synthetic, proxies, dml);
  if (mode == SelfRegMode::Generate) r.d_embeddings.setZero();
  if (mode == SelfRegMode::ReverseMatch) r.d_proxies.setZero();
  return r;
}

}  // namespace nir
