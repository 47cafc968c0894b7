#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "nir/objective.hpp"

using namespace nir;
using Catch::Matchers::WithinAbs;

namespace {

ConditionalFlow make_flow(int dim, int depth, double final_scale,
                          std::uint64_t seed) {
  FlowConfig cfg;
  cfg.dim = dim;
  cfg.depth = depth;
  cfg.width = 12;
  cfg.final_init_scale = final_scale;
  cfg.perm_seed = seed + 7;
  Rng rng(seed);
  return ConditionalFlow(cfg, rng);
}

}  // namespace

TEST_CASE("identity flow gives regularizer value one on unit embeddings") {
  const auto batch = nirtest::random_batch(9, 3, 8, 1);
  const ProxySet proxies = ProxySet::random(3, 8, 2);
  const ConditionalFlow flow = make_flow(8, 3, 0.0, 3);
  const NirLossResult r = nir_loss(batch, proxies, flow);
  REQUIRE_THAT(r.value, WithinAbs(1.0, 1e-14));
}

TEST_CASE("regularizer matches a compositional oracle on a random flow") {
  const auto batch = nirtest::random_batch(7, 3, 8, 4);
  const ProxySet proxies = ProxySet::random(3, 8, 5);
  const ConditionalFlow flow = make_flow(8, 2, 0.5, 6);

  Matrix rho(batch.size(), 8);
  for (int i = 0; i < batch.size(); ++i)
    rho.row(i) = proxies.proxies.row(batch.labels[i]);
  const FlowResult inv = flow_inverse(flow, batch.data, rho);
  double expect = 0.0;
  for (int i = 0; i < batch.size(); ++i)
    expect += inv.out.row(i).squaredNorm() - inv.logdet(i);
  expect /= batch.size();

  REQUIRE_THAT(nir_loss(batch, proxies, flow).value, WithinAbs(expect, 1e-12));
}

TEST_CASE("exact NLL differs from the training form by the known constants") {
  const auto batch = nirtest::random_batch(6, 2, 6, 7);
  const ProxySet proxies = ProxySet::random(2, 6, 8);
  const ConditionalFlow flow = make_flow(6, 2, 0.4, 9);

  Matrix rho(batch.size(), 6);
  for (int i = 0; i < batch.size(); ++i)
    rho.row(i) = proxies.proxies.row(batch.labels[i]);
  const FlowResult inv = flow_inverse(flow, batch.data, rho);
  const double mean_sq = inv.out.rowwise().squaredNorm().mean();
  const double c = 0.5 * 6 * std::log(2.0 * std::numbers::pi);

  const double training = nir_loss(batch, proxies, flow).value;
  const double exact = gaussian_nll_loss(batch, proxies, flow).value;
  REQUIRE_THAT(exact - training, WithinAbs(c - 0.5 * mean_sq, 1e-10));

  // the exact form is the negative mean log density
  const Vector logp = flow_log_density(flow, batch.data, rho);
  REQUIRE_THAT(exact, WithinAbs(-logp.mean(), 1e-12));
}

TEST_CASE("regularizer is invariant to batch order and gradients permute") {
  auto batch = nirtest::random_batch(6, 3, 8, 10);
  const ProxySet proxies = ProxySet::random(3, 8, 11);
  const ConditionalFlow flow = make_flow(8, 2, 0.5, 12);
  const NirLossResult base = nir_loss(batch, proxies, flow);

  EmbeddingBatch reversed;
  reversed.data = batch.data.colwise().reverse();
  reversed.labels.assign(batch.labels.rbegin(), batch.labels.rend());
  const NirLossResult rev = nir_loss(reversed, proxies, flow);
  REQUIRE_THAT(rev.value, WithinAbs(base.value, 1e-12));
  REQUIRE((rev.d_embeddings.colwise().reverse() - base.d_embeddings)
              .cwiseAbs()
              .maxCoeff() < 1e-12);
  REQUIRE((rev.d_proxies - base.d_proxies).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("proxy gradient routing honors proxy_backprop") {
  const auto batch = nirtest::random_batch(6, 3, 8, 13);
  const ProxySet proxies = ProxySet::random(3, 8, 14);
  const ConditionalFlow flow = make_flow(8, 2, 0.5, 15);
  const NirLossResult with = nir_loss(batch, proxies, flow, true);
  const NirLossResult without = nir_loss(batch, proxies, flow, false);
  REQUIRE(with.d_proxies.cwiseAbs().maxCoeff() > 1e-8);
  REQUIRE(without.d_proxies.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE_THAT(with.value, WithinAbs(without.value, 1e-15));
  REQUIRE((with.d_embeddings - without.d_embeddings).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("scaling variants are monotone and differentiable") {
  NirConfig cfg;
  cfg.nir_exponent_clamp = 50.0;

  cfg.scaling = ScalingKind::Exp;
  REQUIRE_THAT(apply_scaling(1.0, cfg).first, WithinAbs(std::exp(1.0), 1e-15));
  REQUIRE(apply_scaling(60.0, cfg).first == std::exp(50.0));
  REQUIRE(apply_scaling(60.0, cfg).second == 0.0);

  cfg.scaling = ScalingKind::ExpTemperature;
  cfg.temperature = 0.3;
  REQUIRE_THAT(apply_scaling(1.2, cfg).first, WithinAbs(std::exp(4.0), 1e-12));

  cfg.scaling = ScalingKind::Softplus;
  REQUIRE_THAT(apply_scaling(0.0, cfg).first, WithinAbs(std::log(2.0), 1e-15));

  for (ScalingKind k :
       {ScalingKind::Exp, ScalingKind::ExpTemperature, ScalingKind::Softplus}) {
    cfg.scaling = k;
    for (double l : {-2.0, 0.0, 1.0, 5.0}) {
      REQUIRE(apply_scaling(l, cfg).first < apply_scaling(l + 0.1, cfg).first);
      // derivative is consistent with a central difference
      const double fd =
          (apply_scaling(l + 1e-6, cfg).first - apply_scaling(l - 1e-6, cfg).first) /
          2e-6;
      REQUIRE_THAT(apply_scaling(l, cfg).second, WithinAbs(fd, 1e-5 * std::max(1.0, std::abs(fd))));
    }
  }
}

TEST_CASE("combined objective composes its parts") {
  const auto batch = nirtest::random_batch(8, 4, 8, 16);
  const ProxySet proxies = ProxySet::random(4, 8, 17);
  // small final init keeps the regularizer below the exponent clamp so the
  // exp expectation holds unclamped
  const ConditionalFlow flow = make_flow(8, 2, 0.1, 18);
  LossConfig dml;
  NirConfig cfg;
  cfg.omega = 0.005;

  Rng rng(1);
  const CombinedResult r = combined_objective(batch, proxies, flow, dml, cfg, rng);
  const double reg = nir_loss(batch, proxies, flow).value;
  const double pdml = proxy_loss(batch, proxies, dml).value;
  REQUIRE_THAT(r.nir_value, WithinAbs(reg, 1e-14));
  REQUIRE_THAT(r.dml_value, WithinAbs(pdml, 1e-14));
  REQUIRE_THAT(r.scaled_nir, WithinAbs(std::exp(reg), 1e-12));
  REQUIRE_THAT(r.value, WithinAbs(std::exp(reg) + 0.005 * pdml, 1e-12));
  REQUIRE(r.neg_pair_value == 0.0);
}

TEST_CASE("omega zero leaves only the scaled regularizer") {
  const auto batch = nirtest::random_batch(6, 3, 8, 19);
  const ProxySet proxies = ProxySet::random(3, 8, 20);
  const ConditionalFlow flow = make_flow(8, 2, 0.4, 21);
  LossConfig dml;
  NirConfig cfg;
  cfg.omega = 0.0;
  Rng rng(2);
  const CombinedResult r = combined_objective(batch, proxies, flow, dml, cfg, rng);
  REQUIRE_THAT(r.value, WithinAbs(r.scaled_nir, 1e-15));
}

TEST_CASE("identity flow with exp scaling gives e as the f-part") {
  const auto batch = nirtest::random_batch(5, 1, 6, 22);
  ProxySet proxies = ProxySet::random(1, 6, 23);
  const ConditionalFlow flow = make_flow(6, 2, 0.0, 24);
  LossConfig dml{LossKind::ProxyNcaPP, {}};
  NirConfig cfg;
  Rng rng(3);
  const CombinedResult r = combined_objective(batch, proxies, flow, dml, cfg, rng);
  REQUIRE_THAT(r.scaled_nir, WithinAbs(std::exp(1.0), 1e-12));
}

TEST_CASE("negative pair term matches a reconstruction with the same draws") {
  const auto batch = nirtest::random_batch(7, 3, 6, 25);
  const ProxySet proxies = ProxySet::random(3, 6, 26);
  const ConditionalFlow flow = make_flow(6, 2, 0.5, 27);
  NirConfig cfg;
  cfg.lambda_neg = 0.2;

  Rng rng(99);
  const NirLossResult r = nir_negative_pair_term(batch, proxies, flow, cfg, rng);

  // replay the identical uniform draws to recover the sampled proxies
  Rng replay(99);
  const auto pos = std::vector<int>(batch.labels);
  double acc = 0.0;
  const double c0 = 0.5 * 6 * std::log(2.0 * std::numbers::pi);
  for (int i = 0; i < batch.size(); ++i) {
    int c = static_cast<int>(uniform_index(2, replay));
    if (c >= pos[i]) ++c;
    REQUIRE(c != pos[i]);
    const Matrix psi = batch.data.row(i);
    const Matrix rho = proxies.proxies.row(c);
    const FlowResult inv = flow_inverse(flow, psi, rho);
    const double nll = 0.5 * inv.out.row(0).squaredNorm() + c0 - inv.logdet(0);
    acc += std::min(nll, cfg.nir_exponent_clamp);
  }
  REQUIRE_THAT(r.value, WithinAbs(-cfg.lambda_neg * acc / batch.size(), 1e-12));
}

TEST_CASE("negative pair term requires at least two classes and scales with lambda") {
  const auto batch = nirtest::random_batch(4, 1, 6, 28);
  const ProxySet proxies = ProxySet::random(1, 6, 29);
  const ConditionalFlow flow = make_flow(6, 2, 0.3, 30);
  NirConfig cfg;
  Rng rng(5);
  REQUIRE_THROWS_MATCHES(nir_negative_pair_term(batch, proxies, flow, cfg, rng),
                         Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == ErrorCode::NoNegativeProxies;
                         }));

  const auto batch3 = nirtest::random_batch(6, 3, 6, 31);
  const ProxySet proxies3 = ProxySet::random(3, 6, 32);
  cfg.lambda_neg = 0.0;
  Rng rng2(6);
  REQUIRE(nir_negative_pair_term(batch3, proxies3, flow, cfg, rng2).value == 0.0);
}

TEST_CASE("synthetic generation through the identity flow normalizes residuals") {
  const ProxySet proxies = ProxySet::random(3, 6, 33);
  const ConditionalFlow flow = make_flow(6, 2, 0.0, 34);
  const EmbeddingBatch synth = generate_synthetic(proxies, 4, flow, 77);
  REQUIRE(synth.size() == 12);
  REQUIRE(rows_unit_norm(synth.data, 1e-12));
  const Matrix zeta = sample_residual(12, 6, 77);
  REQUIRE((synth.data - l2_normalize_rows(zeta)).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE(synth.labels == std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2});

  const EmbeddingBatch again = generate_synthetic(proxies, 4, flow, 77);
  REQUIRE((synth.data - again.data).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("self-regularization routes gradients per mode") {
  const ProxySet proxies = ProxySet::random(3, 6, 35);
  const ConditionalFlow flow = make_flow(6, 2, 0.5, 36);
  const EmbeddingBatch synth = generate_synthetic(proxies, 3, flow, 78);
  LossConfig dml;

  const auto off = self_reg_loss(SelfRegMode::Off, synth, proxies, dml);
  REQUIRE(off.value == 0.0);
  REQUIRE(off.d_embeddings.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(off.d_proxies.cwiseAbs().maxCoeff() == 0.0);

  const auto gen = self_reg_loss(SelfRegMode::Generate, synth, proxies, dml);
  REQUIRE(gen.d_embeddings.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(gen.d_proxies.cwiseAbs().maxCoeff() > 0.0);

  const auto rev = self_reg_loss(SelfRegMode::ReverseMatch, synth, proxies, dml);
  REQUIRE(rev.d_embeddings.cwiseAbs().maxCoeff() > 0.0);
  REQUIRE(rev.d_proxies.cwiseAbs().maxCoeff() == 0.0);

  const auto both = self_reg_loss(SelfRegMode::GenerateAndMatch, synth, proxies, dml);
  REQUIRE(both.d_embeddings.cwiseAbs().maxCoeff() > 0.0);
  REQUIRE(both.d_proxies.cwiseAbs().maxCoeff() > 0.0);
  REQUIRE_THAT(both.value, WithinAbs(gen.value, 1e-15));

  EmbeddingBatch empty;
  empty.data = Matrix(0, 6);
  REQUIRE_THROWS_MATCHES(self_reg_loss(SelfRegMode::Generate, empty, proxies, dml),
                         Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == ErrorCode::EmptySynthetic;
                         }));
}

TEST_CASE("combined objective gradients match finite differences") {
  const auto batch = nirtest::random_batch(6, 3, 6, 37);
  const ProxySet proxies = ProxySet::random(3, 6, 38);
  // small init keeps exp(regularizer) moderate; otherwise the huge scaled
  // term swamps the small negative-pair directions in the finite differences
  const ConditionalFlow flow = make_flow(6, 2, 0.1, 39);
  LossConfig dml;
  NirConfig cfg;
  cfg.omega = 0.01;
  cfg.negative_pairs = true;
  cfg.lambda_neg = 0.1;

  auto value_at = [&](const Matrix& data, const Matrix& prox,
                      const ConditionalFlow& fl) {
    EmbeddingBatch b = batch;
    b.data = data;
    ProxySet p = proxies;
    p.proxies = prox;
    Rng rng(55);
    return combined_objective(b, p, fl, dml, cfg, rng).value;
  };

  Rng rng(55);
  const CombinedResult r =
      combined_objective(batch, proxies, flow, dml, cfg, rng);

  const Matrix fd_e = nirtest::fd_grad(
      [&](const Matrix& x) { return value_at(x, proxies.proxies, flow); },
      batch.data);
  REQUIRE(nirtest::max_rel_err(r.d_embeddings, fd_e) < 1e-4);

  const Matrix fd_p = nirtest::fd_grad(
      [&](const Matrix& p) { return value_at(batch.data, p, flow); },
      proxies.proxies);
  REQUIRE(nirtest::max_rel_err(r.d_proxies, fd_p) < 1e-4);

  const int np = flow.num_params();
  Vector flat(np);
  flow.to_flat(flat.data());
  Vector analytic(np);
  r.d_flow.to_flat(analytic.data());
  ConditionalFlow probe = flow;
  double worst = 0.0;
  for (int k = 0; k < np; k += 7) {
    Vector pv = flat;
    pv(k) += 1e-6;
    probe.from_flat(pv.data());
    const double up = value_at(batch.data, proxies.proxies, probe);
    pv(k) = flat(k) - 1e-6;
    probe.from_flat(pv.data());
    const double dn = value_at(batch.data, proxies.proxies, probe);
    const double fd = (up - dn) / 2e-6;
    const double denom = std::max({std::abs(fd), std::abs(analytic(k)), 1e-6});
    worst = std::max(worst, std::abs(fd - analytic(k)) / denom);
  }
  REQUIRE(worst < 1e-4);
}

TEST_CASE("config validation rejects bad values") {
  NirConfig cfg;
  cfg.omega = -1.0;
  REQUIRE_THROWS_AS(cfg.validate(), Error);
  cfg.omega = 0.1;
  cfg.temperature = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), Error);
}
