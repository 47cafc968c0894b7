#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "nir/flow.hpp"

using namespace nir;
using Catch::Matchers::WithinAbs;

namespace {

ConditionalFlow make_flow(int dim, int depth, int width, Placement placement,
                          double final_scale, std::uint64_t seed) {
  FlowConfig cfg;
  cfg.dim = dim;
  cfg.depth = depth;
  cfg.width = width;
  cfg.placement = placement;
  cfg.final_init_scale = final_scale;
  cfg.perm_seed = seed + 7;
  Rng rng(seed);
  return ConditionalFlow(cfg, rng);
}

// Sets both subnets of a block so their outputs are constants: scale raw
// output o (pre-clamp) on the first half, translation t on the second half.
void set_constant_subnets(CouplingBlock& blk, int h, double o, double t) {
  for (DenseNet* net : {&blk.net1, &blk.net2}) {
    for (auto& layer : net->layers) {
      layer.W.setZero();
      layer.b.setZero();
    }
    auto& last = net->layers.back();
    for (int j = 0; j < h; ++j) last.b(j) = o;
    for (int j = 0; j < h; ++j) last.b(h + j) = t;
  }
}

}  // namespace

TEST_CASE("zero-initialized flow is the identity with zero logdet") {
  const ConditionalFlow flow = make_flow(8, 4, 16, Placement::All, 0.0, 1);
  Rng rng(2);
  const Matrix z = gaussian_matrix(5, 8, rng);
  const Matrix rho = l2_normalize_rows(gaussian_matrix(5, 8, rng));
  const FlowResult fwd = flow_forward(flow, z, rho);
  REQUIRE((fwd.out - z).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(fwd.logdet.cwiseAbs().maxCoeff() == 0.0);
  const FlowResult inv = flow_inverse(flow, z, rho);
  REQUIRE((inv.out - z).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("inverse undoes forward and logdets cancel") {
  // error budget: float eps amplified by the exp scales of five blocks
  const ConditionalFlow flow = make_flow(12, 5, 24, Placement::All, 0.25, 3);
  Rng rng(4);
  const Matrix z = gaussian_matrix(20, 12, rng);
  const Matrix rho = l2_normalize_rows(gaussian_matrix(20, 12, rng));

  const FlowResult fwd = flow_forward(flow, z, rho);
  const FlowResult back = flow_inverse(flow, fwd.out, rho);
  REQUIRE((back.out - z).cwiseAbs().maxCoeff() < 1e-6);
  REQUIRE((fwd.logdet + back.logdet).cwiseAbs().maxCoeff() < 1e-6);

  const FlowResult inv = flow_inverse(flow, z, rho);
  const FlowResult redo = flow_forward(flow, inv.out, rho);
  REQUIRE((redo.out - z).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("single-vector coupling wrappers match hand evaluation with constant subnets") {
  ConditionalFlow flow = make_flow(4, 1, 8, Placement::Start, 0.0, 5);
  const double a = flow.cfg.clamp_scale;
  const double c = 0.5;
  const double o = a * std::atanh(c / a);  // soft clamp maps o back to c
  set_constant_subnets(flow.blocks[0], flow.half(), o, 0.0);

  Vector x(4);
  x << 0.3, -1.2, 0.7, 2.0;
  Vector cond(4);
  cond << 0.5, 0.5, 0.5, 0.5;
  const auto [y, ld] = coupling_forward(x, cond, flow.blocks[0], a);

  // s = c on both halves, t = 0: the block scales every coordinate by e^c
  // in place (the permutation only routes coordinates into the two halves).
  REQUIRE_THAT(ld, WithinAbs(4.0 * c, 1e-12));
  for (int j = 0; j < 4; ++j)
    REQUIRE_THAT(y(j), WithinAbs(std::exp(c) * x(j), 1e-12));

  const auto [back, ld_inv] = coupling_inverse(y, cond, flow.blocks[0], a);
  REQUIRE((back - x).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE_THAT(ld_inv, WithinAbs(-4.0 * c, 1e-12));
}

TEST_CASE("coupling with zero subnets is the identity") {
  ConditionalFlow flow = make_flow(6, 1, 8, Placement::Start, 0.0, 6);
  Vector x(6);
  x << 1, 2, 3, 4, 5, 6;
  const Vector cond = Vector::Zero(6);
  const auto [y, ld] = coupling_forward(x, cond, flow.blocks[0], flow.cfg.clamp_scale);
  REQUIRE(ld == 0.0);
  REQUIRE((y - x).cwiseAbs().maxCoeff() == 0.0);
  const auto [back, ld2] = coupling_inverse(y, cond, flow.blocks[0], flow.cfg.clamp_scale);
  REQUIRE((back - x).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(ld2 == 0.0);
}

TEST_CASE("analytic logdet matches the finite-difference Jacobian determinant") {
  const ConditionalFlow flow = make_flow(4, 2, 10, Placement::All, 0.5, 7);
  Rng rng(8);
  const double step = 1e-6;
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix z = gaussian_matrix(1, 4, rng);
    const Matrix rho = l2_normalize_rows(gaussian_matrix(1, 4, rng));
    const FlowResult fwd = flow_forward(flow, z, rho);

    Matrix jac(4, 4);
    for (int j = 0; j < 4; ++j) {
      Matrix zp = z, zm = z;
      zp(0, j) += step;
      zm(0, j) -= step;
      const Matrix up = flow_forward(flow, zp, rho).out;
      const Matrix dn = flow_forward(flow, zm, rho).out;
      jac.col(j) = (up - dn).transpose() / (2.0 * step);
    }
    const double fd_logdet = std::log(std::abs(jac.determinant()));
    REQUIRE_THAT(fwd.logdet(0), WithinAbs(fd_logdet, 1e-5 * std::max(1.0, std::abs(fd_logdet))));
  }
}

TEST_CASE("batched evaluation equals row-by-row evaluation") {
  const ConditionalFlow flow = make_flow(8, 3, 12, Placement::All, 0.4, 9);
  Rng rng(10);
  const Matrix z = gaussian_matrix(6, 8, rng);
  const Matrix rho = l2_normalize_rows(gaussian_matrix(6, 8, rng));
  const FlowResult all = flow_forward(flow, z, rho);
  for (int i = 0; i < 6; ++i) {
    // up to matrix-product summation order
    const FlowResult one = flow_forward(flow, z.row(i), rho.row(i));
    REQUIRE((all.out.row(i) - one.out.row(0)).cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE_THAT(all.logdet(i), WithinAbs(one.logdet(0), 1e-12));
  }
}

TEST_CASE("placement determines which blocks see the condition") {
  struct Case {
    Placement p;
    std::vector<int> conditioned;
  };
  const int depth = 5;
  for (const auto& [p, expect] : {Case{Placement::All, {0, 1, 2, 3, 4}},
                                  Case{Placement::Start, {0}},
                                  Case{Placement::Mid, {2}},
                                  Case{Placement::End, {4}}}) {
    const ConditionalFlow flow = make_flow(6, depth, 8, p, 0.3, 11);
    std::vector<int> got;
    for (int b = 0; b < depth; ++b)
      if (flow.blocks[b].conditional) got.push_back(b);
    REQUIRE(got == expect);
  }
}

TEST_CASE("condition changes the output only through conditioned blocks") {
  const ConditionalFlow flow = make_flow(6, 4, 8, Placement::End, 0.4, 12);
  Rng rng(13);
  const Matrix z = gaussian_matrix(3, 6, rng);
  const Matrix rho1 = l2_normalize_rows(gaussian_matrix(3, 6, rng));
  const Matrix rho2 = l2_normalize_rows(gaussian_matrix(3, 6, rng));

  // Forward composition applies the conditioned end block last, so
  // intermediate values after the first three blocks must agree.
  FlowCache c1, c2;
  flow_forward(flow, z, rho1, &c1);
  flow_forward(flow, z, rho2, &c2);
  // The last block's subnet inputs differ; the first blocks' must not.
  for (int b = 0; b < 3; ++b) {
    REQUIRE((c1.impl.blocks[b].c1.inputs.front() -
             c2.impl.blocks[b].c1.inputs.front()).cwiseAbs().maxCoeff() == 0.0);
  }
  const Matrix out1 = flow_forward(flow, z, rho1).out;
  const Matrix out2 = flow_forward(flow, z, rho2).out;
  REQUIRE((out1 - out2).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("inverse-direction gradients match finite differences") {
  // moderate init keeps tiny parameter gradients above finite-difference noise
  const ConditionalFlow flow = make_flow(6, 3, 8, Placement::All, 0.3, 14);
  Rng rng(15);
  const Matrix psi = gaussian_matrix(4, 6, rng);
  const Matrix rho = l2_normalize_rows(gaussian_matrix(4, 6, rng));
  const Matrix wz = gaussian_matrix(4, 6, rng);
  const Vector wl = gaussian_vector(4, rng);

  auto objective = [&](const Matrix& p, const Matrix& r) {
    const FlowResult inv = flow_inverse(flow, p, r);
    return (inv.out.array() * wz.array()).sum() + inv.logdet.dot(wl);
  };

  FlowCache cache;
  const FlowResult inv = flow_inverse(flow, psi, rho, &cache);
  (void)inv;
  FlowGrads grads = FlowGrads::zeros(flow);
  const FlowBackwardResult back =
      flow_inverse_backward(flow, cache, wz, wl, grads);

  const Matrix fd_psi = nirtest::fd_grad(
      [&](const Matrix& p) { return objective(p, rho); }, psi);
  REQUIRE(nirtest::max_rel_err(back.d_in, fd_psi) < 1e-6);

  const Matrix fd_rho = nirtest::fd_grad(
      [&](const Matrix& r) { return objective(psi, r); }, rho);
  REQUIRE(nirtest::max_rel_err(back.d_cond, fd_rho) < 1e-6);

  // flow parameters
  const int np = flow.num_params();
  Vector flat(np);
  flow.to_flat(flat.data());
  Vector analytic(np);
  grads.to_flat(analytic.data());
  ConditionalFlow probe = flow;
  const double step = 1e-6;
  double worst = 0.0;
  for (int k = 0; k < np; k += 3) {
    Vector pv = flat;
    pv(k) += step;
    probe.from_flat(pv.data());
    const double up = [&] {
      const FlowResult r = flow_inverse(probe, psi, rho);
      return (r.out.array() * wz.array()).sum() + r.logdet.dot(wl);
    }();
    pv(k) = flat(k) - step;
    probe.from_flat(pv.data());
    const double dn = [&] {
      const FlowResult r = flow_inverse(probe, psi, rho);
      return (r.out.array() * wz.array()).sum() + r.logdet.dot(wl);
    }();
    const double fd = (up - dn) / (2.0 * step);
    const double denom = std::max({std::abs(fd), std::abs(analytic(k)), 1e-6});
    worst = std::max(worst, std::abs(fd - analytic(k)) / denom);
  }
  REQUIRE(worst < 1e-4);
}

TEST_CASE("forward-direction gradients match finite differences") {
  const ConditionalFlow flow = make_flow(6, 3, 8, Placement::All, 0.5, 16);
  Rng rng(17);
  const Matrix z = gaussian_matrix(4, 6, rng);
  const Matrix rho = l2_normalize_rows(gaussian_matrix(4, 6, rng));
  const Matrix wy = gaussian_matrix(4, 6, rng);
  const Vector wl = gaussian_vector(4, rng);

  auto objective = [&](const Matrix& zz, const Matrix& r) {
    const FlowResult fwd = flow_forward(flow, zz, r);
    return (fwd.out.array() * wy.array()).sum() + fwd.logdet.dot(wl);
  };

  FlowCache cache;
  flow_forward(flow, z, rho, &cache);
  FlowGrads grads = FlowGrads::zeros(flow);
  const FlowBackwardResult back =
      flow_forward_backward(flow, cache, wy, wl, grads);

  const Matrix fd_z = nirtest::fd_grad(
      [&](const Matrix& zz) { return objective(zz, rho); }, z);
  REQUIRE(nirtest::max_rel_err(back.d_in, fd_z) < 1e-6);

  const Matrix fd_rho = nirtest::fd_grad(
      [&](const Matrix& r) { return objective(z, r); }, rho);
  REQUIRE(nirtest::max_rel_err(back.d_cond, fd_rho) < 1e-6);

  const int np = flow.num_params();
  Vector flat(np);
  flow.to_flat(flat.data());
  Vector analytic(np);
  grads.to_flat(analytic.data());
  ConditionalFlow probe = flow;
  const double step = 1e-6;
  double worst = 0.0;
  for (int k = 0; k < np; k += 3) {
    Vector pv = flat;
    pv(k) += step;
    probe.from_flat(pv.data());
    const double up = [&] {
      const FlowResult r = flow_forward(probe, z, rho);
      return (r.out.array() * wy.array()).sum() + r.logdet.dot(wl);
    }();
    pv(k) = flat(k) - step;
    probe.from_flat(pv.data());
    const double dn = [&] {
      const FlowResult r = flow_forward(probe, z, rho);
      return (r.out.array() * wy.array()).sum() + r.logdet.dot(wl);
    }();
    const double fd = (up - dn) / (2.0 * step);
    const double denom = std::max({std::abs(fd), std::abs(analytic(k)), 1e-6});
    worst = std::max(worst, std::abs(fd - analytic(k)) / denom);
  }
  REQUIRE(worst < 1e-5);
}

TEST_CASE("residual sampler is seeded and roughly standard normal") {
  const Matrix a = sample_residual(2000, 4, 42);
  const Matrix b = sample_residual(2000, 4, 42);
  const Matrix c = sample_residual(2000, 4, 43);
  REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((a - c).cwiseAbs().maxCoeff() > 0.0);
  REQUIRE(std::abs(a.mean()) < 0.05);
  const double var = (a.array() - a.mean()).square().mean();
  REQUIRE_THAT(var, WithinAbs(1.0, 0.08));
}

TEST_CASE("log density integrates against the change of variables") {
  // Sanity: for the identity flow the log density is the standard normal's.
  const ConditionalFlow flow = make_flow(2, 2, 6, Placement::All, 0.0, 19);
  Rng rng(20);
  const Matrix psi = gaussian_matrix(5, 2, rng);
  const Matrix rho = l2_normalize_rows(gaussian_matrix(5, 2, rng));
  const Vector ld = flow_log_density(flow, psi, rho);
  const Vector expect = standard_normal_logpdf(psi);
  REQUIRE((ld - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("odd dimension is rejected") {
  FlowConfig cfg;
  cfg.dim = 7;
  Rng rng(1);
  REQUIRE_THROWS_MATCHES(ConditionalFlow(cfg, rng), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == ErrorCode::InvalidSpec;
                         }));
}

TEST_CASE("dimension mismatches are rejected") {
  const ConditionalFlow flow = make_flow(6, 2, 8, Placement::All, 0.0, 21);
  Rng rng(22);
  const Matrix z = gaussian_matrix(3, 6, rng);
  const Matrix bad_rho = gaussian_matrix(2, 6, rng);
  REQUIRE_THROWS_MATCHES(flow_forward(flow, z, bad_rho), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == ErrorCode::DimensionMismatch;
                         }));
}
