#pragma once

// Training loop: class-balanced batches, the combined objective with optional
// synthetic self-regularization, grouped Adam with warmup freezing, and a
// finite-difference gradient checker over the full parameter set.

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "nir/common.hpp"
#include "nir/embedding.hpp"
#include "nir/losses.hpp"
#include "nir/metrics.hpp"
#include "nir/model.hpp"
#include "nir/objective.hpp"
#include "nir/optimizer.hpp"
#include "nir/synthetic.hpp"

namespace nir {

struct TrainConfig {
  int epochs = 40;
  int classes_per_batch = 8;
  int samples_per_class = 4;
  int warmup_epochs = 1;
  std::uint64_t seed = 0;
  bool eval_every_epoch = false;
  AdamConfig adam;
  double proxy_lr_mult = 4000.0;
  double flow_lr_mult = 50.0;
  bool weight_decay_proxies = false;
  bool weight_decay_flow = false;
  LossConfig loss;
  NirConfig nir;

  void validate() const {
    require(epochs >= 0 && warmup_epochs >= 0, ErrorCode::ConfigError,
            "epoch counts must be non-negative");
    require(classes_per_batch >= 1 && samples_per_class >= 1 &&
                classes_per_batch * samples_per_class >= 2,
            ErrorCode::ConfigError, "batch must hold at least two samples");
    nir.validate();
  }
};

// P_b distinct classes, K_b samples each; within a class sampling is without
// replacement when enough members exist, with replacement otherwise.
inline std::vector<int> sample_batch(const std::vector<std::vector<int>>& members,
                                     int P_b, int K_b, Rng& rng) {
  const int num_classes = static_cast<int>(members.size());
  require(num_classes >= P_b, ErrorCode::InsufficientClasses,
          "fewer classes than classes_per_batch");
  std::vector<int> classes(num_classes);
  for (int c = 0; c < num_classes; ++c) classes[c] = c;
  for (int i = 0; i < P_b; ++i) {
    const auto j = i + uniform_index(
                           static_cast<std::uint64_t>(num_classes - i), rng);
    std::swap(classes[i], classes[static_cast<int>(j)]);
  }
  std::vector<int> out;
  out.reserve(P_b * K_b);
  for (int i = 0; i < P_b; ++i) {
    const auto& m = members[classes[i]];
    const int sz = static_cast<int>(m.size());
    if (sz >= K_b) {
      std::vector<int> local(m);
      for (int k = 0; k < K_b; ++k) {
        const auto j =
            k + uniform_index(static_cast<std::uint64_t>(sz - k), rng);
        std::swap(local[k], local[static_cast<int>(j)]);
        out.push_back(local[k]);
      }
    } else {
      for (int k = 0; k < K_b; ++k)
        out.push_back(m[uniform_index(static_cast<std::uint64_t>(sz), rng)]);
    }
  }
  return out;
}

inline std::vector<std::vector<int>> class_members(const std::vector<int>& labels) {
  int k = 0;
  for (int y : labels) k = std::max(k, y + 1);
  std::vector<std::vector<int>> members(k);
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(
      static_cast<int>(i));
  return members;
}

struct StepEval {
  double value = 0.0;
  double nir_value = 0.0;
  double scaled_nir = 0.0;
  double dml_value = 0.0;
  double neg_pair_value = 0.0;
  double self_reg_value = 0.0;
  std::vector<Vector> grads;  // embedder, proxies, flow
};

// Full loss-and-gradient evaluation of one batch as a deterministic function
// of the model parameters and the two sampling seeds.
inline StepEval evaluate_step(const Model& model, const Matrix& features,
                              const std::vector<int>& labels,
                              const LossConfig& loss_cfg,
                              const NirConfig& nir_cfg,
                              std::uint64_t neg_seed = 0,
                              std::uint64_t synth_seed = 0) {
  StepEval ev;
  DenseNet::Cache cache;
  Matrix raw;
  const Matrix psi = model.embedder.embed(features, &cache, &raw);
  const EmbeddingBatch batch{psi, labels};
  const int C = model.proxies.num_classes();
  const int d = model.proxies.dim();

  Matrix d_psi;
  Matrix d_prox;
  FlowGrads fg = FlowGrads::zeros(model.flow);

  if (nir_cfg.enabled) {
    Rng neg_rng(neg_seed);
    CombinedResult comb = combined_objective(batch, model.proxies, model.flow,
                                             loss_cfg, nir_cfg, neg_rng);
    ev.value = comb.value;
    ev.nir_value = comb.nir_value;
    ev.scaled_nir = comb.scaled_nir;
    ev.dml_value = comb.dml_value;
    ev.neg_pair_value = comb.neg_pair_value;
    d_psi = std::move(comb.d_embeddings);
    d_prox = std::move(comb.d_proxies);
    fg = std::move(comb.d_flow);

    if (nir_cfg.self_reg != SelfRegMode::Off) {
      const int per = nir_cfg.self_reg_per_class;
      const int ns = C * per;
      const Matrix zeta = sample_residual(ns, d, synth_seed);
      Matrix rho(ns, d);
      std::vector<int> slabels;
      slabels.reserve(ns);
      for (int c = 0; c < C; ++c)
        for (int k = 0; k < per; ++k) {
          rho.row(c * per + k) = model.proxies.proxies.row(c);
          slabels.push_back(model.proxies.class_ids[c]);
        }
      FlowCache fc;
      const FlowResult fwd = flow_forward(model.flow, zeta, rho, &fc);
      const Matrix psi_s = l2_normalize_rows(fwd.out);
      const EmbeddingBatch sbatch{psi_s, slabels};
      LossValueWithGrads sreg =
          self_reg_loss(nir_cfg.self_reg, sbatch, model.proxies, loss_cfg);
      ev.self_reg_value = nir_cfg.omega * sreg.value;
      ev.value += ev.self_reg_value;
      d_prox += nir_cfg.omega * sreg.d_proxies;
      if (nir_cfg.self_reg == SelfRegMode::ReverseMatch ||
          nir_cfg.self_reg == SelfRegMode::GenerateAndMatch) {
        const Matrix d_raw_s = l2_normalize_rows_backward(
            fwd.out, psi_s, nir_cfg.omega * sreg.d_embeddings);
        const FlowBackwardResult fb = flow_forward_backward(
            model.flow, fc, d_raw_s, Vector::Zero(ns), fg);
        if (nir_cfg.self_reg == SelfRegMode::GenerateAndMatch)
          for (int r = 0; r < ns; ++r)
            d_prox.row(r / per) += fb.d_cond.row(r);
      }
    }
  } else {
    LossValueWithGrads dml = proxy_loss(batch, model.proxies, loss_cfg);
    ev.value = dml.value;
    ev.dml_value = dml.value;
    d_psi = std::move(dml.d_embeddings);
    d_prox = std::move(dml.d_proxies);
  }

  const Matrix d_raw = l2_normalize_rows_backward(raw, psi, d_psi);
  DenseNetGrads eg = model.embedder.net.make_grads();
  model.embedder.net.backward(d_raw, cache, eg);

  ev.grads.resize(3);
  ev.grads[0].resize(model.embedder.net.num_params());
  grads_to_flat(eg, ev.grads[0].data());
  ev.grads[1].resize(C * d);
  for (int r = 0, k = 0; r < C; ++r)
    for (int c = 0; c < d; ++c) ev.grads[1](k++) = d_prox(r, c);
  ev.grads[2].resize(model.flow.num_params());
  fg.to_flat(ev.grads[2].data());
  return ev;
}

struct EpochRecord {
  int epoch = 0;
  double mean_value = 0.0;
  double mean_nir = 0.0;
  double mean_scaled_nir = 0.0;
  double mean_dml = 0.0;
  double mean_neg_pair = 0.0;
  double mean_self_reg = 0.0;
  double mean_grad_norm = 0.0;
  double wall_seconds = 0.0;
  bool has_test = false;
  MetricsReport test;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int total_steps = 0;
};

inline TrainLog train(const RawDataset& train_set, const RawDataset* test_set,
                      Model& model, const TrainConfig& cfg) {
  cfg.validate();
  require(train_set.size() > 0, ErrorCode::EmptyBatch, "empty training set");
  require(train_set.dim() == model.embedder.input_dim(),
          ErrorCode::DimensionMismatch, "feature width != embedder input");
  require(model.embedder.output_dim() == model.proxies.dim(),
          ErrorCode::DimensionMismatch, "embedder output != proxy dim");
  if (model.flow.depth() > 0)
    require(model.flow.dim() == model.proxies.dim(),
            ErrorCode::DimensionMismatch, "flow dim != proxy dim");

  Rng rng(cfg.seed);
  const auto members = class_members(train_set.labels);

  auto groups = model.to_groups();
  Adam adam(cfg.adam,
            {{"embedder", static_cast<int>(groups[0].size()), 1.0, true},
             {"proxies", static_cast<int>(groups[1].size()), cfg.proxy_lr_mult,
              cfg.weight_decay_proxies},
             {"flow", static_cast<int>(groups[2].size()), cfg.flow_lr_mult,
              cfg.weight_decay_flow}});

  const int batch_size = cfg.classes_per_batch * cfg.samples_per_class;
  const int steps_per_epoch =
      std::max(1, (train_set.size() + batch_size - 1) / batch_size);

  TrainLog log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    const bool warm = epoch < cfg.warmup_epochs;
    const std::vector<bool> active =
        warm ? std::vector<bool>{false, false, true}
             : std::vector<bool>{true, true, true};

    for (int s = 0; s < steps_per_epoch; ++s) {
      const auto idx = sample_batch(members, cfg.classes_per_batch,
                                    cfg.samples_per_class, rng);
      Matrix feats(static_cast<int>(idx.size()), train_set.dim());
      std::vector<int> labels(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        feats.row(static_cast<int>(i)) = train_set.features.row(idx[i]);
        labels[i] = train_set.labels[idx[i]];
      }
      const std::uint64_t neg_seed =
          (cfg.nir.enabled && cfg.nir.negative_pairs) ? rng() : 0;
      const std::uint64_t synth_seed =
          (cfg.nir.enabled && cfg.nir.self_reg != SelfRegMode::Off) ? rng() : 0;

      // Warmup fits the flow to the frozen embeddings by plain maximum
      // likelihood. The monotone wrapper only rescales the flow gradient,
      // except in its clamped region where it zeroes it; at realistic
      // dimensions the initial likelihood starts in that region, so warming
      // up through the wrapper would never move the flow at all.
      StepEval ev;
      if (warm && cfg.nir.enabled) {
        const Matrix psi = model.embedder.embed(feats);
        NirLossResult nl =
            nir_loss({psi, labels}, model.proxies, model.flow, false);
        ev.value = nl.value;
        ev.nir_value = nl.value;
        ev.grads.resize(3);
        ev.grads[0] = Vector::Zero(model.embedder.net.num_params());
        ev.grads[1] = Vector::Zero(model.proxies.proxies.size());
        ev.grads[2].resize(model.flow.num_params());
        nl.d_flow.to_flat(ev.grads[2].data());
      } else {
        ev = evaluate_step(model, feats, labels, cfg.loss, cfg.nir, neg_seed,
                           synth_seed);
      }
      require(std::isfinite(ev.value), ErrorCode::NonFiniteLoss,
              "non-finite loss at step " + std::to_string(log.total_steps));

      double sq = 0.0;
      for (int g = 0; g < 3; ++g)
        if (active[g]) sq += ev.grads[g].squaredNorm();
      const double gnorm = std::sqrt(sq);
      if (cfg.nir.grad_clip > 0.0 && gnorm > cfg.nir.grad_clip) {
        const double scale = cfg.nir.grad_clip / gnorm;
        for (auto& g : ev.grads) g *= scale;
      }

      groups = model.to_groups();
      adam.step(groups, ev.grads, &active);
      model.from_groups(groups);
      if (active[1]) model.proxies.renormalize();

      rec.mean_value += ev.value;
      rec.mean_nir += ev.nir_value;
      rec.mean_scaled_nir += ev.scaled_nir;
      rec.mean_dml += ev.dml_value;
      rec.mean_neg_pair += ev.neg_pair_value;
      rec.mean_self_reg += ev.self_reg_value;
      rec.mean_grad_norm += gnorm;
      ++log.total_steps;
    }
    rec.mean_value /= steps_per_epoch;
    rec.mean_nir /= steps_per_epoch;
    rec.mean_scaled_nir /= steps_per_epoch;
    rec.mean_dml /= steps_per_epoch;
    rec.mean_neg_pair /= steps_per_epoch;
    rec.mean_self_reg /= steps_per_epoch;
    rec.mean_grad_norm /= steps_per_epoch;

    if (cfg.eval_every_epoch && test_set && test_set->size() > 0) {
      const EmbeddingBatch te{model.embedder.embed(test_set->features),
                              test_set->labels};
      rec.test = evaluate_all(te);
      rec.has_test = true;
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    log.epochs.push_back(std::move(rec));
  }
  return log;
}

// Central-difference verification of analytic gradients over a random
// subsample of coordinates per group. Returns the worst relative error.
inline double grad_check(const std::function<double(const std::vector<Vector>&)>& f,
                         const std::vector<Vector>& params,
                         const std::vector<Vector>& analytic,
                         double step = 1e-5, int coords_per_group = 200,
                         std::uint64_t seed = 0) {
  Rng rng(seed);
  std::vector<Vector> p = params;
  double max_rel = 0.0;
  for (std::size_t g = 0; g < p.size(); ++g) {
    const int n = static_cast<int>(p[g].size());
    if (n == 0) continue;
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    const int take = std::min(coords_per_group, n);
    for (int k = 0; k < take; ++k) {
      const auto j = k + uniform_index(static_cast<std::uint64_t>(n - k), rng);
      std::swap(order[k], order[static_cast<int>(j)]);
      const int i = order[k];
      const double orig = p[g](i);
      p[g](i) = orig + step;
      const double plus = f(p);
      p[g](i) = orig - step;
      const double minus = f(p);
      p[g](i) = orig;
      const double fd = (plus - minus) / (2.0 * step);
      const double a = analytic[g](i);
      // near-zero coordinates sit below finite-difference noise, so the
      // floor switches them to an absolute comparison
      const double rel =
          std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-2});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// Gradient check of the full combined objective at the model's current
// parameters on a fixed batch.
inline double model_grad_check(const Model& model, const Matrix& features,
                               const std::vector<int>& labels,
                               const LossConfig& loss_cfg,
                               const NirConfig& nir_cfg,
                               std::uint64_t neg_seed = 1,
                               std::uint64_t synth_seed = 2,
                               double step = 1e-5, int coords_per_group = 200,
                               std::uint64_t seed = 0) {
  const StepEval ev = evaluate_step(model, features, labels, loss_cfg, nir_cfg,
                                    neg_seed, synth_seed);
  auto f = [&](const std::vector<Vector>& p) {
    Model m = model;
    m.from_groups(p);
    return evaluate_step(m, features, labels, loss_cfg, nir_cfg, neg_seed,
                         synth_seed)
        .value;
  };
  return grad_check(f, model.to_groups(), ev.grads, step, coords_per_group,
                    seed);
}

}  // namespace nir
