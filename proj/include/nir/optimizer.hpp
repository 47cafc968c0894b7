#pragma once

// Adam over named parameter groups with per-group learning-rate multipliers
// and optional decoupled group weight decay (applied as an L2 gradient term).
// A step validates every group's gradient before touching any parameter.

#include <string>
#include <vector>

#include "nir/common.hpp"

namespace nir {

struct AdamConfig {
  double base_lr = 1e-5;
  double weight_decay = 4e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  struct GroupSpec {
    std::string name;
    int size = 0;
    double lr_multiplier = 1.0;
    bool weight_decay = true;
  };

  Adam() = default;
  Adam(const AdamConfig& cfg, std::vector<GroupSpec> groups)
      : cfg_(cfg), groups_(std::move(groups)) {
    for (const auto& g : groups_) {
      m_.push_back(Vector::Zero(g.size));
      v_.push_back(Vector::Zero(g.size));
      steps_.push_back(0);
    }
  }

  int step_count(int group) const { return steps_[group]; }
  const std::vector<GroupSpec>& groups() const { return groups_; }

  // Updates the active groups in place (all of them when `active` is null);
  // frozen groups keep parameters, moments and step counters untouched.
  // Throws NonFiniteGradient before any mutation if an active gradient entry
  // is not finite.
  void step(std::vector<Vector>& params, const std::vector<Vector>& grads,
            const std::vector<bool>* active = nullptr) {
    require(params.size() == groups_.size() && grads.size() == groups_.size(),
            ErrorCode::ShapeMismatch, "group count mismatch");
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (active && !(*active)[g]) continue;
      require(params[g].size() == groups_[g].size &&
                  grads[g].size() == groups_[g].size,
              ErrorCode::ShapeMismatch,
              "group '" + groups_[g].name + "' size mismatch");
      require(grads[g].allFinite(), ErrorCode::NonFiniteGradient,
              "non-finite gradient in group '" + groups_[g].name + "'");
    }
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      if (active && !(*active)[g]) continue;
      const int t = ++steps_[g];
      const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
      const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
      const double lr = cfg_.base_lr * groups_[g].lr_multiplier;
      Vector grad = grads[g];
      if (groups_[g].weight_decay && cfg_.weight_decay != 0.0)
        grad += cfg_.weight_decay * params[g];
      m_[g] = cfg_.beta1 * m_[g] + (1.0 - cfg_.beta1) * grad;
      v_[g] = cfg_.beta2 * v_[g] +
              (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
      const Vector m_hat = m_[g] / bc1;
      const Vector v_hat = v_[g] / bc2;
      params[g] -=
          lr * m_hat.cwiseQuotient((v_hat.cwiseSqrt().array() + cfg_.eps).matrix());
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<GroupSpec> groups_;
  std::vector<Vector> m_, v_;
  std::vector<int> steps_;
};

// Scales all group gradients so their joint norm stays within `max_norm`.
// A non-positive bound disables clipping. Returns the pre-clip norm.
inline double clip_global_norm(std::vector<Vector>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) g *= scale;
  }
  return norm;
}

}  // namespace nir
