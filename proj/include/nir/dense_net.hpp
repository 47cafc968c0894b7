#pragma once

// Small dense networks with explicit reverse-mode passes. These back the
// coupling subnets and the desk-scale embedder; their parameter count is tiny,
// so forward/backward are done with batched Eigen products and an activation
// cache per call.

#include <vector>

#include "nir/common.hpp"

namespace nir {

struct DenseLayer {
  Matrix W;  // out x in
  Vector b;  // out
};

struct DenseNetGrads {
  std::vector<Matrix> dW;
  std::vector<Vector> db;

  void set_zero() {
    for (auto& m : dW) m.setZero();
    for (auto& v : db) v.setZero();
  }
  void add_scaled(const DenseNetGrads& other, double scale) {
    for (std::size_t l = 0; l < dW.size(); ++l) {
      dW[l] += scale * other.dW[l];
      db[l] += scale * other.db[l];
    }
  }
};

// Linear layers with ReLU between them and a linear output layer.
class DenseNet {
 public:
  DenseNet() = default;

  // dims = {in, hidden..., out}. He-scaled normal init for all layers;
  // `zero_last` zeroes the output layer so the network starts as the zero map.
  DenseNet(const std::vector<int>& dims, Rng& rng, bool zero_last = false) {
    require(dims.size() >= 2, ErrorCode::InvalidSpec, "need at least one layer");
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      DenseLayer layer;
      const double scale = std::sqrt(2.0 / static_cast<double>(dims[l]));
      layer.W = scale * gaussian_matrix(dims[l + 1], dims[l], rng);
      layer.b = Vector::Zero(dims[l + 1]);
      if (zero_last && l + 2 == dims.size()) layer.W.setZero();
      layers.push_back(std::move(layer));
    }
  }

  int input_dim() const { return static_cast<int>(layers.front().W.cols()); }
  int output_dim() const { return static_cast<int>(layers.back().W.rows()); }

  struct Cache {
    std::vector<Matrix> inputs;   // input to each layer (n x in_l)
    std::vector<Matrix> preacts;  // pre-activation of each hidden layer
  };

  // x: n x in. Returns n x out.
  Matrix forward(const Matrix& x, Cache* cache = nullptr) const {
    require(x.cols() == input_dim(), ErrorCode::DimensionMismatch,
            "dense net input width mismatch");
    Matrix a = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (cache) cache->inputs.push_back(a);
      Matrix z = a * layers[l].W.transpose();
      z.rowwise() += layers[l].b.transpose();
      if (l + 1 < layers.size()) {
        if (cache) cache->preacts.push_back(z);
        a = z.cwiseMax(0.0);
      } else {
        a = std::move(z);
      }
    }
    return a;
  }

  // d_out: n x out. Accumulates parameter gradients into `grads` and returns
  // the gradient with respect to the input.
  Matrix backward(const Matrix& d_out, const Cache& cache,
                  DenseNetGrads& grads) const {
    Matrix dz = d_out;
    for (int l = static_cast<int>(layers.size()) - 1; l >= 0; --l) {
      grads.dW[l] += dz.transpose() * cache.inputs[l];
      grads.db[l] += dz.colwise().sum().transpose();
      Matrix dx = dz * layers[l].W;
      if (l > 0) {
        dz = dx.cwiseProduct(
            (cache.preacts[l - 1].array() > 0.0).cast<double>().matrix());
      } else {
        dz = std::move(dx);
      }
    }
    return dz;
  }

  DenseNetGrads make_grads() const {
    DenseNetGrads g;
    for (const auto& layer : layers) {
      g.dW.push_back(Matrix::Zero(layer.W.rows(), layer.W.cols()));
      g.db.push_back(Vector::Zero(layer.b.size()));
    }
    return g;
  }

  int num_params() const {
    int n = 0;
    for (const auto& layer : layers)
      n += static_cast<int>(layer.W.size() + layer.b.size());
    return n;
  }

  // Flat layout: per layer, W row-major then b.
  void to_flat(double* dst) const {
    for (const auto& layer : layers) {
      for (Eigen::Index r = 0; r < layer.W.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.W.cols(); ++c) *dst++ = layer.W(r, c);
      for (Eigen::Index i = 0; i < layer.b.size(); ++i) *dst++ = layer.b(i);
    }
  }

  void from_flat(const double* src) {
    for (auto& layer : layers) {
      for (Eigen::Index r = 0; r < layer.W.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.W.cols(); ++c) layer.W(r, c) = *src++;
      for (Eigen::Index i = 0; i < layer.b.size(); ++i) layer.b(i) = *src++;
    }
  }

  std::vector<DenseLayer> layers;
};

inline void grads_to_flat(const DenseNetGrads& g, double* dst) {
  for (std::size_t l = 0; l < g.dW.size(); ++l) {
    for (Eigen::Index r = 0; r < g.dW[l].rows(); ++r)
      for (Eigen::Index c = 0; c < g.dW[l].cols(); ++c) *dst++ = g.dW[l](r, c);
    for (Eigen::Index i = 0; i < g.db[l].size(); ++i) *dst++ = g.db[l](i);
  }
}

}  // namespace nir
