#pragma once

// The trainable triple: a small dense embedder with output normalization,
// one proxy per class, and the conditional flow. Parameters flatten into
// three named groups for the optimizer and the checkpoint format.

#include <vector>

#include "nir/common.hpp"
#include "nir/dense_net.hpp"
#include "nir/embedding.hpp"
#include "nir/flow.hpp"

namespace nir {

struct Embedder {
  DenseNet net;

  Embedder() = default;
  Embedder(int in_dim, int hidden, int out_dim, Rng& rng)
      : net({in_dim, hidden, hidden, out_dim}, rng) {}

  int input_dim() const { return net.input_dim(); }
  int output_dim() const { return net.output_dim(); }

  // features -> unit-norm embeddings; `raw` receives the pre-normalization
  // output when a backward pass will follow.
  Matrix embed(const Matrix& features, DenseNet::Cache* cache = nullptr,
               Matrix* raw = nullptr) const {
    Matrix out = net.forward(features, cache);
    if (raw) *raw = out;
    return l2_normalize_rows(out);
  }
};

struct Model {
  Embedder embedder;
  ProxySet proxies;
  ConditionalFlow flow;

  int embed_dim() const { return proxies.dim(); }

  std::vector<Vector> to_groups() const {
    std::vector<Vector> g(3);
    g[0].resize(embedder.net.num_params());
    embedder.net.to_flat(g[0].data());
    g[1].resize(proxies.proxies.size());
    for (Eigen::Index r = 0, k = 0; r < proxies.proxies.rows(); ++r)
      for (Eigen::Index c = 0; c < proxies.proxies.cols(); ++c)
        g[1](k++) = proxies.proxies(r, c);
    g[2].resize(flow.num_params());
    flow.to_flat(g[2].data());
    return g;
  }

  void from_groups(const std::vector<Vector>& g) {
    require(g.size() == 3, ErrorCode::ShapeMismatch, "expected three groups");
    embedder.net.from_flat(g[0].data());
    for (Eigen::Index r = 0, k = 0; r < proxies.proxies.rows(); ++r)
      for (Eigen::Index c = 0; c < proxies.proxies.cols(); ++c)
        proxies.proxies(r, c) = g[1](k++);
    flow.from_flat(g[2].data());
  }
};

}  // namespace nir
