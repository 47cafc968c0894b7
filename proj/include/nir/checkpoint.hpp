#pragma once

// Versioned little-endian binary checkpoints. Parameters are stored as 32-bit
// floats; headers carry every value needed to rebuild the architecture,
// including the materialized coordinate permutations of each coupling block.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "nir/model.hpp"

namespace nir {
namespace detail {

inline void put_bytes(std::vector<unsigned char>& out, const void* p, int n) {
  const auto* b = static_cast<const unsigned char*>(p);
  out.insert(out.end(), b, b + n);
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xff);
}

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back((v >> (8 * i)) & 0xff);
}

inline void put_f32(std::vector<unsigned char>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline void put_f64(std::vector<unsigned char>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct ByteReader {
  const unsigned char* p;
  const unsigned char* end;

  void need(int n) const {
    require(end - p >= n, ErrorCode::IoError, "truncated checkpoint");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    p += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
    p += 8;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
};

inline void put_params_f32(std::vector<unsigned char>& out,
                           const std::vector<double>& params) {
  for (double v : params) put_f32(out, static_cast<float>(v));
}

inline void append_flow(std::vector<unsigned char>& out,
                        const ConditionalFlow& flow) {
  put_bytes(out, "NIRFLOW1", 8);
  put_u32(out, static_cast<std::uint32_t>(flow.cfg.dim));
  put_u32(out, static_cast<std::uint32_t>(flow.cfg.depth));
  put_u32(out, static_cast<std::uint32_t>(flow.cfg.width));
  put_u32(out, static_cast<std::uint32_t>(flow.cfg.placement));
  put_f64(out, flow.cfg.clamp_scale);
  put_u64(out, flow.cfg.perm_seed);
  put_f64(out, flow.cfg.final_init_scale);
  for (const auto& blk : flow.blocks)
    for (int j : blk.perm) put_u32(out, static_cast<std::uint32_t>(j));
  std::vector<double> params(flow.num_params());
  flow.to_flat(params.data());
  put_params_f32(out, params);
}

inline ConditionalFlow read_flow(ByteReader& r) {
  r.need(8);
  require(std::memcmp(r.p, "NIRFLOW1", 8) == 0, ErrorCode::VersionMismatch,
          "bad flow blob magic/version");
  r.p += 8;
  FlowConfig cfg;
  cfg.dim = static_cast<int>(r.u32());
  cfg.depth = static_cast<int>(r.u32());
  cfg.width = static_cast<int>(r.u32());
  cfg.placement = static_cast<Placement>(r.u32());
  cfg.clamp_scale = r.f64();
  cfg.perm_seed = r.u64();
  cfg.final_init_scale = r.f64();
  Rng throwaway(0);
  ConditionalFlow flow(cfg, throwaway);
  for (auto& blk : flow.blocks)
    for (int j = 0; j < cfg.dim; ++j) blk.perm[j] = static_cast<int>(r.u32());
  std::vector<double> params(flow.num_params());
  for (auto& v : params) v = r.f32();
  flow.from_flat(params.data());
  return flow;
}

inline void append_dense_net(std::vector<unsigned char>& out,
                             const DenseNet& net) {
  put_u32(out, static_cast<std::uint32_t>(net.layers.size() + 1));
  put_u32(out, static_cast<std::uint32_t>(net.input_dim()));
  for (const auto& layer : net.layers)
    put_u32(out, static_cast<std::uint32_t>(layer.W.rows()));
  std::vector<double> params(net.num_params());
  net.to_flat(params.data());
  put_params_f32(out, params);
}

inline DenseNet read_dense_net(ByteReader& r) {
  const int ndims = static_cast<int>(r.u32());
  require(ndims >= 2 && ndims < 64, ErrorCode::IoError, "bad layer count");
  std::vector<int> dims(ndims);
  for (auto& d : dims) d = static_cast<int>(r.u32());
  Rng throwaway(0);
  DenseNet net(dims, throwaway);
  std::vector<double> params(net.num_params());
  for (auto& v : params) v = r.f32();
  net.from_flat(params.data());
  return net;
}

}  // namespace detail

inline std::vector<unsigned char> serialize_flow(const ConditionalFlow& flow) {
  std::vector<unsigned char> out;
  detail::append_flow(out, flow);
  return out;
}

inline ConditionalFlow deserialize_flow(const std::vector<unsigned char>& blob) {
  detail::ByteReader r{blob.data(), blob.data() + blob.size()};
  return detail::read_flow(r);
}

inline std::vector<unsigned char> serialize_model(const Model& model) {
  std::vector<unsigned char> out;
  detail::put_bytes(out, "NIRCKPT1", 8);
  detail::append_dense_net(out, model.embedder.net);
  detail::put_u32(out, static_cast<std::uint32_t>(model.proxies.num_classes()));
  detail::put_u32(out, static_cast<std::uint32_t>(model.proxies.dim()));
  for (int id : model.proxies.class_ids)
    detail::put_u32(out, static_cast<std::uint32_t>(id));
  std::vector<double> p(model.proxies.proxies.size());
  for (Eigen::Index r = 0, k = 0; r < model.proxies.proxies.rows(); ++r)
    for (Eigen::Index c = 0; c < model.proxies.proxies.cols(); ++c)
      p[k++] = model.proxies.proxies(r, c);
  detail::put_params_f32(out, p);
  detail::append_flow(out, model.flow);
  return out;
}

inline Model deserialize_model(const std::vector<unsigned char>& blob) {
  detail::ByteReader r{blob.data(), blob.data() + blob.size()};
  r.need(8);
  require(std::memcmp(r.p, "NIRCKPT1", 8) == 0, ErrorCode::VersionMismatch,
          "bad checkpoint magic/version");
  r.p += 8;
  Model model;
  model.embedder.net = detail::read_dense_net(r);
  const int C = static_cast<int>(r.u32());
  const int d = static_cast<int>(r.u32());
  model.proxies.proxies.resize(C, d);
  model.proxies.class_ids.resize(C);
  for (int c = 0; c < C; ++c)
    model.proxies.class_ids[c] = static_cast<int>(r.u32());
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < d; ++j) model.proxies.proxies(c, j) = r.f32();
  model.flow = detail::read_flow(r);
  return model;
}

inline void write_blob(const std::string& path,
                       const std::vector<unsigned char>& blob) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  require(f != nullptr, ErrorCode::IoError, "cannot open for writing: " + path);
  const std::size_t n = std::fwrite(blob.data(), 1, blob.size(), f);
  std::fclose(f);
  require(n == blob.size(), ErrorCode::IoError, "short write: " + path);
}

inline std::vector<unsigned char> read_blob(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  require(f != nullptr, ErrorCode::IoError, "cannot open for reading: " + path);
  std::fseek(f, 0, SEEK_END);
  const long size = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<unsigned char> blob(static_cast<std::size_t>(size));
  const std::size_t n = std::fread(blob.data(), 1, blob.size(), f);
  std::fclose(f);
  require(n == blob.size(), ErrorCode::IoError, "short read: " + path);
  return blob;
}

// Truncates every parameter to its stored 32-bit value, so in-memory metrics
// match what a reloaded checkpoint reproduces.
inline void round_trip_f32(Model& model) {
  model = deserialize_model(serialize_model(model));
}

}  // namespace nir
