#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gnnpipe/graph.hpp"
#include "gnnpipe/rng.hpp"
#include "gnnpipe/tensor.hpp"

namespace gnnpipe {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace bsnap {

inline std::vector<uint8_t> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path);
  const std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> buf(static_cast<size_t>(size));
  if (size > 0 && !in.read(reinterpret_cast<char*>(buf.data()), size))
    throw IoError("short read on " + path);
  return buf;
}

inline uint32_t u32_at(const std::vector<uint8_t>& b, size_t off) {
  return static_cast<uint32_t>(b[off]) | (static_cast<uint32_t>(b[off + 1]) << 8) |
         (static_cast<uint32_t>(b[off + 2]) << 16) | (static_cast<uint32_t>(b[off + 3]) << 24);
}

inline void put_u32(std::vector<uint8_t>& b, uint32_t v) {
  b.push_back(static_cast<uint8_t>(v));
  b.push_back(static_cast<uint8_t>(v >> 8));
  b.push_back(static_cast<uint8_t>(v >> 16));
  b.push_back(static_cast<uint8_t>(v >> 24));
}

inline void write_all(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace bsnap

// graph.bsnap: raw binary edge list of little-endian u32 pairs.
inline std::vector<Edge> load_graph_bsnap(const std::string& path, VertexId num_vertices) {
  auto bytes = bsnap::read_all(path);
  if (bytes.size() % 8 != 0)
    throw IoError("graph.bsnap: length " + std::to_string(bytes.size()) +
                  " is not a multiple of 8");
  std::vector<Edge> edges;
  edges.reserve(bytes.size() / 8);
  for (size_t off = 0; off < bytes.size(); off += 8) {
    const uint32_t u = bsnap::u32_at(bytes, off);
    const uint32_t v = bsnap::u32_at(bytes, off + 4);
    if (u >= num_vertices || v >= num_vertices)
      throw IoError("graph.bsnap: vertex id " + std::to_string(std::max(u, v)) +
                    " out of range for " + std::to_string(num_vertices) + " vertices");
    edges.emplace_back(u, v);
  }
  return edges;
}

inline void write_graph_bsnap(const std::string& path, const std::vector<Edge>& edges) {
  std::vector<uint8_t> bytes;
  bytes.reserve(edges.size() * 8);
  for (const auto& [u, v] : edges) {
    bsnap::put_u32(bytes, u);
    bsnap::put_u32(bytes, v);
  }
  bsnap::write_all(path, bytes);
}

// features.bsnap: [numFeats u32][v0 feats f32...][v1 feats...].
inline MatrixF load_features_bsnap(const std::string& path, VertexId num_vertices) {
  auto bytes = bsnap::read_all(path);
  if (bytes.size() < 4) throw IoError("features.bsnap: missing header");
  const uint32_t num_feats = bsnap::u32_at(bytes, 0);
  const size_t expected = 4 + static_cast<size_t>(num_vertices) * num_feats * 4;
  if (bytes.size() != expected)
    throw IoError("features.bsnap: expected " + std::to_string(expected) + " bytes, got " +
                  std::to_string(bytes.size()));
  MatrixF m(num_vertices, num_feats);
  for (size_t i = 0; i < m.size(); ++i)
    m.data()[i] = std::bit_cast<float>(bsnap::u32_at(bytes, 4 + i * 4));
  return m;
}

inline void write_features_bsnap(const std::string& path, const MatrixF& features) {
  std::vector<uint8_t> bytes;
  bsnap::put_u32(bytes, static_cast<uint32_t>(features.cols()));
  for (size_t i = 0; i < features.size(); ++i)
    bsnap::put_u32(bytes, std::bit_cast<uint32_t>(features.data()[i]));
  bsnap::write_all(path, bytes);
}

// labels.bsnap: [numLabels u32][label0 u32][label1]...
struct Labels {
  uint32_t num_classes = 0;
  std::vector<uint32_t> values;
};

inline Labels load_labels_bsnap(const std::string& path, VertexId num_vertices) {
  auto bytes = bsnap::read_all(path);
  if (bytes.size() < 4) throw IoError("labels.bsnap: missing header");
  const uint32_t num_classes = bsnap::u32_at(bytes, 0);
  const size_t expected = 4 + static_cast<size_t>(num_vertices) * 4;
  if (bytes.size() != expected)
    throw IoError("labels.bsnap: expected " + std::to_string(expected) + " bytes, got " +
                  std::to_string(bytes.size()));
  Labels out;
  out.num_classes = num_classes;
  out.values.reserve(num_vertices);
  for (VertexId v = 0; v < num_vertices; ++v) {
    const uint32_t label = bsnap::u32_at(bytes, 4 + static_cast<size_t>(v) * 4);
    if (label >= num_classes)
      throw IoError("labels.bsnap: label " + std::to_string(label) + " out of range for " +
                    std::to_string(num_classes) + " classes");
    out.values.push_back(label);
  }
  return out;
}

inline void write_labels_bsnap(const std::string& path, const Labels& labels) {
  std::vector<uint8_t> bytes;
  bsnap::put_u32(bytes, labels.num_classes);
  for (uint32_t v : labels.values) bsnap::put_u32(bytes, v);
  bsnap::write_all(path, bytes);
}

// One-hot expansion on demand.
inline MatrixF labels_to_onehot(const Labels& labels) {
  MatrixF m(labels.values.size(), labels.num_classes);
  for (size_t v = 0; v < labels.values.size(); ++v) m(v, labels.values[v]) = 1.0f;
  return m;
}

// Stochastic block model: community id is the label, features are a community
// indicator plus Gaussian noise. Deterministic per seed.
struct SbmDataset {
  std::vector<Edge> edges;  // directed, both directions
  MatrixF features;
  Labels labels;
  VertexId num_vertices = 0;
};

inline SbmDataset synth_sbm(uint32_t communities, uint32_t per_community, double p_in,
                            double p_out, uint64_t seed, double noise = 0.3) {
  if (p_in < 0 || p_in > 1 || p_out < 0 || p_out > 1)
    throw std::invalid_argument("synth_sbm: probabilities must be in [0,1]");
  if (communities == 0 || per_community == 0)
    throw std::invalid_argument("synth_sbm: empty model");
  SbmDataset ds;
  ds.num_vertices = communities * per_community;
  Rng rng(seed);

  std::vector<Edge> pairs;
  for (VertexId u = 0; u < ds.num_vertices; ++u)
    for (VertexId v = u + 1; v < ds.num_vertices; ++v) {
      const bool same = (u / per_community) == (v / per_community);
      if (rng.next_bernoulli(same ? p_in : p_out)) pairs.emplace_back(u, v);
    }
  ds.edges = expand_undirected(pairs);

  const size_t width = communities + 4;
  ds.features = MatrixF(ds.num_vertices, width);
  ds.labels.num_classes = communities;
  for (VertexId v = 0; v < ds.num_vertices; ++v) {
    const uint32_t c = v / per_community;
    ds.labels.values.push_back(c);
    for (size_t j = 0; j < width; ++j)
      ds.features(v, j) = static_cast<float>(noise * rng.next_normal()) + (j == c ? 1.0f : 0.0f);
  }
  return ds;
}

}  // namespace gnnpipe
