#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gnnpipe/graph.hpp"
#include "gnnpipe/tensor.hpp"

namespace gnnpipe {

struct MissingValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Neighbor aggregation for a slice of owned vertices: row v of A^ * H.
// `lookup(global_id)` must return the neighbor's width-sized activation row;
// a null return is a pipeline bug (missing ghost), never silently zero-filled.
template <typename T, typename LookupFn>
DenseMatrix<T> gather_rows(const Partition& p, const std::vector<uint32_t>& local_vertices,
                           size_t width, LookupFn&& lookup) {
  DenseMatrix<T> out(local_vertices.size(), width);
  for (size_t r = 0; r < local_vertices.size(); ++r) {
    const uint32_t lv = local_vertices[r];
    T* dst = out.row(r);
    const T* self = lookup(p.owned[lv]);
    if (!self)
      throw MissingValueError("gather: missing value for own vertex " + std::to_string(p.owned[lv]));
    const T sn = static_cast<T>(p.self_norm[lv]);
    for (size_t j = 0; j < width; ++j) dst[j] = sn * self[j];
    for (uint64_t e = p.in_offsets[lv]; e < p.in_offsets[lv + 1]; ++e) {
      const T* src = lookup(p.in_sources[e]);
      if (!src)
        throw MissingValueError("gather: missing ghost value for vertex " +
                                std::to_string(p.in_sources[e]));
      const T w = static_cast<T>(p.in_norms[e]);
      for (size_t j = 0; j < width; ++j) dst[j] += w * src[j];
    }
  }
  return out;
}

// Reverse-direction aggregation: row v of A^T * D, walking the out-CSR so the
// implementation stays correct for directed inputs.
template <typename T, typename LookupFn>
DenseMatrix<T> backward_gather_rows(const Partition& p, const std::vector<uint32_t>& local_vertices,
                                    size_t width, LookupFn&& lookup) {
  DenseMatrix<T> out(local_vertices.size(), width);
  for (size_t r = 0; r < local_vertices.size(); ++r) {
    const uint32_t lv = local_vertices[r];
    T* dst = out.row(r);
    const T* self = lookup(p.owned[lv]);
    if (!self)
      throw MissingValueError("backward_gather: missing value for own vertex " +
                              std::to_string(p.owned[lv]));
    const T sn = static_cast<T>(p.self_norm[lv]);
    for (size_t j = 0; j < width; ++j) dst[j] = sn * self[j];
    for (uint64_t e = p.out_offsets[lv]; e < p.out_offsets[lv + 1]; ++e) {
      const T* src = lookup(p.out_targets[e]);
      if (!src)
        throw MissingValueError("backward_gather: missing ghost gradient for vertex " +
                                std::to_string(p.out_targets[e]));
      const T w = static_cast<T>(p.out_norms[e]);
      for (size_t j = 0; j < width; ++j) dst[j] += w * src[j];
    }
  }
  return out;
}

template <typename T>
struct ApplyVertexResult {
  DenseMatrix<T> output;          // sigma(pre) for hidden layers, raw logits for the last
  DenseMatrix<T> pre_activation;  // in_l, stashed (or rematerialized) for the backward pass
};

template <typename T>
ApplyVertexResult<T> apply_vertex(const DenseMatrix<T>& gathered, const DenseMatrix<T>& weights,
                                  bool last_layer) {
  ApplyVertexResult<T> res;
  res.pre_activation = matmul(gathered, weights);
  res.output = last_layer ? res.pre_activation : relu(res.pre_activation);
  return res;
}

// ApplyEdge is an identity for GCN; the stage is kept for model generality.
template <typename T>
const DenseMatrix<T>& apply_edge(const DenseMatrix<T>& chunk) {
  return chunk;
}

// Rows destined for one remote partition.
template <typename T>
struct GhostMessage {
  uint32_t to_partition = 0;
  std::vector<VertexId> vertices;  // global ids, ascending
  DenseMatrix<T> rows;
};

// Builds exactly one message per destination partition whose send-list
// intersects the interval. `send_lists` is the forward or backward plan.
template <typename T>
std::vector<GhostMessage<T>> scatter_messages(const Partition& p,
                                              const std::vector<std::vector<VertexId>>& send_lists,
                                              const std::vector<uint32_t>& local_vertices,
                                              const DenseMatrix<T>& chunk) {
  if (chunk.rows() != local_vertices.size())
    throw ShapeError("scatter: chunk rows " + std::to_string(chunk.rows()) + " != interval size " +
                     std::to_string(local_vertices.size()));
  std::vector<uint32_t> row_of(p.global_to_local.size(), UINT32_MAX);
  for (size_t r = 0; r < local_vertices.size(); ++r) row_of[p.owned[local_vertices[r]]] = r;

  std::vector<GhostMessage<T>> messages;
  for (uint32_t q = 0; q < send_lists.size(); ++q) {
    if (q == p.partition_id) continue;
    GhostMessage<T> msg;
    msg.to_partition = q;
    for (VertexId v : send_lists[q])
      if (row_of[v] != UINT32_MAX) msg.vertices.push_back(v);
    if (msg.vertices.empty()) continue;
    msg.rows = DenseMatrix<T>(msg.vertices.size(), chunk.cols());
    for (size_t r = 0; r < msg.vertices.size(); ++r) {
      const T* src = chunk.row(row_of[msg.vertices[r]]);
      std::copy(src, src + chunk.cols(), msg.rows.row(r));
    }
    messages.push_back(std::move(msg));
  }
  return messages;
}

template <typename T>
struct GradApplyVertexResult {
  DenseMatrix<T> grad_weights;  // (A^H)^T * delta_post, this interval's contribution
  DenseMatrix<T> downstream;    // delta_post * W^T
};

// Backward of ApplyVertex against the stashed context. `pre_activation` may be
// rematerialized by the caller; `is_output_layer` skips the sigma' mask.
template <typename T>
GradApplyVertexResult<T> grad_apply_vertex(const DenseMatrix<T>& gathered_input,
                                           const DenseMatrix<T>& pre_activation,
                                           const DenseMatrix<T>& weights,
                                           const DenseMatrix<T>& upstream, bool is_output_layer) {
  DenseMatrix<T> delta_post =
      is_output_layer ? upstream : relu_backward(pre_activation, upstream);
  GradApplyVertexResult<T> res;
  res.grad_weights = matmul(transpose(gathered_input), delta_post);
  res.downstream = matmul(delta_post, transpose(weights));
  return res;
}

// ---------------------------------------------------------------------------
// Dense reference oracle. Materializes A^ explicitly and evaluates the layer
// rule and its backward directly; ground truth for equivalence tests.
// ---------------------------------------------------------------------------

inline constexpr VertexId kDenseOracleVertexLimit = 20000;

template <typename T>
DenseMatrix<T> dense_adjacency(const Graph& g) {
  if (g.num_vertices > kDenseOracleVertexLimit)
    throw std::invalid_argument("dense_adjacency: graph too large to densify (" +
                                std::to_string(g.num_vertices) + " vertices)");
  DenseMatrix<T> a(g.num_vertices, g.num_vertices);
  for (VertexId v = 0; v < g.num_vertices; ++v) {
    a(v, v) = static_cast<T>(g.self_norm[v]);
    for (uint64_t e = g.in_offsets[v]; e < g.in_offsets[v + 1]; ++e)
      a(v, g.in_sources[e]) = static_cast<T>(g.in_norms[e]);
  }
  return a;
}

template <typename T>
struct OracleForward {
  std::vector<DenseMatrix<T>> activations;  // activations[0] = X, activations[L] = logits
  std::vector<DenseMatrix<T>> gathered;     // gathered[l] = A^ * activations[l]
  std::vector<DenseMatrix<T>> pre;          // pre[l] = in_l
  const DenseMatrix<T>& logits() const { return activations.back(); }
};

template <typename T>
OracleForward<T> dense_oracle_forward(const Graph& g, const DenseMatrix<T>& features,
                                      const std::vector<DenseMatrix<T>>& weights) {
  const DenseMatrix<T> adj = dense_adjacency<T>(g);
  OracleForward<T> fw;
  fw.activations.push_back(features);
  for (size_t l = 0; l < weights.size(); ++l) {
    fw.gathered.push_back(matmul(adj, fw.activations[l]));
    fw.pre.push_back(matmul(fw.gathered[l], weights[l]));
    const bool last = (l + 1 == weights.size());
    fw.activations.push_back(last ? fw.pre[l] : relu(fw.pre[l]));
  }
  return fw;
}

template <typename T>
struct OracleBackward {
  std::vector<DenseMatrix<T>> grad_weights;
  double loss = 0.0;
};

template <typename T>
OracleBackward<T> dense_oracle_backward(const Graph& g, const DenseMatrix<T>& features,
                                        const std::vector<DenseMatrix<T>>& weights,
                                        const DenseMatrix<T>& labels_onehot,
                                        const std::vector<uint32_t>& mask) {
  const DenseMatrix<T> adj = dense_adjacency<T>(g);
  const DenseMatrix<T> adj_t = transpose(adj);
  OracleForward<T> fw = dense_oracle_forward(g, features, weights);

  OracleBackward<T> bw;
  bw.grad_weights.resize(weights.size());
  LossResult<T> loss = softmax_cross_entropy(fw.logits(), labels_onehot, mask);
  bw.loss = loss.loss;

  DenseMatrix<T> upstream = std::move(loss.grad);  // d loss / d activations[l+1]
  for (size_t l = weights.size(); l-- > 0;) {
    const bool last = (l + 1 == weights.size());
    DenseMatrix<T> delta_post = last ? upstream : relu_backward(fw.pre[l], upstream);
    bw.grad_weights[l] = matmul(transpose(fw.gathered[l]), delta_post);
    if (l > 0) upstream = matmul(adj_t, matmul(delta_post, transpose(weights[l])));
  }
  return bw;
}

}  // namespace gnnpipe
