#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gnnpipe {

using VertexId = uint32_t;
using Edge = std::pair<VertexId, VertexId>;  // (source, target)

struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Global graph in CSR form, one row per target vertex (in-edges), plus the
// transposed adjacency (out-edges) for the backward direction. Self-loops are
// never stored explicitly: the A+I augmentation is carried analytically by
// self_norm. Coefficients implement D~^(-1/2) (A+I) D~^(-1/2) with
// d~(v) = in_degree(v) + 1.
struct Graph {
  VertexId num_vertices = 0;

  // in-edges: for target v, sources are in_sources[in_offsets[v]..in_offsets[v+1])
  std::vector<uint64_t> in_offsets;
  std::vector<VertexId> in_sources;
  std::vector<float> in_norms;  // 1/sqrt(d~(u) * d~(v)) per edge u->v

  // out-edges (reverse CSR): for source v, targets of v's out-edges
  std::vector<uint64_t> out_offsets;
  std::vector<VertexId> out_targets;
  std::vector<float> out_norms;  // same coefficient as the forward edge

  std::vector<float> self_norm;  // 1/d~(v)
  std::vector<VertexId> degree_tilde;  // d~(v) = in_degree + 1

  uint64_t num_edges() const { return in_sources.size(); }

  // Edges as a (source, target) multiset, for reassembly checks.
  std::vector<Edge> edge_list() const {
    std::vector<Edge> out;
    out.reserve(num_edges());
    for (VertexId v = 0; v < num_vertices; ++v)
      for (uint64_t i = in_offsets[v]; i < in_offsets[v + 1]; ++i)
        out.emplace_back(in_sources[i], v);
    return out;
  }
};

// Builds the CSR pair and normalization coefficients from a directed edge
// list. Input must be free of self-loops (the self-loop is added analytically)
// and duplicates.
inline Graph build_graph(std::vector<Edge> edges, VertexId num_vertices) {
  for (const auto& [u, v] : edges) {
    if (u >= num_vertices || v >= num_vertices)
      throw GraphError("build_graph: vertex id out of range: (" + std::to_string(u) + "," +
                       std::to_string(v) + ") with num_vertices " + std::to_string(num_vertices));
    if (u == v) throw GraphError("build_graph: self-loop on vertex " + std::to_string(u));
  }
  std::sort(edges.begin(), edges.end());
  for (size_t i = 1; i < edges.size(); ++i)
    if (edges[i] == edges[i - 1])
      throw GraphError("build_graph: duplicate edge (" + std::to_string(edges[i].first) + "," +
                       std::to_string(edges[i].second) + ")");

  Graph g;
  g.num_vertices = num_vertices;
  g.degree_tilde.assign(num_vertices, 1);  // +1 for the analytic self-loop
  for (const auto& [u, v] : edges) g.degree_tilde[v] += 1;

  g.self_norm.resize(num_vertices);
  for (VertexId v = 0; v < num_vertices; ++v) g.self_norm[v] = 1.0f / static_cast<float>(g.degree_tilde[v]);

  auto norm = [&](VertexId u, VertexId v) {
    return static_cast<float>(
        1.0 / std::sqrt(static_cast<double>(g.degree_tilde[u]) * static_cast<double>(g.degree_tilde[v])));
  };

  // in-CSR (edges sorted by source; re-bucket by target)
  g.in_offsets.assign(num_vertices + 1, 0);
  for (const auto& [u, v] : edges) g.in_offsets[v + 1] += 1;
  for (VertexId v = 0; v < num_vertices; ++v) g.in_offsets[v + 1] += g.in_offsets[v];
  g.in_sources.resize(edges.size());
  g.in_norms.resize(edges.size());
  {
    std::vector<uint64_t> cursor(g.in_offsets.begin(), g.in_offsets.end() - 1);
    for (const auto& [u, v] : edges) {
      uint64_t slot = cursor[v]++;
      g.in_sources[slot] = u;
      g.in_norms[slot] = norm(u, v);
    }
  }

  // out-CSR: edges already sorted by source
  g.out_offsets.assign(num_vertices + 1, 0);
  for (const auto& [u, v] : edges) g.out_offsets[u + 1] += 1;
  for (VertexId v = 0; v < num_vertices; ++v) g.out_offsets[v + 1] += g.out_offsets[v];
  g.out_targets.resize(edges.size());
  g.out_norms.resize(edges.size());
  {
    std::vector<uint64_t> cursor(g.out_offsets.begin(), g.out_offsets.end() - 1);
    for (const auto& [u, v] : edges) {
      uint64_t slot = cursor[u]++;
      g.out_targets[slot] = v;
      g.out_norms[slot] = norm(u, v);
    }
  }
  return g;
}

// Expands undirected pairs to both directions, deduplicating (a file that
// already lists both directions loads the same graph).
inline std::vector<Edge> expand_undirected(const std::vector<Edge>& pairs) {
  std::vector<Edge> out;
  out.reserve(pairs.size() * 2);
  for (const auto& [u, v] : pairs) {
    out.emplace_back(u, v);
    out.emplace_back(v, u);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// One partition of the global graph under an edge-cut assignment. Owned
// vertices keep their global ids; kernels resolve neighbor values through a
// global-id lookup, so local structures store global ids directly.
struct Partition {
  uint32_t partition_id = 0;
  std::vector<VertexId> owned;                 // ascending global ids
  std::vector<uint32_t> global_to_local;       // UINT32_MAX if not owned

  // local in-CSR slice: row i corresponds to owned[i]
  std::vector<uint64_t> in_offsets;
  std::vector<VertexId> in_sources;  // global ids (owned or ghost)
  std::vector<float> in_norms;

  // local out-CSR slice (reverse direction)
  std::vector<uint64_t> out_offsets;
  std::vector<VertexId> out_targets;  // global ids
  std::vector<float> out_norms;

  std::vector<float> self_norm;

  // Forward ghost plan: fwd_send[q] = owned vertices whose activations
  // partition q consumes; fwd_recv[q] = q's vertices we consume.
  // Backward plan mirrors along reversed edges (gradients flow backwards).
  std::vector<std::vector<VertexId>> fwd_send, fwd_recv;
  std::vector<std::vector<VertexId>> bwd_send, bwd_recv;

  size_t num_owned() const { return owned.size(); }
  bool owns(VertexId v) const { return global_to_local[v] != UINT32_MAX; }

  uint64_t local_in_edges() const { return in_sources.size(); }
};

inline std::vector<Partition> partition_graph(const Graph& g, const std::vector<uint32_t>& assignment) {
  if (assignment.size() != g.num_vertices)
    throw GraphError("partition_graph: assignment length " + std::to_string(assignment.size()) +
                     " != num_vertices " + std::to_string(g.num_vertices));
  uint32_t num_parts = 0;
  for (uint32_t a : assignment) num_parts = std::max(num_parts, a + 1);
  if (num_parts == 0) throw GraphError("partition_graph: empty assignment");

  std::vector<Partition> parts(num_parts);
  for (uint32_t p = 0; p < num_parts; ++p) {
    parts[p].partition_id = p;
    parts[p].global_to_local.assign(g.num_vertices, UINT32_MAX);
    parts[p].fwd_send.resize(num_parts);
    parts[p].fwd_recv.resize(num_parts);
    parts[p].bwd_send.resize(num_parts);
    parts[p].bwd_recv.resize(num_parts);
  }
  for (VertexId v = 0; v < g.num_vertices; ++v) {
    Partition& p = parts[assignment[v]];
    p.global_to_local[v] = static_cast<uint32_t>(p.owned.size());
    p.owned.push_back(v);
  }
  for (uint32_t p = 0; p < num_parts; ++p)
    if (parts[p].owned.empty())
      throw GraphError("partition_graph: partition " + std::to_string(p) + " owns no vertices");

  for (auto& part : parts) {
    const uint32_t pid = part.partition_id;
    part.in_offsets.assign(part.num_owned() + 1, 0);
    part.out_offsets.assign(part.num_owned() + 1, 0);
    part.self_norm.resize(part.num_owned());

    for (size_t i = 0; i < part.num_owned(); ++i) {
      const VertexId v = part.owned[i];
      part.self_norm[i] = g.self_norm[v];
      for (uint64_t e = g.in_offsets[v]; e < g.in_offsets[v + 1]; ++e) {
        part.in_sources.push_back(g.in_sources[e]);
        part.in_norms.push_back(g.in_norms[e]);
        const uint32_t q = assignment[g.in_sources[e]];
        if (q != pid) {
          part.fwd_recv[q].push_back(g.in_sources[e]);
          parts[q].fwd_send[pid].push_back(g.in_sources[e]);
        }
      }
      part.in_offsets[i + 1] = part.in_sources.size();
      for (uint64_t e = g.out_offsets[v]; e < g.out_offsets[v + 1]; ++e) {
        part.out_targets.push_back(g.out_targets[e]);
        part.out_norms.push_back(g.out_norms[e]);
        const uint32_t q = assignment[g.out_targets[e]];
        if (q != pid) {
          part.bwd_recv[q].push_back(g.out_targets[e]);
          parts[q].bwd_send[pid].push_back(g.out_targets[e]);
        }
      }
      part.out_offsets[i + 1] = part.out_targets.size();
    }
  }
  auto dedup = [](std::vector<VertexId>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  };
  for (auto& part : parts) {
    for (auto& v : part.fwd_send) dedup(v);
    for (auto& v : part.fwd_recv) dedup(v);
    for (auto& v : part.bwd_send) dedup(v);
    for (auto& v : part.bwd_recv) dedup(v);
  }
  return parts;
}

inline std::vector<uint32_t> round_robin_assignment(VertexId num_vertices, uint32_t num_parts) {
  std::vector<uint32_t> a(num_vertices);
  for (VertexId v = 0; v < num_vertices; ++v) a[v] = v % num_parts;
  return a;
}

// Contiguous interval of the partition's interval ordering.
struct VertexInterval {
  uint32_t interval_id = 0;
  uint32_t start = 0;  // positions in IntervalSplit::order
  uint32_t end = 0;
};

struct IntervalSplit {
  std::vector<VertexInterval> intervals;
  std::vector<uint32_t> order;  // permutation of local vertex indices

  std::vector<uint32_t> interval_vertices(uint32_t interval_id) const {
    const VertexInterval& iv = intervals[interval_id];
    return std::vector<uint32_t>(order.begin() + iv.start, order.begin() + iv.end);
  }
};

namespace detail {

// Directed edges with both endpoints owned, crossing interval boundaries.
inline uint64_t crossing_edges(const Partition& p, const std::vector<uint32_t>& order,
                               const std::vector<uint32_t>& pos_to_interval) {
  std::vector<uint32_t> interval_of(p.num_owned());
  for (size_t pos = 0; pos < order.size(); ++pos) interval_of[order[pos]] = pos_to_interval[pos];
  uint64_t crossing = 0;
  for (size_t i = 0; i < p.num_owned(); ++i) {
    for (uint64_t e = p.in_offsets[i]; e < p.in_offsets[i + 1]; ++e) {
      const VertexId src = p.in_sources[e];
      const uint32_t src_local = p.global_to_local[src];
      if (src_local == UINT32_MAX) continue;
      if (interval_of[src_local] != interval_of[i]) ++crossing;
    }
  }
  return crossing;
}

}  // namespace detail

// Equal-size contiguous cuts (remainder to the lowest-indexed intervals),
// then one pass of boundary swaps that strictly reduce the inter-interval
// edge count. Deterministic for a fixed partition and k.
inline IntervalSplit split_intervals(const Partition& p, uint32_t k) {
  if (k == 0 || k > p.num_owned())
    throw GraphError("split_intervals: k=" + std::to_string(k) + " invalid for " +
                     std::to_string(p.num_owned()) + " vertices");
  IntervalSplit split;
  split.order.resize(p.num_owned());
  std::iota(split.order.begin(), split.order.end(), 0);

  const uint32_t n = static_cast<uint32_t>(p.num_owned());
  const uint32_t base = n / k, rem = n % k;
  uint32_t cursor = 0;
  std::vector<uint32_t> pos_to_interval(n);
  for (uint32_t i = 0; i < k; ++i) {
    VertexInterval iv;
    iv.interval_id = i;
    iv.start = cursor;
    cursor += base + (i < rem ? 1 : 0);
    iv.end = cursor;
    for (uint32_t pos = iv.start; pos < iv.end; ++pos) pos_to_interval[pos] = i;
    split.intervals.push_back(iv);
  }

  if (k > 1) {
    uint64_t best = detail::crossing_edges(p, split.order, pos_to_interval);
    for (uint32_t i = 1; i < k; ++i) {
      const uint32_t b = split.intervals[i].start;
      std::swap(split.order[b - 1], split.order[b]);
      const uint64_t candidate = detail::crossing_edges(p, split.order, pos_to_interval);
      if (candidate < best) {
        best = candidate;
      } else {
        std::swap(split.order[b - 1], split.order[b]);  // revert
      }
    }
  }
  return split;
}

// Text file, one partition id per line; line i assigns vertex i.
inline std::vector<uint32_t> load_partition_file(const std::string& path, VertexId num_vertices) {
  std::ifstream in(path);
  if (!in) throw GraphError("load_partition_file: cannot open " + path);
  std::vector<uint32_t> assignment;
  assignment.reserve(num_vertices);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() && in.eof()) break;
    size_t pos = 0;
    unsigned long value = 0;
    try {
      if (!line.empty() && (line[0] == '-' || line[0] == '+')) throw std::invalid_argument("sign");
      value = std::stoul(line, &pos);
    } catch (const std::exception&) {
      throw GraphError("load_partition_file: unparsable line " + std::to_string(line_no) + ": '" + line + "'");
    }
    if (pos != line.size())
      throw GraphError("load_partition_file: unparsable line " + std::to_string(line_no) + ": '" + line + "'");
    assignment.push_back(static_cast<uint32_t>(value));
  }
  if (assignment.size() != num_vertices)
    throw GraphError("load_partition_file: " + std::to_string(assignment.size()) + " lines for " +
                     std::to_string(num_vertices) + " vertices");
  return assignment;
}

}  // namespace gnnpipe
