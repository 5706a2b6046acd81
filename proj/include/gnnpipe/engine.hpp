#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <numeric>
#include <queue>
#include <set>
#include <tuple>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "gnnpipe/costmodel.hpp"
#include "gnnpipe/gnn.hpp"
#include "gnnpipe/graph.hpp"
#include "gnnpipe/paramserver.hpp"
#include "gnnpipe/serverless.hpp"
#include "gnnpipe/tensor.hpp"

namespace gnnpipe {

enum class PipelineMode : uint8_t { pipe, async };

// Staleness admission at Gather: a consumer in epoch e may use a neighbor
// value from epochs [e-S, e]. Values from the future are never admissible.
inline bool check_gather_admissible(uint32_t consumer_epoch, uint32_t value_epoch,
                                    uint32_t staleness) {
  return value_epoch <= consumer_epoch && consumer_epoch - value_epoch <= staleness;
}

enum class TaskKind : uint8_t { GA, AV, SC, AE, BAE, BAV, BSC, BGA, WU, FUSED_AV_BAV };

inline const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::GA: return "GA";
    case TaskKind::AV: return "AV";
    case TaskKind::SC: return "SC";
    case TaskKind::AE: return "AE";
    case TaskKind::BAE: return "bAE";
    case TaskKind::BAV: return "bAV";
    case TaskKind::BSC: return "bSC";
    case TaskKind::BGA: return "bGA";
    case TaskKind::WU: return "WU";
    case TaskKind::FUSED_AV_BAV: return "AV+bAV";
  }
  return "?";
}

struct Task {
  TaskKind kind;
  uint32_t interval;  // global interval id
  uint32_t layer;
  uint32_t epoch;
};

struct EngineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Pluggable execution of tensor kernels, used by the tcp transport to route
// payloads through a worker over the wire. Results must be bitwise equal to
// the local kernels; the simulation models time and cost either way.
class TensorExecutor {
 public:
  virtual ~TensorExecutor() = default;
  virtual ApplyVertexResult<float> run_apply_vertex(const MatrixF& chunk, const MatrixF& weights,
                                                    bool last_layer, uint32_t epoch, uint8_t layer,
                                                    uint32_t interval) = 0;
  virtual GradApplyVertexResult<float> run_grad_apply_vertex(const MatrixF& gathered,
                                                             const MatrixF& pre,
                                                             const MatrixF& weights,
                                                             const MatrixF& upstream,
                                                             bool is_output_layer, uint32_t epoch,
                                                             uint8_t layer, uint32_t interval) = 0;
  virtual MatrixF run_apply_edge(const MatrixF& chunk, uint32_t epoch, uint8_t layer,
                                 uint32_t interval) = 0;
};

struct EngineConfig {
  PipelineMode mode = PipelineMode::pipe;
  uint32_t staleness = 0;  // async only

  uint32_t num_partitions = 1;
  std::optional<std::vector<uint32_t>> assignment;  // defaults to round robin
  uint32_t intervals_per_partition = 1;
  uint32_t num_ps = 1;

  std::vector<size_t> hidden_widths = {16};
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 0.01;
  uint64_t seed = 1;

  bool fuse = false;
  bool remat = false;
  bool stream = false;
  bool apply_edge_stage = false;  // identity AE/bAE stages, off for plain GCN

  // graph-server resources
  uint32_t gs_vcpus = 4;
  double gs_core_gflops = 4.0;
  double inter_gs_gbps = 10.0;
  VirtualNs inter_gs_latency_ns = 1'000'000;  // 1 ms

  LambdaSpec lambda_spec;
  NetworkModel network;
  uint32_t fleet_max = 100;
  bool autotune = true;
  VirtualNs autotune_period_ns = 5'000'000;  // 5 ms
  StragglerModel stragglers;
  VirtualNs broadcast_latency_ns = 100'000;  // 100 us

  uint32_t max_epochs = 200;
  std::optional<double> target_accuracy;
  double convergence_delta = 0.001;
  bool stop_on_convergence = false;
  uint32_t convergence_warmup_epochs = 10;  // flat early epochs do not count

  bool record_trace = false;
  TensorExecutor* executor = nullptr;  // null -> in-process kernels
};

struct TrainingData {
  const Graph* graph = nullptr;
  MatrixF features;
  std::vector<uint32_t> labels;
  uint32_t num_classes = 0;
  std::vector<uint32_t> train_mask;  // defaults to all vertices
};

struct EpochRecord {
  uint32_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  VirtualNs epoch_ns = 0;
  VirtualNs total_ns = 0;
  uint32_t fleet_total = 0;
  std::map<int64_t, uint64_t> staleness_hist;
};

struct TaskTrace {
  Task task;
  uint32_t partition;
  VirtualNs start_ns;
  VirtualNs end_ns;
};

struct TrainingResult {
  std::vector<EpochRecord> epochs;
  bool target_reached = false;
  bool converged = false;
  double final_accuracy = 0.0;
  VirtualNs total_ns = 0;
  UsageLedger ledger;
  uint64_t invocations = 0;
  uint64_t relaunched = 0;

  // audits
  int64_t staleness_min = 0;
  int64_t staleness_max = 0;
  uint64_t gathered_values = 0;
  uint64_t weight_pairs_total = 0;
  uint64_t weight_pairs_consistent = 0;
  uint32_t max_epoch_gap = 0;
  uint64_t max_stash_entries = 0;   // peak weight-stash residency on any PS
  uint64_t final_weight_version = 0;  // version increments once per weight update

  std::vector<std::vector<uint64_t>> queue_samples;     // per partition
  std::vector<std::vector<uint32_t>> fleet_trajectory;  // per partition

  MatrixF epoch0_logits;
  std::vector<MatrixF> epoch0_grad_sums;  // aggregated WU input, epoch 0
  std::vector<MatrixF> final_weights;
  std::vector<TaskTrace> trace;
  std::vector<Invocation> invocation_log;
};

// Observation hooks for validation runs; rows are handed out by pointer and
// must be copied by the observer.
struct AuditHooks {
  std::function<void(VertexId v, uint32_t value_layer, bool backward, uint32_t epoch,
                     const float* row, size_t width)>
      on_publish;
  std::function<void(uint32_t consumer_interval, uint32_t consumer_epoch, uint32_t value_layer,
                     bool backward, VertexId v, uint32_t value_epoch, const float* row,
                     size_t width)>
      on_consume;
};

// Deterministic virtual-time simulator of the full training pipeline:
// graph tasks run on per-partition worker pools, tensor tasks on a simulated
// serverless fleet, weight state on replicated parameter servers.
class Engine {
 public:
  Engine(const TrainingData& data, EngineConfig cfg, AuditHooks hooks = {})
      : data_(data), cfg_(std::move(cfg)), hooks_(std::move(hooks)) {
    if (!data_.graph) throw EngineError("engine: no graph");
    if (cfg_.mode == PipelineMode::pipe && cfg_.staleness != 0)
      throw EngineError("engine: staleness requires async mode");
    if (data_.num_classes == 0) throw EngineError("engine: num_classes must be positive");
    build();
  }

  TrainingResult run() {
    while (!stop_) {
      if (events_.empty()) {
        if (!all_done()) throw EngineError("engine: deadlock, no runnable events");
        break;
      }
      Event ev = pop_event();
      now_ = ev.time;
      dispatch(ev);
    }
    finalize();
    return std::move(result_);
  }

  // Frontier inspection: every task whose inputs are available and whose
  // gather (if any) is admissible, ordered by (epoch, layer, interval).
  std::vector<Task> next_tasks() const {
    std::vector<Task> out;
    for (uint32_t gi = 0; gi < total_intervals_; ++gi) {
      const IntervalState& st = intervals_[gi];
      if (st.done || st.epoch >= cfg_.max_epochs) continue;
      if (st.running || stage_admissible(gi)) out.push_back(stage_task(gi));
    }
    std::sort(out.begin(), out.end(), [](const Task& a, const Task& b) {
      return std::tie(a.epoch, a.layer, a.interval) < std::tie(b.epoch, b.layer, b.interval);
    });
    return out;
  }

  uint32_t num_layers() const { return static_cast<uint32_t>(widths_.size() - 1); }
  uint32_t total_intervals() const { return total_intervals_; }
  const std::vector<Partition>& partitions() const { return parts_; }

 private:
  // ---- static setup -------------------------------------------------------

  struct StageDef {
    TaskKind kind;
    uint32_t layer;
  };

  struct IntervalInfo {
    uint32_t partition;
    uint32_t local_interval;
    std::vector<uint32_t> locals;       // local vertex ids
    std::vector<VertexId> globals;      // global vertex ids
    std::vector<VertexId> in_required;  // distinct global ids feeding forward gathers
    std::vector<VertexId> out_required; // distinct global ids feeding backward gathers
    uint64_t in_edges = 0;
    uint64_t out_edges = 0;
  };

  struct IntervalState {
    uint32_t epoch = 0;
    uint32_t stage = 0;
    bool running = false;
    bool parked = false;
    bool done = false;  // stopped at max_epochs

    // per-epoch working set
    MatrixF chunk;  // output of the last completed stage
    std::map<uint32_t, MatrixF> stashed_gathered;  // layer -> A^H
    std::map<uint32_t, MatrixF> stashed_pre;       // layer -> in_l (absent in remat mode)
    std::optional<uint32_t> ps;                    // PS recorded at first weight contact
    std::optional<uint64_t> weight_version;        // stashed version
  };

  void build() {
    const Graph& g = *data_.graph;
    widths_.clear();
    widths_.push_back(data_.features.cols());
    for (size_t w : cfg_.hidden_widths) widths_.push_back(w);
    widths_.push_back(data_.num_classes);

    if (data_.features.rows() != g.num_vertices) throw EngineError("engine: features row count");
    if (data_.labels.size() != g.num_vertices) throw EngineError("engine: labels count");

    labels_onehot_ = MatrixF(g.num_vertices, data_.num_classes);
    for (VertexId v = 0; v < g.num_vertices; ++v) {
      if (data_.labels[v] >= data_.num_classes) throw EngineError("engine: label out of range");
      labels_onehot_(v, data_.labels[v]) = 1.0f;
    }
    mask_ = data_.train_mask;
    if (mask_.empty()) {
      mask_.resize(g.num_vertices);
      std::iota(mask_.begin(), mask_.end(), 0);
    }
    in_mask_.assign(g.num_vertices, 0);
    for (uint32_t v : mask_) in_mask_[v] = 1;

    auto assignment =
        cfg_.assignment ? *cfg_.assignment : round_robin_assignment(g.num_vertices, cfg_.num_partitions);
    parts_ = partition_graph(g, assignment);

    // intervals
    for (const auto& p : parts_) {
      const uint32_t k =
          std::max<uint32_t>(1, std::min<uint32_t>(cfg_.intervals_per_partition,
                                                   static_cast<uint32_t>(p.num_owned())));
      auto split = split_intervals(p, k);
      interval_base_.push_back(total_intervals_);
      for (const auto& iv : split.intervals) {
        IntervalInfo info;
        info.partition = p.partition_id;
        info.local_interval = iv.interval_id;
        info.locals = split.interval_vertices(iv.interval_id);
        std::set<VertexId> in_req, out_req;
        for (uint32_t lv : info.locals) {
          info.globals.push_back(p.owned[lv]);
          in_req.insert(p.owned[lv]);
          out_req.insert(p.owned[lv]);
          info.in_edges += p.in_offsets[lv + 1] - p.in_offsets[lv];
          info.out_edges += p.out_offsets[lv + 1] - p.out_offsets[lv];
          for (uint64_t e = p.in_offsets[lv]; e < p.in_offsets[lv + 1]; ++e)
            in_req.insert(p.in_sources[e]);
          for (uint64_t e = p.out_offsets[lv]; e < p.out_offsets[lv + 1]; ++e)
            out_req.insert(p.out_targets[e]);
        }
        info.in_required.assign(in_req.begin(), in_req.end());
        info.out_required.assign(out_req.begin(), out_req.end());
        interval_info_.push_back(std::move(info));
        ++total_intervals_;
      }
    }
    intervals_.resize(total_intervals_);

    build_stages();

    // weights
    std::vector<MatrixF> init;
    for (uint32_t l = 0; l < num_layers(); ++l)
      init.push_back(xavier_init<float>(widths_[l], widths_[l + 1],
                                        hash_combine(cfg_.seed, 0x7e17 + l)));
    ps_ = std::make_unique<PsGroup>(cfg_.num_ps, std::move(init), cfg_.optimizer,
                                    cfg_.learning_rate, total_intervals_);

    // per-partition runtime
    gs_.resize(parts_.size());
    for (size_t p = 0; p < parts_.size(); ++p) {
      const uint32_t local_intervals =
          (p + 1 < interval_base_.size() ? interval_base_[p + 1] : total_intervals_) -
          interval_base_[p];
      gs_[p].fleet.size = initial_fleet_size(local_intervals, cfg_.fleet_max);
      gs_[p].fleet.max_size = cfg_.fleet_max;
      result_.fleet_trajectory.emplace_back(1, gs_[p].fleet.size);
      result_.queue_samples.emplace_back();
    }

    fwd_store_.assign(parts_.size(), {});
    bwd_store_.assign(parts_.size(), {});

    result_.epoch0_logits = MatrixF(g.num_vertices, data_.num_classes);
    result_.epoch0_grad_sums.resize(num_layers());
    epoch_logits_[0] = MatrixF(g.num_vertices, data_.num_classes);

    // initial frontier: one GA(0) per interval
    for (uint32_t gi = 0; gi < total_intervals_; ++gi) try_enqueue(gi);
    if (cfg_.autotune)
      for (uint32_t p = 0; p < parts_.size(); ++p)
        push_event(cfg_.autotune_period_ns, EventKind::autotune_sample, p);
  }

  void build_stages() {
    const uint32_t L = num_layers();
    stages_.clear();
    for (uint32_t l = 0; l < L; ++l) {
      stages_.push_back({TaskKind::GA, l});
      const bool last = (l + 1 == L);
      if (last && cfg_.fuse) {
        stages_.push_back({TaskKind::FUSED_AV_BAV, l});
      } else {
        stages_.push_back({TaskKind::AV, l});
        if (!last) {
          stages_.push_back({TaskKind::SC, l});
          if (cfg_.apply_edge_stage) stages_.push_back({TaskKind::AE, l});
        } else if (cfg_.apply_edge_stage) {
          stages_.push_back({TaskKind::AE, l});
        }
      }
      if (last && !cfg_.fuse) {
        if (cfg_.apply_edge_stage) stages_.push_back({TaskKind::BAE, l});
        stages_.push_back({TaskKind::BAV, l});
      }
    }
    for (uint32_t l = L; l-- > 1;) {
      stages_.push_back({TaskKind::BSC, l});
      stages_.push_back({TaskKind::BGA, l});
      if (cfg_.apply_edge_stage) stages_.push_back({TaskKind::BAE, l - 1});
      stages_.push_back({TaskKind::BAV, l - 1});
    }
  }

  // ---- events -------------------------------------------------------------

  enum class EventKind : uint8_t {
    stage_complete,
    ghost_delivery,
    broadcast_delivery,
    autotune_sample,
  };

  struct GhostPayload {
    uint32_t to_partition;
    bool backward;
    uint32_t value_layer;
    uint32_t epoch;
    std::vector<VertexId> vertices;
    MatrixF rows;
  };

  struct Event {
    VirtualNs time;
    uint64_t seq;
    EventKind kind;
    uint32_t a = 0;  // interval / partition / ps id
    std::shared_ptr<GhostPayload> ghost;
    WeightsPtr snapshot;
    bool operator>(const Event& o) const { return std::tie(time, seq) > std::tie(o.time, o.seq); }
  };

  void push_event(VirtualNs delay, EventKind kind, uint32_t a) {
    Event ev;
    ev.time = now_ + delay;
    ev.seq = next_seq_++;
    ev.kind = kind;
    ev.a = a;
    events_.push(std::move(ev));
  }

  Event pop_event() {
    Event ev = events_.top();
    events_.pop();
    return ev;
  }

  // ---- admission & scheduling ---------------------------------------------

  const StageDef& stage_of(uint32_t gi) const { return stages_[intervals_[gi].stage]; }

  Task stage_task(uint32_t gi) const {
    const StageDef& sd = stage_of(gi);
    return Task{sd.kind, gi, sd.layer, intervals_[gi].epoch};
  }

  uint32_t min_epoch() const {
    uint32_t m = UINT32_MAX;
    for (const auto& st : intervals_)
      if (!st.done) m = std::min(m, st.epoch);
    return m == UINT32_MAX ? cfg_.max_epochs : m;
  }

  // Values present in [epoch-S, epoch] for every required vertex.
  bool values_ready(uint32_t gi, bool backward, uint32_t value_layer, uint32_t epoch) const {
    const IntervalInfo& info = interval_info_[interval_of(gi)];
    const auto& store = backward ? bwd_store_[info.partition] : fwd_store_[info.partition];
    auto it = store.find(value_layer);
    if (it == store.end()) return false;
    const uint32_t lo = cfg_.mode == PipelineMode::pipe
                            ? epoch
                            : (epoch > cfg_.staleness ? epoch - cfg_.staleness : 0);
    const auto& required = backward ? info.out_required : info.in_required;
    for (VertexId v : required) {
      auto vit = it->second.find(v);
      if (vit == it->second.end()) return false;
      auto eit = vit->second.upper_bound(epoch);
      if (eit == vit->second.begin()) return false;
      --eit;
      if (eit->first < lo) return false;
    }
    return true;
  }

  bool stage_admissible(uint32_t gi) const {
    const IntervalState& st = intervals_[gi];
    const StageDef& sd = stages_[st.stage];
    if (sd.kind == TaskKind::GA) {
      if (sd.layer == 0) {
        if (cfg_.mode == PipelineMode::pipe) {
          // epoch barrier: previous epoch fully complete and its weight
          // updates broadcast everywhere
          if (st.epoch > 0) {
            if (epoch_completed_count(st.epoch - 1) < total_intervals_) return false;
            const uint64_t want = static_cast<uint64_t>(st.epoch) * num_layers();
            for (uint32_t ps = 0; ps < ps_->num_ps(); ++ps)
              if (ps_->latest_at(ps)->version < want) return false;
          }
          return true;
        }
        // async: bounded epoch gap
        return st.epoch <= min_epoch() + cfg_.staleness;
      }
      if (cfg_.mode == PipelineMode::pipe && stage_completed_count(st.epoch, st.stage - 1) <
                                                 total_intervals_)
        return false;  // layer barrier: wait for every interval's scatter
      return values_ready(gi, false, sd.layer, st.epoch);
    }
    if (sd.kind == TaskKind::BGA) {
      if (cfg_.mode == PipelineMode::pipe &&
          stage_completed_count(st.epoch, st.stage - 1) < total_intervals_)
        return false;
      return values_ready(gi, true, sd.layer, st.epoch);
    }
    return true;  // non-gather stages depend only on the interval's own chain
  }

  uint32_t interval_of(uint32_t gi) const { return gi; }

  uint64_t stage_completed_count(uint32_t epoch, uint32_t stage) const {
    auto it = stage_done_.find((static_cast<uint64_t>(epoch) << 16) | stage);
    return it == stage_done_.end() ? 0 : it->second;
  }

  uint64_t epoch_completed_count(uint32_t epoch) const {
    auto it = epoch_done_.find(epoch);
    return it == epoch_done_.end() ? 0 : it->second;
  }

  bool is_lambda_stage(TaskKind k) const {
    return k == TaskKind::AV || k == TaskKind::AE || k == TaskKind::BAE || k == TaskKind::BAV ||
           k == TaskKind::FUSED_AV_BAV;
  }

  void try_enqueue(uint32_t gi) {
    IntervalState& st = intervals_[gi];
    if (st.running || st.done) return;
    if (st.epoch >= cfg_.max_epochs) {
      st.done = true;
      return;
    }
    if (!stage_admissible(gi)) {
      if (!st.parked) {
        st.parked = true;
        parked_.insert(park_key(gi));
      }
      return;
    }
    if (st.parked) {
      st.parked = false;
      parked_.erase(park_key(gi));
    }
    st.running = true;
    const StageDef& sd = stages_[st.stage];
    GsState& gs = gs_[interval_info_[gi].partition];
    if (is_lambda_stage(sd.kind)) {
      gs.lambda_queue.push_back(gi);
      pump_lambda(interval_info_[gi].partition);
    } else {
      gs.cpu_queue.push_back(gi);
      pump_cpu(interval_info_[gi].partition);
    }
  }

  uint64_t park_key(uint32_t gi) const {
    const IntervalState& st = intervals_[gi];
    return (static_cast<uint64_t>(st.epoch) << 40) | (static_cast<uint64_t>(st.stage) << 20) | gi;
  }

  void wake_parked() {
    // re-check in (epoch, stage, interval) order
    std::vector<uint64_t> keys(parked_.begin(), parked_.end());
    for (uint64_t key : keys) {
      const uint32_t gi = static_cast<uint32_t>(key & 0xFFFFF);
      if (parked_.count(key)) {
        IntervalState& st = intervals_[gi];
        st.parked = false;
        parked_.erase(key);
        try_enqueue(gi);
      }
    }
  }

  // ---- resource pools -----------------------------------------------------

  struct GsState {
    std::deque<uint32_t> cpu_queue;
    uint32_t cpu_busy = 0;
    std::deque<uint32_t> lambda_queue;
    uint32_t lambda_active = 0;
    Autotuner fleet;
  };

  void pump_cpu(uint32_t p) {
    GsState& gs = gs_[p];
    while (gs.cpu_busy < cfg_.gs_vcpus && !gs.cpu_queue.empty()) {
      const uint32_t gi = gs.cpu_queue.front();
      gs.cpu_queue.pop_front();
      gs.cpu_busy += 1;
      start_stage(gi);
    }
  }

  void pump_lambda(uint32_t p) {
    GsState& gs = gs_[p];
    while (gs.lambda_active < gs.fleet.size && !gs.lambda_queue.empty()) {
      const uint32_t gi = gs.lambda_queue.front();
      gs.lambda_queue.pop_front();
      gs.lambda_active += 1;
      start_stage(gi);
    }
  }

  // ---- stage execution ----------------------------------------------------

  // Kernel work happens at task start (inputs are read then); outputs become
  // visible when the completion event fires.
  void start_stage(uint32_t gi) {
    IntervalState& st = intervals_[gi];
    const StageDef& sd = stages_[st.stage];
    const IntervalInfo& info = interval_info_[gi];
    const Partition& part = parts_[info.partition];
    VirtualNs duration = 0;

    // epoch-gap audit: intervals that completed an epoch count at their next one
    result_.max_epoch_gap = std::max(result_.max_epoch_gap, st.epoch - min_epoch());

    switch (sd.kind) {
      case TaskKind::GA: {
        st.chunk = run_gather(gi, false, sd.layer, st.epoch);
        duration = gs_compute_ns(2.0 * static_cast<double>(info.in_edges + info.locals.size()) *
                                 static_cast<double>(widths_[sd.layer]));
        break;
      }
      case TaskKind::BGA: {
        st.chunk = run_gather(gi, true, sd.layer, st.epoch);
        duration = gs_compute_ns(2.0 * static_cast<double>(info.out_edges + info.locals.size()) *
                                 static_cast<double>(widths_[sd.layer]));
        break;
      }
      case TaskKind::SC:
      case TaskKind::BSC: {
        const bool backward = sd.kind == TaskKind::BSC;
        // value layer: SC(l) publishes H_{l+1}; bSC(l) publishes D_l
        scatter_buffer_[gi] =
            build_scatter(gi, backward, backward ? sd.layer : sd.layer + 1, st.epoch);
        uint64_t bytes = 0;
        for (const auto& m : scatter_buffer_[gi]) bytes += m->rows.size() * 4;
        duration = seconds_to_ns(static_cast<double>(bytes) * 8.0 / (cfg_.inter_gs_gbps * 1e9));
        break;
      }
      case TaskKind::AV:
      case TaskKind::FUSED_AV_BAV: {
        duration = start_apply_vertex(gi, sd, /*fused=*/sd.kind == TaskKind::FUSED_AV_BAV);
        break;
      }
      case TaskKind::BAV: {
        duration = start_grad_apply_vertex(gi, sd);
        break;
      }
      case TaskKind::AE:
      case TaskKind::BAE: {
        if (cfg_.executor)
          st.chunk = cfg_.executor->run_apply_edge(st.chunk, st.epoch,
                                                   static_cast<uint8_t>(sd.layer), gi);
        else
          st.chunk = apply_edge(st.chunk);  // identity pass-through
        const uint64_t bytes = st.chunk.size() * 4;
        duration = lambda_invocation(gi, bytes, static_cast<double>(st.chunk.size()), bytes);
        break;
      }
      case TaskKind::WU:
        throw EngineError("WU is not a scheduled interval task");
    }

    (void)part;
    if (cfg_.record_trace)
      result_.trace.push_back({stage_task(gi), info.partition, now_, now_ + duration});
    Event ev;
    ev.time = now_ + duration;
    ev.seq = next_seq_++;
    ev.kind = EventKind::stage_complete;
    ev.a = gi;
    events_.push(std::move(ev));
  }

  VirtualNs gs_compute_ns(double flops) const {
    return seconds_to_ns(flops / (cfg_.gs_core_gflops * 1e9));
  }

  // Ledger + duration for one lambda invocation, including straggler slowdown
  // and timeout-relaunch. Straggler selection keys on the logical task
  // coordinates so the same tasks are slowed regardless of schedule order.
  VirtualNs lambda_invocation(uint32_t gi, uint64_t in_bytes, double flops, uint64_t out_bytes) {
    const IntervalState& st = intervals_[gi];
    const uint32_t p = interval_info_[gi].partition;
    const uint32_t fleet = std::max<uint32_t>(1, gs_[p].fleet.size);
    const uint64_t task_id = hash_combine(
        hash_combine(st.epoch, st.stage), hash_combine(gi, static_cast<uint64_t>(stages_[st.stage].layer)));
    const double slowdown = cfg_.stragglers.slowdown_for(task_id, 0);

    VirtualNs d = invocation_duration_ns(cfg_.lambda_spec, cfg_.network, fleet, in_bytes, flops,
                                         out_bytes, cfg_.stream, slowdown);
    const VirtualNs timeout = timeouts_.timeout_ns();
    result_.invocations += 1;
    if (d > timeout) {
      // first attempt abandoned at the timeout, one clean relaunch
      result_.ledger.record_invocation(bill_duration_ns(timeout));
      record_invocation(task_id, now_, now_ + timeout, in_bytes, out_bytes,
                        InvocationOutcome::timeout_relaunched);
      result_.relaunched += 1;
      result_.invocations += 1;
      const VirtualNs d2 = invocation_duration_ns(cfg_.lambda_spec, cfg_.network, fleet, in_bytes,
                                                  flops, out_bytes, cfg_.stream, 1.0);
      if (d2 > timeout)
        throw EngineError("invocation exceeded its timeout after one relaunch");
      result_.ledger.record_invocation(bill_duration_ns(d2));
      record_invocation(task_id, now_ + timeout, now_ + timeout + d2, in_bytes, out_bytes,
                        InvocationOutcome::ok);
      timeouts_.record(d2);
      return timeout + d2;
    }
    result_.ledger.record_invocation(bill_duration_ns(d));
    record_invocation(task_id, now_, now_ + d, in_bytes, out_bytes,
                      slowdown > 1.0 ? InvocationOutcome::straggler : InvocationOutcome::ok);
    timeouts_.record(d);
    return d;
  }

  void record_invocation(uint64_t task_id, VirtualNs start, VirtualNs end, uint64_t in_bytes,
                         uint64_t out_bytes, InvocationOutcome outcome) {
    Invocation inv;
    inv.task_id = task_id;
    inv.start_ns = start;
    inv.end_ns = end;
    inv.payload_in_bytes = in_bytes;
    inv.payload_out_bytes = out_bytes;
    inv.billed_ns = bill_duration_ns(end - start);
    inv.outcome = outcome;
    result_.invocation_log.push_back(inv);
  }

  MatrixF run_gather(uint32_t gi, bool backward, uint32_t value_layer, uint32_t epoch) {
    const IntervalInfo& info = interval_info_[gi];
    const Partition& part = parts_[info.partition];
    const size_t width = widths_[value_layer];

    if (!backward && value_layer == 0) {
      // input features are constant; no staleness bookkeeping
      auto lookup = [this](VertexId v) -> const float* { return data_.features.row(v); };
      return gather_rows<float>(part, info.locals, width, lookup);
    }

    const auto& store = backward ? bwd_store_[info.partition] : fwd_store_[info.partition];
    auto layer_it = store.find(value_layer);
    if (layer_it == store.end()) throw EngineError("gather: value store missing layer");
    const auto& values = layer_it->second;

    auto lookup = [&](VertexId v) -> const float* {
      auto vit = values.find(v);
      if (vit == values.end()) return nullptr;
      auto eit = vit->second.upper_bound(epoch);
      if (eit == vit->second.begin()) return nullptr;
      --eit;
      const int64_t staleness = static_cast<int64_t>(epoch) - static_cast<int64_t>(eit->first);
      if (cfg_.mode == PipelineMode::pipe && staleness != 0)
        throw EngineError("pipe gather consumed a stale value");
      if (!check_gather_admissible(epoch, eit->first, cfg_.staleness))
        return nullptr;  // outside the staleness bound: treat as missing
      audit_consume(gi, epoch, value_layer, backward, v, eit->first, eit->second.data(),
                    eit->second.size());
      return eit->second.data();
    };
    return backward ? backward_gather_rows<float>(part, info.locals, width, lookup)
                    : gather_rows<float>(part, info.locals, width, lookup);
  }

  void audit_consume(uint32_t gi, uint32_t epoch, uint32_t value_layer, bool backward, VertexId v,
                     uint32_t value_epoch, const float* row, size_t width) {
    const int64_t staleness = static_cast<int64_t>(epoch) - static_cast<int64_t>(value_epoch);
    result_.gathered_values += 1;
    result_.staleness_min = std::min(result_.staleness_min, staleness);
    result_.staleness_max = std::max(result_.staleness_max, staleness);
    epoch_staleness_[epoch][staleness] += 1;
    if (hooks_.on_consume) hooks_.on_consume(gi, epoch, value_layer, backward, v, value_epoch, row, width);
  }

  std::vector<std::shared_ptr<GhostPayload>> build_scatter(uint32_t gi, bool backward,
                                                           uint32_t value_layer, uint32_t epoch) {
    const IntervalInfo& info = interval_info_[gi];
    const Partition& part = parts_[info.partition];
    const IntervalState& st = intervals_[gi];
    auto msgs = scatter_messages(part, backward ? part.bwd_send : part.fwd_send, info.locals,
                                 st.chunk);
    std::vector<std::shared_ptr<GhostPayload>> out;
    for (auto& m : msgs) {
      auto payload = std::make_shared<GhostPayload>();
      payload->to_partition = m.to_partition;
      payload->backward = backward;
      payload->value_layer = value_layer;
      payload->epoch = epoch;
      payload->vertices = std::move(m.vertices);
      payload->rows = std::move(m.rows);
      out.push_back(std::move(payload));
    }
    return out;
  }

  // PS contact for a weight consumer; first touch picks the PS and stashes.
  FetchResult fetch_for(uint32_t gi, uint32_t layer) {
    IntervalState& st = intervals_[gi];
    if (!st.ps) {
      st.ps = ps_->pick_ps();
    }
    FetchResult res = ps_->fetch_weights(*st.ps, gi, st.epoch, layer);
    if (!st.weight_version) st.weight_version = res.version;
    result_.weight_pairs_total += 1;
    if (*st.weight_version == res.version) result_.weight_pairs_consistent += 1;
    for (uint32_t ps = 0; ps < ps_->num_ps(); ++ps)
      result_.max_stash_entries = std::max<uint64_t>(result_.max_stash_entries, ps_->stash_count(ps));
    return res;
  }

  VirtualNs start_apply_vertex(uint32_t gi, const StageDef& sd, bool fused) {
    IntervalState& st = intervals_[gi];
    const uint32_t l = sd.layer;
    const bool last = (l + 1 == num_layers());
    FetchResult w = fetch_for(gi, l);
    ps_->add_load(*st.ps);

    auto res = cfg_.executor
                   ? cfg_.executor->run_apply_vertex(st.chunk, *w.weights, last, st.epoch,
                                                     static_cast<uint8_t>(l), gi)
                   : apply_vertex(st.chunk, *w.weights, last);
    const size_t rows = st.chunk.rows();
    uint64_t in_bytes = st.chunk.size() * 4 + w.weights->size() * 4;
    double flops = 2.0 * rows * widths_[l] * widths_[l + 1] + rows * widths_[l + 1];
    uint64_t out_bytes = res.output.size() * 4;

    st.stashed_gathered[l] = st.chunk;
    if (!cfg_.remat && !last) {
      st.stashed_pre[l] = res.pre_activation;
      out_bytes += res.pre_activation.size() * 4;  // stash upload to the GS
    } else if (!last) {
      // rematerialized in the backward pass instead of uploaded now
    }
    if (last) st.stashed_pre[l] = res.pre_activation;  // the logits themselves

    st.chunk = std::move(res.output);

    if (fused) {
      // loss gradient + backward apply in the same invocation, one round trip
      in_bytes += rows * data_.num_classes * 4;  // labels
      flops += 5.0 * rows * data_.num_classes;
      MatrixF upstream = loss_grad_rows(gi, st.chunk);
      auto gav = cfg_.executor
                     ? cfg_.executor->run_grad_apply_vertex(st.stashed_gathered[l],
                                                            st.stashed_pre[l], *w.weights, upstream,
                                                            true, st.epoch,
                                                            static_cast<uint8_t>(l), gi)
                     : grad_apply_vertex(st.stashed_gathered[l], st.stashed_pre[l], *w.weights,
                                         upstream, /*is_output_layer=*/true);
      flops += 2.0 * rows * widths_[l] * widths_[l + 1] * 2.0;
      out_bytes += gav.grad_weights.size() * 4 + gav.downstream.size() * 4;
      gav_buffer_[gi] = std::move(gav);
    }
    return lambda_invocation(gi, in_bytes, flops, out_bytes);
  }

  VirtualNs start_grad_apply_vertex(uint32_t gi, const StageDef& sd) {
    IntervalState& st = intervals_[gi];
    const uint32_t l = sd.layer;
    const bool last = (l + 1 == num_layers());
    FetchResult w = fetch_for(gi, l);
    ps_->add_load(*st.ps);

    MatrixF upstream = last ? loss_grad_rows(gi, st.chunk) : std::move(st.chunk);
    const MatrixF& gathered = st.stashed_gathered.at(l);
    const size_t rows = gathered.rows();
    uint64_t in_bytes = upstream.size() * 4 + gathered.size() * 4 + w.weights->size() * 4;
    double flops = 2.0 * rows * widths_[l] * widths_[l + 1] * 2.0 + rows * widths_[l + 1];

    MatrixF pre;
    if (auto it = st.stashed_pre.find(l); it != st.stashed_pre.end()) {
      pre = it->second;
      if (!last) in_bytes += pre.size() * 4;  // stashed in_l download
    } else {
      pre = matmul(gathered, *w.weights);  // rematerialize from A^H and stashed W
      flops += 2.0 * rows * widths_[l] * widths_[l + 1];
    }
    auto gav = cfg_.executor
                   ? cfg_.executor->run_grad_apply_vertex(gathered, pre, *w.weights, upstream, last,
                                                          st.epoch, static_cast<uint8_t>(l), gi)
                   : grad_apply_vertex(gathered, pre, *w.weights, upstream, last);
    uint64_t out_bytes = gav.grad_weights.size() * 4 + (l > 0 ? gav.downstream.size() * 4 : 0);
    gav_buffer_[gi] = std::move(gav);
    return lambda_invocation(gi, in_bytes, flops, out_bytes);
  }

  // Per-interval slice of the loss gradient; mask normalization is global.
  MatrixF loss_grad_rows(uint32_t gi, const MatrixF& logits_rows) {
    const IntervalInfo& info = interval_info_[gi];
    MatrixF grad(logits_rows.rows(), logits_rows.cols());
    const float inv_mask = 1.0f / static_cast<float>(mask_.size());
    for (size_t r = 0; r < info.globals.size(); ++r) {
      const VertexId v = info.globals[r];
      if (!in_mask_[v]) continue;
      const float* z = logits_rows.row(r);
      float* g = grad.row(r);
      double zmax = z[0];
      for (size_t j = 1; j < logits_rows.cols(); ++j) zmax = std::max(zmax, (double)z[j]);
      double sum = 0.0;
      for (size_t j = 0; j < logits_rows.cols(); ++j) sum += std::exp((double)z[j] - zmax);
      const double lse = zmax + std::log(sum);
      for (size_t j = 0; j < logits_rows.cols(); ++j)
        g[j] = static_cast<float>((std::exp((double)z[j] - lse) -
                                   (double)labels_onehot_(v, j)) * inv_mask);
    }
    return grad;
  }

  // ---- completion handling --------------------------------------------------

  void dispatch(const Event& ev) {
    switch (ev.kind) {
      case EventKind::stage_complete:
        complete_stage(ev.a);
        break;
      case EventKind::ghost_delivery:
        deliver_ghost(*ev.ghost);
        break;
      case EventKind::broadcast_delivery:
        ps_->deliver_broadcast(ev.a, ev.snapshot);
        wake_parked();
        break;
      case EventKind::autotune_sample:
        autotune_sample(ev.a);
        break;
    }
  }

  void complete_stage(uint32_t gi) {
    IntervalState& st = intervals_[gi];
    const StageDef sd = stages_[st.stage];
    const IntervalInfo& info = interval_info_[gi];
    GsState& gs = gs_[info.partition];

    if (is_lambda_stage(sd.kind)) {
      gs.lambda_active -= 1;
      if (sd.kind == TaskKind::AV || sd.kind == TaskKind::BAV || sd.kind == TaskKind::FUSED_AV_BAV)
        ps_->release_load(*st.ps);
    } else {
      gs.cpu_busy -= 1;
    }

    switch (sd.kind) {
      case TaskKind::SC:
      case TaskKind::BSC: {
        const bool backward = sd.kind == TaskKind::BSC;
        const uint32_t value_layer = backward ? sd.layer : sd.layer + 1;
        publish_local(info.partition, backward, value_layer, st.epoch, info.globals, st.chunk);
        for (auto& payload : pending_scatter_take(gi)) {
          Event ev;
          ev.time = now_ + cfg_.inter_gs_latency_ns +
                    seconds_to_ns(static_cast<double>(payload->rows.size() * 4) * 8.0 /
                                  (cfg_.inter_gs_gbps * 1e9));
          ev.seq = next_seq_++;
          ev.kind = EventKind::ghost_delivery;
          ev.ghost = payload;
          events_.push(std::move(ev));
        }
        break;
      }
      case TaskKind::AV:
      case TaskKind::FUSED_AV_BAV: {
        const bool last = (sd.layer + 1 == num_layers());
        if (last) record_logits(gi, st.chunk);
        if (sd.kind == TaskKind::FUSED_AV_BAV) {
          auto gav = pending_fused_take(gi);
          push_gradient(gi, sd.layer, gav.grad_weights);
          st.chunk = std::move(gav.downstream);
          st.stashed_gathered.erase(sd.layer);
          st.stashed_pre.erase(sd.layer);
        }
        break;
      }
      case TaskKind::BAV: {
        auto gav = pending_fused_take(gi);
        push_gradient(gi, sd.layer, gav.grad_weights);
        st.chunk = std::move(gav.downstream);
        st.stashed_gathered.erase(sd.layer);
        st.stashed_pre.erase(sd.layer);
        break;
      }
      default:
        break;
    }

    // stage bookkeeping
    stage_done_[(static_cast<uint64_t>(st.epoch) << 16) | st.stage] += 1;
    st.running = false;
    st.stage += 1;
    if (st.stage == stages_.size()) {
      finish_epoch_for_interval(gi);
    } else {
      try_enqueue(gi);
    }
    pump_cpu(info.partition);
    pump_lambda(info.partition);
    wake_parked();
  }

  void publish_local(uint32_t partition, bool backward, uint32_t value_layer, uint32_t epoch,
                     const std::vector<VertexId>& vertices, const MatrixF& rows) {
    auto& store = backward ? bwd_store_[partition] : fwd_store_[partition];
    auto& layer_store = store[value_layer];
    for (size_t r = 0; r < vertices.size(); ++r) {
      auto& slot = layer_store[vertices[r]][epoch];
      slot.assign(rows.row(r), rows.row(r) + rows.cols());
      if (hooks_.on_publish && parts_[partition].owns(vertices[r]))
        hooks_.on_publish(vertices[r], value_layer, backward, epoch, slot.data(), slot.size());
    }
  }

  void deliver_ghost(const GhostPayload& payload) {
    publish_local(payload.to_partition, payload.backward, payload.value_layer, payload.epoch,
                  payload.vertices, payload.rows);
    wake_parked();
  }

  void push_gradient(uint32_t gi, uint32_t layer, const MatrixF& grad) {
    IntervalState& st = intervals_[gi];
    if (st.epoch == 0) {
      if (result_.epoch0_grad_sums[layer].empty())
        result_.epoch0_grad_sums[layer] = grad;
      else
        result_.epoch0_grad_sums[layer] = add(result_.epoch0_grad_sums[layer], grad);
    }
    auto res = ps_->push_grad(gi, st.epoch, layer, grad);
    if (!res.accepted) throw EngineError("duplicate gradient contribution");
    if (res.applied) {
      for (uint32_t ps = 0; ps < ps_->num_ps(); ++ps) {
        Event ev;
        ev.time = now_ + cfg_.broadcast_latency_ns;
        ev.seq = next_seq_++;
        ev.kind = EventKind::broadcast_delivery;
        ev.a = ps;
        ev.snapshot = *res.applied;
        events_.push(std::move(ev));
      }
    }
  }

  void record_logits(uint32_t gi, const MatrixF& rows) {
    const IntervalInfo& info = interval_info_[gi];
    IntervalState& st = intervals_[gi];
    auto it = epoch_logits_.find(st.epoch);
    if (it == epoch_logits_.end())
      it = epoch_logits_.emplace(st.epoch, MatrixF(data_.graph->num_vertices, data_.num_classes))
               .first;
    for (size_t r = 0; r < info.globals.size(); ++r)
      std::copy(rows.row(r), rows.row(r) + rows.cols(), it->second.row(info.globals[r]));
  }

  void finish_epoch_for_interval(uint32_t gi) {
    IntervalState& st = intervals_[gi];
    const uint32_t finished = st.epoch;
    st.stashed_gathered.clear();
    st.stashed_pre.clear();
    st.ps.reset();
    st.weight_version.reset();
    st.epoch += 1;
    st.stage = 0;
    epoch_done_[finished] += 1;

    if (epoch_done_[finished] == total_intervals_) complete_epoch(finished);
    if (!stop_) try_enqueue(gi);
    wake_parked();
  }

  void complete_epoch(uint32_t epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    const MatrixF& logits = epoch_logits_.at(epoch);
    auto loss = softmax_cross_entropy(logits, labels_onehot_, mask_);
    rec.loss = loss.loss;
    uint64_t hits = 0;
    for (uint32_t v : mask_) {
      const float* z = logits.row(v);
      size_t best = 0;
      for (size_t j = 1; j < logits.cols(); ++j)
        if (z[j] > z[best]) best = j;
      if (best == data_.labels[v]) ++hits;
    }
    rec.accuracy = static_cast<double>(hits) / static_cast<double>(mask_.size());
    rec.total_ns = now_;
    rec.epoch_ns = now_ - last_epoch_end_;
    last_epoch_end_ = now_;
    for (const auto& gs : gs_) rec.fleet_total += gs.fleet.size;
    if (auto it = epoch_staleness_.find(epoch); it != epoch_staleness_.end()) {
      rec.staleness_hist = it->second;
      epoch_staleness_.erase(it);
    }
    if (epoch == 0) result_.epoch0_logits = logits;
    result_.final_accuracy = rec.accuracy;
    result_.epochs.push_back(std::move(rec));

    // prune value stores and PS tags below the staleness horizon
    const uint32_t horizon = min_epoch() > cfg_.staleness ? min_epoch() - cfg_.staleness : 0;
    prune_stores(horizon);
    ps_->prune_tags_below(horizon);
    if (epoch != 0) epoch_logits_.erase(epoch);

    // stop conditions
    const auto& recs = result_.epochs;
    if (recs.size() >= std::max<size_t>(2, cfg_.convergence_warmup_epochs) &&
        std::abs(recs.back().accuracy - recs[recs.size() - 2].accuracy) < cfg_.convergence_delta)
      result_.converged = true;
    if (cfg_.target_accuracy && result_.final_accuracy >= *cfg_.target_accuracy) {
      result_.target_reached = true;
      stop_ = true;
    } else if (cfg_.stop_on_convergence && result_.converged) {
      stop_ = true;
    } else if (epoch + 1 >= cfg_.max_epochs) {
      stop_ = true;
    }
  }

  // Drops value epochs no consumer can admit any more (below min_epoch - S).
  void prune_stores(uint32_t horizon) {
    if (horizon == 0) return;
    for (auto* stores : {&fwd_store_, &bwd_store_}) {
      for (auto& per_layer : *stores)
        for (auto& [layer, vertex_map] : per_layer)
          for (auto& [v, epochs] : vertex_map)
            while (!epochs.empty() && epochs.begin()->first < horizon) epochs.erase(epochs.begin());
    }
  }

  void autotune_sample(uint32_t p) {
    if (stop_) return;
    GsState& gs = gs_[p];
    const uint64_t qlen = gs.cpu_queue.size();
    result_.queue_samples[p].push_back(qlen);
    gs.fleet.observe(qlen);
    const uint32_t before = gs.fleet.size;
    const uint32_t after = gs.fleet.step();
    if (after != before) {
      result_.fleet_trajectory[p].push_back(after);
      if (after > before) pump_lambda(p);
    }
    push_event(cfg_.autotune_period_ns, EventKind::autotune_sample, p);
  }

  bool all_done() const {
    for (const auto& st : intervals_)
      if (!st.done) return false;
    return true;
  }

  void finalize() {
    result_.total_ns = now_;
    const double seconds = ns_to_seconds(now_);
    result_.ledger.record_server_seconds("c5.base",
                                         seconds * (parts_.size() + ps_->num_ps()));
    const auto latest = ps_->latest_at(PsGroup::kAccumulator);
    result_.final_weights = latest->layers;
    result_.final_weight_version = latest->version;
  }

  // pending per-interval kernel outputs, keyed implicitly by the running stage
  std::vector<std::shared_ptr<GhostPayload>> pending_scatter_take(uint32_t gi) {
    auto it = scatter_buffer_.find(gi);
    if (it == scatter_buffer_.end()) return {};
    auto out = std::move(it->second);
    scatter_buffer_.erase(it);
    return out;
  }

  GradApplyVertexResult<float> pending_fused_take(uint32_t gi) {
    auto it = gav_buffer_.find(gi);
    if (it == gav_buffer_.end()) throw EngineError("missing grad buffer");
    auto out = std::move(it->second);
    gav_buffer_.erase(it);
    return out;
  }

  // ---- members --------------------------------------------------------------

  const TrainingData& data_;
  EngineConfig cfg_;
  AuditHooks hooks_;

  std::vector<size_t> widths_;
  MatrixF labels_onehot_;
  std::vector<uint32_t> mask_;
  std::vector<uint8_t> in_mask_;

  std::vector<Partition> parts_;
  std::vector<uint32_t> interval_base_;
  std::vector<IntervalInfo> interval_info_;
  std::vector<IntervalState> intervals_;
  uint32_t total_intervals_ = 0;
  std::vector<StageDef> stages_;

  std::unique_ptr<PsGroup> ps_;
  std::vector<GsState> gs_;

  // value stores: partition -> value_layer -> vertex -> epoch -> row
  using LayerStore = std::map<uint32_t, std::unordered_map<VertexId, std::map<uint32_t, std::vector<float>>>>;
  std::vector<LayerStore> fwd_store_;
  std::vector<LayerStore> bwd_store_;

  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> events_;
  uint64_t next_seq_ = 0;
  VirtualNs now_ = 0;
  VirtualNs last_epoch_end_ = 0;
  bool stop_ = false;

  std::set<uint64_t> parked_;
  std::map<uint64_t, uint64_t> stage_done_;
  std::map<uint32_t, uint64_t> epoch_done_;
  std::map<uint32_t, MatrixF> epoch_logits_;
  std::map<uint32_t, std::map<int64_t, uint64_t>> epoch_staleness_;

  std::map<uint32_t, std::vector<std::shared_ptr<GhostPayload>>> scatter_buffer_;
  std::map<uint32_t, GradApplyVertexResult<float>> gav_buffer_;

  TimeoutTracker timeouts_;
  TrainingResult result_;
};

}  // namespace gnnpipe
