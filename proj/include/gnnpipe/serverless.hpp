#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "gnnpipe/costmodel.hpp"
#include "gnnpipe/rng.hpp"

namespace gnnpipe {

using VirtualNs = int64_t;

inline constexpr VirtualNs kNsPerSecond = 1'000'000'000;

inline double ns_to_seconds(VirtualNs ns) { return static_cast<double>(ns) / 1e9; }
inline VirtualNs seconds_to_ns(double s) { return static_cast<VirtualNs>(std::llround(s * 1e9)); }

// One simulated serverless container: a fraction of a vCPU and the compute
// rate that fraction sustains.
struct LambdaSpec {
  double vcpu_fraction = 0.11;
  uint32_t memory_mb = 192;
  double core_gflops = 4.0;  // reference core, single precision

  double compute_rate_flops() const { return vcpu_fraction * core_gflops * 1e9; }
};

// Per-lambda bandwidth follows the two measured operating points: peak at low
// concurrency, dropping as the per-server aggregate link is shared.
struct NetworkModel {
  VirtualNs base_latency_ns = 5'000'000;  // 5 ms
  double peak_bw_mbps = 800.0;
  double aggregate_cap_mbps = 20000.0;  // per graph server

  double bandwidth_mbps(uint32_t concurrent_lambdas) const {
    const double n = std::max<uint32_t>(concurrent_lambdas, 1);
    return std::min(peak_bw_mbps, aggregate_cap_mbps / n);
  }

  VirtualNs transfer_ns(uint64_t bytes, uint32_t concurrent_lambdas) const {
    if (bytes == 0) return 0;
    const double bits = static_cast<double>(bytes) * 8.0;
    return seconds_to_ns(bits / (bandwidth_mbps(concurrent_lambdas) * 1e6));
  }
};

enum class InvocationOutcome : uint8_t { ok, timeout_relaunched, straggler };

struct Invocation {
  uint64_t task_id = 0;
  VirtualNs start_ns = 0;
  VirtualNs end_ns = 0;
  uint64_t payload_in_bytes = 0;
  uint64_t payload_out_bytes = 0;
  VirtualNs billed_ns = 0;  // rounded up to 100 ms
  InvocationOutcome outcome = InvocationOutcome::ok;
};

inline VirtualNs bill_duration_ns(VirtualNs actual_ns) {
  if (actual_ns <= 0) return 0;
  const VirtualNs ticks = (actual_ns + kBillingTickNs - 1) / kBillingTickNs;
  return ticks * kBillingTickNs;
}

// Virtual duration of one invocation. Streaming overlaps the second half of
// the input transfer with compute.
inline VirtualNs invocation_duration_ns(const LambdaSpec& spec, const NetworkModel& net,
                                        uint32_t fleet_size, uint64_t in_bytes, double flops,
                                        uint64_t out_bytes, bool streaming,
                                        double compute_slowdown = 1.0) {
  const VirtualNs compute = seconds_to_ns(flops * compute_slowdown / spec.compute_rate_flops());
  const VirtualNs out = net.transfer_ns(out_bytes, fleet_size);
  if (!streaming) {
    return net.base_latency_ns + net.transfer_ns(in_bytes, fleet_size) + compute + out;
  }
  const VirtualNs half_in = net.transfer_ns(in_bytes - in_bytes / 2, fleet_size);
  const VirtualNs rest_in = net.transfer_ns(in_bytes / 2, fleet_size);
  return net.base_latency_ns + half_in + std::max(rest_in, compute) + out;
}

// Deterministic straggler selection: a fixed fraction of invocations run with
// their compute term multiplied by `factor`.
struct StragglerModel {
  double fraction = 0.0;
  double factor = 1.0;
  uint64_t seed = 0;

  double slowdown_for(uint64_t task_id, uint32_t attempt) const {
    if (fraction <= 0.0 || factor == 1.0) return 1.0;
    if (attempt > 0) return 1.0;  // relaunches run clean
    const uint64_t h = hash_combine(hash_combine(seed, task_id), 0x5741bULL);
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    return u < fraction ? factor : 1.0;
  }
};

// Running p95 of recent invocation durations, for the timeout threshold
// (5x p95, floor 1 s).
class TimeoutTracker {
 public:
  explicit TimeoutTracker(size_t window = 200) : window_(window) {}

  void record(VirtualNs duration) {
    samples_.push_back(duration);
    if (samples_.size() > window_) samples_.pop_front();
  }

  VirtualNs timeout_ns() const {
    if (samples_.empty()) return kMinTimeoutNs;
    std::vector<VirtualNs> sorted(samples_.begin(), samples_.end());
    std::sort(sorted.begin(), sorted.end());
    const size_t idx = (sorted.size() * 95) / 100;
    const VirtualNs p95 = sorted[std::min(idx, sorted.size() - 1)];
    return std::max<VirtualNs>(kMinTimeoutNs, 5 * p95);
  }

  static constexpr VirtualNs kMinTimeoutNs = kNsPerSecond;

 private:
  size_t window_;
  std::deque<VirtualNs> samples_;
};

inline uint32_t initial_fleet_size(uint32_t intervals_per_server, uint32_t max_size = 100) {
  return std::max<uint32_t>(1, std::min(intervals_per_server, max_size));
}

// Queue-pressure autotuner: a strictly growing CPU task queue means the graph
// servers cannot keep up, so the fleet shrinks; a strictly shrinking queue
// lets it grow.
struct Autotuner {
  uint32_t size = 1;
  uint32_t max_size = 100;
  size_t window = 10;
  std::deque<uint64_t> history;

  void observe(uint64_t queue_len) {
    history.push_back(queue_len);
    if (history.size() > window) history.pop_front();
  }

  // Applies one tuning decision if a full window is available. Returns the
  // (possibly unchanged) fleet size. History resets after a resize so one
  // trend is acted on once.
  uint32_t step() {
    if (history.size() < window) return size;
    bool growing = true, shrinking = true;
    for (size_t i = 1; i < history.size(); ++i) {
      if (history[i] <= history[i - 1]) growing = false;
      if (history[i] >= history[i - 1]) shrinking = false;
    }
    if (growing) {
      size = std::max<uint32_t>(1, static_cast<uint32_t>(std::ceil(size * 0.8)));
      history.clear();
    } else if (shrinking) {
      size = std::min(max_size, static_cast<uint32_t>(std::ceil(size * 1.25)));
      history.clear();
    }
    return size;
  }
};

}  // namespace gnnpipe
