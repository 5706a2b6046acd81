#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "gnnpipe/tensor.hpp"

namespace gnnpipe {

struct PsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// All-layer weight replica tagged with a monotone version. Immutable once
// published; consumers share snapshots.
struct VersionedWeights {
  uint64_t version = 0;
  std::vector<MatrixF> layers;
};

using WeightsPtr = std::shared_ptr<const VersionedWeights>;

struct FetchResult {
  const MatrixF* weights = nullptr;
  uint64_t version = 0;
};

struct GradKey {
  uint32_t interval;
  uint32_t epoch;
  uint32_t layer;
  auto operator<=>(const GradKey&) const = default;
};

// Replicated parameter servers. Every replica holds the latest weights of all
// layers; weight stashes live only on the PS an interval first contacted.
// Gradient aggregation and the optimizer run on a single designated
// accumulator (lowest ps id), which keeps the weight update exactly-once.
class PsGroup {
 public:
  PsGroup(uint32_t num_ps, std::vector<MatrixF> initial_layers, OptimizerKind opt,
          double learning_rate, uint32_t expected_contributions)
      : expected_contributions_(expected_contributions) {
    if (num_ps == 0) throw PsError("PsGroup: need at least one parameter server");
    auto initial = std::make_shared<VersionedWeights>();
    initial->version = 0;
    initial->layers = std::move(initial_layers);
    replicas_.assign(num_ps, initial);
    loads_.assign(num_ps, 0);
    stashes_.resize(num_ps);
    optimizers_.resize(initial->layers.size());
    for (auto& o : optimizers_) {
      o.kind = opt;
      o.learning_rate = learning_rate;
    }
  }

  uint32_t num_ps() const { return static_cast<uint32_t>(replicas_.size()); }
  uint32_t num_layers() const { return static_cast<uint32_t>(replicas_[0]->layers.size()); }

  // Lightest-load selection; ties go to the lowest ps id.
  uint32_t pick_ps() const {
    uint32_t best = 0;
    for (uint32_t i = 1; i < loads_.size(); ++i)
      if (loads_[i] < loads_[best]) best = i;
    return best;
  }

  void add_load(uint32_t ps) { loads_.at(ps) += 1; }
  void release_load(uint32_t ps) {
    if (loads_.at(ps) == 0) throw PsError("release_load: load already zero");
    loads_[ps] -= 1;
  }
  const std::vector<uint32_t>& loads() const { return loads_; }

  WeightsPtr latest_at(uint32_t ps) const { return replicas_.at(ps); }

  // First fetch for (interval, epoch) snapshots the PS's latest weights into
  // the stash; every later fetch of that pair returns the snapshot.
  FetchResult fetch_weights(uint32_t ps, uint32_t interval, uint32_t epoch, uint32_t layer) {
    const uint64_t key = stash_key(interval, epoch);
    auto& stash = stashes_.at(ps);
    auto it = stash.find(key);
    if (it == stash.end()) {
      if (evicted_.count(key))
        throw PsError("fetch_weights: stash for interval " + std::to_string(interval) + " epoch " +
                      std::to_string(epoch) + " evicted early");
      it = stash.emplace(key, replicas_.at(ps)).first;
    }
    const VersionedWeights& w = *it->second;
    if (layer >= w.layers.size()) throw PsError("fetch_weights: layer out of range");
    return FetchResult{&w.layers[layer], w.version};
  }

  bool has_stash(uint32_t ps, uint32_t interval, uint32_t epoch) const {
    return stashes_.at(ps).count(stash_key(interval, epoch)) > 0;
  }

  size_t stash_count(uint32_t ps) const { return stashes_.at(ps).size(); }

  struct PushResult {
    bool accepted = false;                 // false on duplicate (interval, epoch, layer)
    std::optional<WeightsPtr> applied;     // set when this push completed a WU round
  };

  // Accumulates one interval's gradient contribution. When the last expected
  // contribution for (epoch, layer) arrives, runs one optimizer step at the
  // accumulator, bumps the version, and returns the new snapshot for the
  // caller to broadcast. Contributions are summed in interval order so the
  // result does not depend on arrival order.
  PushResult push_grad(uint32_t interval, uint32_t epoch, uint32_t layer, const MatrixF& grad) {
    const GradKey key{interval, epoch, layer};
    auto& bucket = pending_[{epoch, layer}];
    if (seen_.count(key)) return PushResult{false, std::nullopt};
    seen_.insert(key);
    bucket[interval] = grad;

    // Backward for this interval-epoch finishes at layer 0: release the stash.
    if (layer == 0) evict_stash(interval, epoch);

    PushResult res;
    res.accepted = true;
    if (bucket.size() < expected_contributions_) return res;

    MatrixF total;
    for (auto& [iv, g] : bucket) {
      if (total.empty())
        total = g;
      else
        total = add(total, g);
    }
    pending_.erase({epoch, layer});

    const VersionedWeights& cur = *replicas_[kAccumulator];
    auto next = std::make_shared<VersionedWeights>();
    next->version = cur.version + 1;
    next->layers = cur.layers;
    next->layers[layer] = optimizer_step(optimizers_[layer], cur.layers[layer], total);
    replicas_[kAccumulator] = next;
    res.applied = next;
    return res;
  }

  // Installs a snapshot on one replica; older or equal versions are no-ops.
  // In-flight stashes are untouched.
  void deliver_broadcast(uint32_t ps, const WeightsPtr& snapshot) {
    if (snapshot->version > replicas_.at(ps)->version) replicas_[ps] = snapshot;
  }

  void broadcast_all(const WeightsPtr& snapshot) {
    for (uint32_t ps = 0; ps < replicas_.size(); ++ps) deliver_broadcast(ps, snapshot);
  }

  void evict_stash(uint32_t interval, uint32_t epoch) {
    const uint64_t key = stash_key(interval, epoch);
    for (auto& stash : stashes_) stash.erase(key);
    evicted_.insert(key);
  }

  // Drops duplicate-detection tags older than the staleness horizon.
  void prune_tags_below(uint32_t epoch) {
    for (auto it = seen_.begin(); it != seen_.end();)
      it = (it->epoch < epoch) ? seen_.erase(it) : std::next(it);
    for (auto it = evicted_.begin(); it != evicted_.end();)
      it = ((*it >> 32) < epoch) ? evicted_.erase(it) : std::next(it);
  }

  uint64_t current_version() const { return replicas_[kAccumulator]->version; }

  static constexpr uint32_t kAccumulator = 0;

 private:
  static uint64_t stash_key(uint32_t interval, uint32_t epoch) {
    return (static_cast<uint64_t>(epoch) << 32) | interval;
  }

  std::vector<WeightsPtr> replicas_;
  std::vector<uint32_t> loads_;
  std::vector<OptimizerState<float>> optimizers_;
  std::vector<std::map<uint64_t, WeightsPtr>> stashes_;
  std::map<std::pair<uint32_t, uint32_t>, std::map<uint32_t, MatrixF>> pending_;
  std::set<GradKey> seen_;
  std::set<uint64_t> evicted_;
  uint32_t expected_contributions_;
};

}  // namespace gnnpipe
