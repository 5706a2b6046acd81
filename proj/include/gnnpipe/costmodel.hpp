#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

namespace gnnpipe {

// Currency is held in integer picodollars so that both billing quanta are
// exact: one request costs $0.20/1e6 = 200,000 pUSD and one 100 ms compute
// tick at $0.01125/h costs 312,500 pUSD.
using PicoUsd = int64_t;

inline constexpr PicoUsd kPicoPerUsd = 1'000'000'000'000LL;
inline constexpr PicoUsd kRequestPico = 200'000;        // $0.20 per 1M requests
inline constexpr PicoUsd kComputeTickPico = 312'500;    // $0.01125/h per 100 ms
inline constexpr int64_t kBillingTickNs = 100'000'000;  // 100 ms

inline double pico_to_usd(PicoUsd p) { return static_cast<double>(p) / static_cast<double>(kPicoPerUsd); }

struct PriceTable {
  double lambda_per_million_requests = 0.20;  // USD
  double lambda_compute_per_hour = 0.01125;   // USD, billed per 100 ms
  std::map<std::string, double> server_rates = {
      {"c5.base", 0.085},
      {"p3.2xlarge", 3.06},
  };  // USD per hour
};

// Append-only usage record: simulated invocations and server occupancy.
class UsageLedger {
 public:
  void record_invocation(int64_t billed_ns) {
    if (billed_ns < 0) throw std::invalid_argument("UsageLedger: negative billed duration");
    invocation_count_ += 1;
    billed_ns_ += billed_ns;
  }

  void record_server_seconds(const std::string& instance, double seconds) {
    if (seconds < 0) throw std::invalid_argument("UsageLedger: negative server seconds");
    server_seconds_[instance] += seconds;
  }

  uint64_t invocation_count() const { return invocation_count_; }
  int64_t billed_ns() const { return billed_ns_; }
  const std::map<std::string, double>& server_seconds() const { return server_seconds_; }

 private:
  uint64_t invocation_count_ = 0;
  int64_t billed_ns_ = 0;
  std::map<std::string, double> server_seconds_;
};

// Request fee plus compute fee over billed (100 ms rounded) durations, exact
// in picodollars.
inline PicoUsd lambda_cost_pico(const UsageLedger& ledger) {
  const int64_t ticks = ledger.billed_ns() / kBillingTickNs;
  return static_cast<PicoUsd>(ledger.invocation_count()) * kRequestPico +
         static_cast<PicoUsd>(ticks) * kComputeTickPico;
}

inline double lambda_cost(const UsageLedger& ledger) { return pico_to_usd(lambda_cost_pico(ledger)); }

// Server billing at per-second granularity, rounded to the nearest picodollar.
inline PicoUsd server_cost_pico(const UsageLedger& ledger, const PriceTable& prices) {
  double usd = 0.0;
  for (const auto& [instance, seconds] : ledger.server_seconds()) {
    auto it = prices.server_rates.find(instance);
    if (it == prices.server_rates.end())
      throw std::invalid_argument("server_cost: unknown instance type " + instance);
    usd += it->second * seconds / 3600.0;
  }
  return static_cast<PicoUsd>(usd * static_cast<double>(kPicoPerUsd) + 0.5);
}

inline double server_cost(const UsageLedger& ledger, const PriceTable& prices) {
  return pico_to_usd(server_cost_pico(ledger, prices));
}

// Performance per dollar: V = 1 / (T * C).
inline double value(double t_seconds, double c_usd) {
  if (t_seconds <= 0.0 || c_usd <= 0.0)
    throw std::invalid_argument("value: T and C must be positive");
  return 1.0 / (t_seconds * c_usd);
}

}  // namespace gnnpipe
