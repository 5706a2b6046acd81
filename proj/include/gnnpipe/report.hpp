#pragma once

#include <ostream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "gnnpipe/costmodel.hpp"
#include "gnnpipe/engine.hpp"

namespace gnnpipe {

// JSON-lines training report: one record per epoch plus a trailing summary
// with the cost breakdown. Serialization is deterministic (insertion-ordered
// keys, shortest-round-trip floats), so identical runs produce identical
// bytes.
inline void write_report(std::ostream& out, const TrainingResult& result,
                         const PriceTable& prices) {
  using json = nlohmann::ordered_json;
  for (const auto& rec : result.epochs) {
    json line;
    line["epoch"] = rec.epoch;
    line["loss"] = rec.loss;
    line["accuracy"] = rec.accuracy;
    line["epoch_time_s"] = ns_to_seconds(rec.epoch_ns);
    line["total_time_s"] = ns_to_seconds(rec.total_ns);
    line["lambdas"] = rec.fleet_total;
    json hist = json::object();
    for (const auto& [staleness, count] : rec.staleness_hist)
      hist[std::to_string(staleness)] = count;
    line["staleness"] = hist;
    out << line.dump() << "\n";
  }

  const double t_seconds = ns_to_seconds(result.total_ns);
  const double lambda_usd = lambda_cost(result.ledger);
  const double server_usd = server_cost(result.ledger, prices);
  const double total_usd = pico_to_usd(lambda_cost_pico(result.ledger) +
                                       server_cost_pico(result.ledger, prices));
  json summary;
  summary["summary"] = true;
  summary["epochs"] = result.epochs.size();
  summary["target_reached"] = result.target_reached;
  summary["converged"] = result.converged;
  summary["final_accuracy"] = result.final_accuracy;
  summary["total_time_s"] = t_seconds;
  summary["invocations"] = result.ledger.invocation_count();
  summary["relaunched"] = result.relaunched;
  summary["billed_lambda_s"] = static_cast<double>(result.ledger.billed_ns()) / 1e9;
  summary["lambda_cost_usd"] = lambda_usd;
  summary["server_cost_usd"] = server_usd;
  summary["total_cost_usd"] = total_usd;
  if (t_seconds > 0.0 && total_usd > 0.0) summary["value"] = value(t_seconds, total_usd);
  summary["staleness_min"] = result.staleness_min;
  summary["staleness_max"] = result.staleness_max;
  summary["max_epoch_gap"] = result.max_epoch_gap;
  out << summary.dump() << "\n";
}

inline std::string report_string(const TrainingResult& result, const PriceTable& prices) {
  std::ostringstream os;
  write_report(os, result, prices);
  return os.str();
}

}  // namespace gnnpipe
