#include "cnnp/report.hpp"

#include <charconv>

namespace cnnp {
namespace {

std::string number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

int recovery_cost(const NodeMeta& m) { return m.trace ? m.trace->epochs_used : 0; }

}  // namespace

nlohmann::json report_json(const std::vector<NodeMeta>& nodes) {
  nlohmann::json rows = nlohmann::json::array();
  std::int64_t converged = 0, epochs = 0;
  std::optional<NodeId> last_converged;
  for (const auto& m : nodes) {
    converged += m.converged;
    epochs += recovery_cost(m);
    if (m.converged && m.parent) last_converged = m.id;
    rows.push_back({{"id", m.id},
                    {"parent", m.parent ? nlohmann::json(*m.parent) : nlohmann::json(nullptr)},
                    {"filters", m.filter_count},
                    {"layer_filters", m.layer_filters},
                    {"accuracy", m.accuracy},
                    {"params", m.params},
                    {"flops", m.flops},
                    {"compression_ratio", m.compression_ratio},
                    {"storage_bytes", m.storage_bytes},
                    {"recovery_cost", recovery_cost(m)},
                    {"converged", m.converged},
                    {"termination", m.trace ? nlohmann::json(to_string(m.trace->reason)) : nlohmann::json(nullptr)},
                    {"confusion", m.confusion}});
  }
  nlohmann::json totals = {{"nodes", nodes.size()}, {"converged_nodes", converged}, {"total_recovery_cost", epochs}};
  totals["last_converged_node"] = last_converged ? nlohmann::json(*last_converged) : nlohmann::json(nullptr);
  return {{"format", "cnnp-report"}, {"version", 1}, {"nodes", rows}, {"totals", totals}};
}

std::string report_csv(const std::vector<NodeMeta>& nodes) {
  std::size_t classes = 0;
  for (const auto& m : nodes) classes = std::max(classes, m.confusion.size());
  std::string out =
      "id,parent,filters,accuracy,params,flops,compression_ratio,storage_bytes,recovery_cost,converged,termination";
  for (std::size_t i = 0; i < classes; ++i)
    for (std::size_t j = 0; j < classes; ++j) out += ",conf_" + std::to_string(i) + "_" + std::to_string(j);
  out += "\n";
  for (const auto& m : nodes) {
    out += std::to_string(m.id) + "," + (m.parent ? std::to_string(*m.parent) : "") + "," +
           std::to_string(m.filter_count) + "," + number(m.accuracy) + "," + std::to_string(m.params) + "," +
           std::to_string(m.flops) + "," + number(m.compression_ratio) + "," + std::to_string(m.storage_bytes) + "," +
           std::to_string(recovery_cost(m)) + "," + (m.converged ? "true" : "false") + "," +
           (m.trace ? std::string(to_string(m.trace->reason)) : "");
    for (std::size_t i = 0; i < classes; ++i)
      for (std::size_t j = 0; j < classes; ++j) {
        const bool has = i < m.confusion.size() && j < m.confusion[i].size();
        out += "," + std::to_string(has ? m.confusion[i][j] : 0);
      }
    out += "\n";
  }
  return out;
}

}  // namespace cnnp
