#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cnnp/tree.hpp"

namespace cnnp {

/// Per-node summary plus totals. Contains no timestamps, so equal sessions
/// give byte-identical reports.
nlohmann::json report_json(const std::vector<NodeMeta>& nodes);

/// One row per node; confusion counts as columns conf_<true>_<pred>.
std::string report_csv(const std::vector<NodeMeta>& nodes);

}  // namespace cnnp
