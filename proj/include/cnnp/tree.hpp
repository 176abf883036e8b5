#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stop_token>
#include <vector>

#include <nlohmann/json.hpp>

#include "cnnp/config.hpp"
#include "cnnp/criteria.hpp"
#include "cnnp/finetune.hpp"
#include "cnnp/instances.hpp"
#include "cnnp/model.hpp"

namespace cnnp {

using NodeId = std::int64_t;

struct NodeMeta {
  NodeId id = 0;
  std::optional<NodeId> parent;
  std::vector<NodeId> children;
  Index filter_count = 0;
  std::vector<Index> layer_filters;  // per conv layer
  double accuracy = 0.0;
  std::int64_t correct = 0;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  double compression_ratio = 0.0;
  std::uint64_t storage_bytes = 0;
  bool converged = true;
  std::optional<PruningPlan> plan;
  std::optional<FineTuneTrace> trace;
  std::vector<std::vector<std::int64_t>> confusion;
  std::string checkpoint;  // file name inside the session directory
};

nlohmann::json to_json(const NodeMeta& m);
NodeMeta node_from_json(const nlohmann::json& j);

struct SessionDefaults {
  FineTuneConfig finetune;
  SensitivitySettings sensitivity;
  std::optional<DatasetSpec> dataset;
};

nlohmann::json to_json(const SessionDefaults& d);
SessionDefaults session_defaults_from_json(const nlohmann::json& j);

struct EstimateQuery {
  std::optional<double> target_accuracy;
  std::optional<double> target_filters;
};

struct Estimate {
  std::optional<Index> filters;
  std::optional<double> accuracy;
};

/// Linear interpolation on (filter_count, accuracy) through two nodes.
/// Filter answers are rounded to the nearest integer. Symmetric in (a, b).
Estimate estimate(const NodeMeta& a, const NodeMeta& b, const EstimateQuery& query);

using NodeCallback = std::function<void(NodeId)>;

/// A pruning tree over one pair of datasets. Metadata reads are safe from any
/// thread; mutations (prune_node, auto_prune) are serialized and publish a
/// node only once it is complete.
class Session {
 public:
  static std::shared_ptr<Session> create(Model root, std::shared_ptr<const DatasetPair> data,
                                         SessionDefaults defaults = {});
  /// Reads the manifest; checkpoints are loaded on first use.
  static std::shared_ptr<Session> load(const std::filesystem::path& dir, std::shared_ptr<const DatasetPair> data);

  /// Writes manifest.json, node_<id>.cnpm and cached profile_<id>.json
  /// files. Later checkpoints and profiles are written there as they appear.
  void save(const std::filesystem::path& dir);
  std::optional<std::filesystem::path> directory() const;

  NodeId root_id() const { return 0; }
  std::vector<NodeMeta> nodes() const;
  NodeMeta node(NodeId id) const;
  bool has_node(NodeId id) const;
  /// Root first, ending at `id`.
  std::vector<NodeId> path_to(NodeId id) const;

  std::shared_ptr<const Model> model(NodeId id) const;
  /// Cached per node; computed with the session's sensitivity settings.
  std::shared_ptr<const SensitivityProfile> profile(NodeId id) const;
  bool has_profile(NodeId id) const;

  const SessionDefaults& defaults() const { return defaults_; }
  const DatasetPair& data() const { return *data_; }
  std::shared_ptr<const DatasetPair> data_ptr() const { return data_; }

  /// Prune, fine-tune and evaluate; returns the new child's id. Invalid or
  /// empty plans are rejected before any computation.
  NodeId prune_node(NodeId id, const PruningPlan& plan, const FineTuneConfig& config,
                    const ProgressCallback& progress = {}, std::stop_token stop = {});

  /// Repeated fraction-`ratio` plans from `id` until a child falls below
  /// `stop_accuracy`, fails to converge, or no filter can be removed.
  std::vector<NodeId> auto_prune(NodeId id, double ratio, double stop_accuracy, const FineTuneConfig& config,
                                 const ProgressCallback& progress = {}, std::stop_token stop = {},
                                 const NodeCallback& on_node = {});

  Estimate estimate(NodeId a, NodeId b, const EstimateQuery& query) const;
  /// Percentage in cell (i, j) of every confusion matrix on the root path.
  std::vector<double> confusion_cell_history(NodeId id, Index i, Index j) const;

  nlohmann::json manifest() const;

 private:
  Session() = default;
  NodeMeta describe(NodeId id, const Model& m) const;
  void persist_node(const NodeMeta& meta, const Model& m) const;
  void write_manifest_locked() const;
  const NodeMeta& node_locked(NodeId id) const;

  std::shared_ptr<const DatasetPair> data_;
  SessionDefaults defaults_;
  std::int64_t root_params_ = 0;

  mutable std::shared_mutex mutex_;  // guards nodes_, next_id_, dir_
  std::map<NodeId, NodeMeta> nodes_;
  NodeId next_id_ = 0;
  std::optional<std::filesystem::path> dir_;

  mutable std::mutex cache_mutex_;
  mutable std::map<NodeId, std::shared_ptr<const Model>> models_;
  mutable std::map<NodeId, std::shared_ptr<const SensitivityProfile>> profiles_;

  std::mutex writer_;  // serializes mutations
};

}  // namespace cnnp
