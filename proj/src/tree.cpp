#include "cnnp/tree.hpp"

#include <cmath>
#include <fstream>

#include <spdlog/spdlog.h>

#include "cnnp/checkpoint.hpp"
#include "cnnp/pruner.hpp"

namespace cnnp {
namespace {

constexpr int kManifestVersion = 1;

std::string checkpoint_name(NodeId id) { return "node_" + std::to_string(id) + ".cnpm"; }
std::string profile_name(NodeId id) { return "profile_" + std::to_string(id) + ".json"; }

void write_text(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::io, "cannot write " + tmp);
    f << text;
    if (!f) throw Error(ErrorCode::io, "write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::io, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::invalid_argument, "corrupt " + path.filename().string() + ": " + e.what());
  }
}

std::vector<Index> conv_widths(const Architecture& arch) {
  std::vector<Index> out;
  for (std::size_t l : conv_layer_indices(arch)) out.push_back(arch.layers[l].out_channels);
  return out;
}

}  // namespace

nlohmann::json to_json(const NodeMeta& m) {
  nlohmann::json j = {{"id", m.id},
                      {"parent", m.parent ? nlohmann::json(*m.parent) : nlohmann::json(nullptr)},
                      {"children", m.children},
                      {"filter_count", m.filter_count},
                      {"layer_filters", m.layer_filters},
                      {"accuracy", m.accuracy},
                      {"correct", m.correct},
                      {"params", m.params},
                      {"flops", m.flops},
                      {"compression_ratio", m.compression_ratio},
                      {"storage_bytes", m.storage_bytes},
                      {"converged", m.converged},
                      {"confusion", m.confusion},
                      {"checkpoint", m.checkpoint}};
  j["plan"] = m.plan ? to_json(*m.plan) : nlohmann::json(nullptr);
  j["trace"] = m.trace ? to_json(*m.trace) : nlohmann::json(nullptr);
  return j;
}

NodeMeta node_from_json(const nlohmann::json& j) {
  try {
    NodeMeta m;
    m.id = j.at("id").get<NodeId>();
    if (!j.at("parent").is_null()) m.parent = j["parent"].get<NodeId>();
    m.children = j.at("children").get<std::vector<NodeId>>();
    m.filter_count = j.at("filter_count").get<Index>();
    m.layer_filters = j.at("layer_filters").get<std::vector<Index>>();
    m.accuracy = j.at("accuracy").get<double>();
    m.correct = j.at("correct").get<std::int64_t>();
    m.params = j.at("params").get<std::int64_t>();
    m.flops = j.at("flops").get<std::int64_t>();
    m.compression_ratio = j.at("compression_ratio").get<double>();
    m.storage_bytes = j.at("storage_bytes").get<std::uint64_t>();
    m.converged = j.at("converged").get<bool>();
    m.confusion = j.at("confusion").get<std::vector<std::vector<std::int64_t>>>();
    m.checkpoint = j.at("checkpoint").get<std::string>();
    if (!j.at("plan").is_null()) m.plan = plan_from_json(j["plan"]);
    if (!j.at("trace").is_null()) m.trace = trace_from_json(j["trace"]);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_argument, std::string("corrupt node record: ") + e.what());
  }
}

nlohmann::json to_json(const SessionDefaults& d) {
  nlohmann::json j = {{"finetune", to_json(d.finetune)}, {"sensitivity", to_json(d.sensitivity)}};
  j["dataset"] = d.dataset ? to_json(*d.dataset) : nlohmann::json(nullptr);
  return j;
}

SessionDefaults session_defaults_from_json(const nlohmann::json& j) {
  SessionDefaults d;
  if (j.contains("finetune")) d.finetune = finetune_config_from_json(j["finetune"]);
  if (j.contains("sensitivity")) d.sensitivity = sensitivity_settings_from_json(j["sensitivity"]);
  if (j.contains("dataset") && !j["dataset"].is_null()) d.dataset = dataset_spec_from_json(j["dataset"]);
  return d;
}

Estimate estimate(const NodeMeta& a, const NodeMeta& b, const EstimateQuery& q) {
  if (a.id == b.id) throw Error(ErrorCode::invalid_argument, "estimate needs two distinct nodes");
  if (q.target_accuracy.has_value() == q.target_filters.has_value()) {
    throw Error(ErrorCode::invalid_argument, "give exactly one of target_accuracy or target_filters");
  }
  // Canonical order (fewer filters first) makes the arithmetic symmetric.
  const bool swap = std::make_pair(b.filter_count, b.id) < std::make_pair(a.filter_count, a.id);
  const NodeMeta& lo = swap ? b : a;
  const NodeMeta& hi = swap ? a : b;
  const double f0 = static_cast<double>(lo.filter_count), f1 = static_cast<double>(hi.filter_count);
  Estimate out;
  if (q.target_accuracy) {
    if (lo.accuracy == hi.accuracy) {
      throw Error(ErrorCode::non_informative_pair, "non-informative pair: nodes " + std::to_string(a.id) + " and " +
                                                       std::to_string(b.id) + " have equal accuracy");
    }
    const double f = f0 + (f1 - f0) * (*q.target_accuracy - lo.accuracy) / (hi.accuracy - lo.accuracy);
    out.filters = static_cast<Index>(std::llround(f));
  } else {
    if (lo.filter_count == hi.filter_count) {
      throw Error(ErrorCode::non_informative_pair, "non-informative pair: nodes " + std::to_string(a.id) + " and " +
                                                       std::to_string(b.id) + " have equal filter counts");
    }
    out.accuracy = lo.accuracy + (hi.accuracy - lo.accuracy) * (*q.target_filters - f0) / (f1 - f0);
  }
  return out;
}

std::shared_ptr<Session> Session::create(Model root, std::shared_ptr<const DatasetPair> data, SessionDefaults defaults) {
  if (!data) throw Error(ErrorCode::invalid_argument, "session needs datasets");
  const Architecture& arch = root.architecture();
  for (const Dataset* d : {&data->train, &data->test}) {
    if (d->num_classes() != arch.num_classes()) {
      throw Error(ErrorCode::invalid_argument, "dataset has " + std::to_string(d->num_classes()) +
                                                   " classes but the model has " + std::to_string(arch.num_classes()));
    }
    if (d->size() > 0 && d->example_shape() != arch.input_shape) {
      throw Error(ErrorCode::shape_mismatch, "dataset examples are " + shape_string(d->example_shape()) +
                                                 " but the model expects " + shape_string(arch.input_shape));
    }
  }
  std::shared_ptr<Session> s(new Session());
  s->data_ = std::move(data);
  s->defaults_ = std::move(defaults);
  s->root_params_ = count_params(root);
  NodeMeta meta = s->describe(0, root);
  s->nodes_[0] = std::move(meta);
  s->next_id_ = 1;
  s->models_[0] = std::make_shared<const Model>(std::move(root));
  return s;
}

NodeMeta Session::describe(NodeId id, const Model& m) const {
  NodeMeta meta;
  meta.id = id;
  const Evaluation e = evaluate(m, data_->test);
  meta.accuracy = e.accuracy;
  meta.correct = e.correct;
  meta.confusion = confusion_from_predictions(data_->test.labels, e.predictions, m.architecture().num_classes()).counts;
  meta.layer_filters = conv_widths(m.architecture());
  meta.filter_count = total_filters(m.architecture());
  meta.params = count_params(m);
  meta.flops = count_flops(m);
  meta.compression_ratio = 1.0 - static_cast<double>(meta.params) / static_cast<double>(root_params_);
  meta.storage_bytes = encode_checkpoint(m).size();
  meta.checkpoint = checkpoint_name(id);
  return meta;
}

std::optional<std::filesystem::path> Session::directory() const {
  std::shared_lock lock(mutex_);
  return dir_;
}

std::vector<NodeMeta> Session::nodes() const {
  std::shared_lock lock(mutex_);
  std::vector<NodeMeta> out;
  for (const auto& [id, m] : nodes_) out.push_back(m);
  return out;
}

const NodeMeta& Session::node_locked(NodeId id) const {
  const auto it = nodes_.find(id);
  if (it == nodes_.end()) throw Error(ErrorCode::not_found, "no node " + std::to_string(id), std::to_string(id));
  return it->second;
}

NodeMeta Session::node(NodeId id) const {
  std::shared_lock lock(mutex_);
  return node_locked(id);
}

bool Session::has_node(NodeId id) const {
  std::shared_lock lock(mutex_);
  return nodes_.count(id) > 0;
}

std::vector<NodeId> Session::path_to(NodeId id) const {
  std::shared_lock lock(mutex_);
  std::vector<NodeId> path;
  std::optional<NodeId> cur = id;
  while (cur) {
    path.push_back(*cur);
    cur = node_locked(*cur).parent;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

std::shared_ptr<const Model> Session::model(NodeId id) const {
  std::string file;
  std::optional<std::filesystem::path> dir;
  {
    std::shared_lock lock(mutex_);
    file = node_locked(id).checkpoint;
    dir = dir_;
  }
  std::lock_guard lock(cache_mutex_);
  if (auto it = models_.find(id); it != models_.end()) return it->second;
  if (!dir) throw Error(ErrorCode::not_found, "model of node " + std::to_string(id) + " is not available");
  const auto path = *dir / file;
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::not_found, "checkpoint for node " + std::to_string(id) + " missing: " + path.string(),
                std::to_string(id));
  }
  auto m = std::make_shared<const Model>(load_checkpoint(path));
  models_[id] = m;
  return m;
}

bool Session::has_profile(NodeId id) const {
  {
    std::lock_guard lock(cache_mutex_);
    if (profiles_.count(id)) return true;
  }
  const auto dir = directory();
  return dir && std::filesystem::exists(*dir / profile_name(id));
}

std::shared_ptr<const SensitivityProfile> Session::profile(NodeId id) const {
  {
    std::lock_guard lock(cache_mutex_);
    if (auto it = profiles_.find(id); it != profiles_.end()) return it->second;
  }
  const auto dir = directory();
  std::shared_ptr<const SensitivityProfile> p;
  if (dir && std::filesystem::exists(*dir / profile_name(id))) {
    p = std::make_shared<const SensitivityProfile>(profile_from_json(read_json(*dir / profile_name(id))));
  } else {
    const auto m = model(id);
    const auto& s = defaults_.sensitivity;
    p = std::make_shared<const SensitivityProfile>(build_profile(*m, data_->train, s.runs, s.options, s.seed, s.measure));
    if (dir) write_text(*dir / profile_name(id), to_json(*p).dump());
  }
  std::lock_guard lock(cache_mutex_);
  return profiles_.emplace(id, p).first->second;
}

void Session::persist_node(const NodeMeta& meta, const Model& m) const {
  if (!dir_) return;
  const auto bytes = encode_checkpoint(m);
  write_text(*dir_ / meta.checkpoint, bytes);
}

nlohmann::json Session::manifest() const {
  std::shared_lock lock(mutex_);
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& [id, m] : nodes_) nodes.push_back(to_json(m));
  return {{"format", "cnnp-session"},
          {"version", kManifestVersion},
          {"root_id", 0},
          {"next_id", next_id_},
          {"root_params", root_params_},
          {"defaults", to_json(defaults_)},
          {"nodes", nodes}};
}

void Session::write_manifest_locked() const {
  if (!dir_) return;
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& [id, m] : nodes_) nodes.push_back(to_json(m));
  const nlohmann::json j = {{"format", "cnnp-session"},
                            {"version", kManifestVersion},
                            {"root_id", 0},
                            {"next_id", next_id_},
                            {"root_params", root_params_},
                            {"defaults", to_json(defaults_)},
                            {"nodes", nodes}};
  write_text(*dir_ / "manifest.json", j.dump(2));
}

void Session::save(const std::filesystem::path& dir) {
  std::lock_guard writer(writer_);
  std::filesystem::create_directories(dir);
  const auto old = directory();
  std::vector<NodeMeta> all = nodes();
  for (const auto& meta : all) {
    const auto target = dir / meta.checkpoint;
    if (old && std::filesystem::equivalent(*old, dir)) break;
    write_text(target, encode_checkpoint(*model(meta.id)));
    if (old && std::filesystem::exists(*old / profile_name(meta.id))) {
      std::filesystem::copy_file(*old / profile_name(meta.id), dir / profile_name(meta.id),
                                 std::filesystem::copy_options::overwrite_existing);
    }
  }
  {
    std::lock_guard lock(cache_mutex_);
    for (const auto& [id, p] : profiles_) write_text(dir / profile_name(id), to_json(*p).dump());
  }
  std::unique_lock lock(mutex_);
  dir_ = dir;
  write_manifest_locked();
}

std::shared_ptr<Session> Session::load(const std::filesystem::path& dir, std::shared_ptr<const DatasetPair> data) {
  if (!data) throw Error(ErrorCode::invalid_argument, "session needs datasets");
  const auto j = read_json(dir / "manifest.json");
  std::shared_ptr<Session> s(new Session());
  try {
    if (j.at("format") != "cnnp-session") throw Error(ErrorCode::invalid_argument, "manifest.json is not a session manifest");
    if (j.at("version").get<int>() != kManifestVersion) {
      throw Error(ErrorCode::version_mismatch, "unsupported session version " + j["version"].dump());
    }
    s->next_id_ = j.at("next_id").get<NodeId>();
    s->root_params_ = j.at("root_params").get<std::int64_t>();
    s->defaults_ = session_defaults_from_json(j.at("defaults"));
    for (const auto& n : j.at("nodes")) {
      NodeMeta m = node_from_json(n);
      s->nodes_[m.id] = std::move(m);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_argument, std::string("corrupt manifest.json: ") + e.what());
  }
  if (!s->nodes_.count(0)) throw Error(ErrorCode::invalid_argument, "corrupt manifest.json: no root node");
  for (const auto& [id, m] : s->nodes_) {
    if (id >= s->next_id_) throw Error(ErrorCode::invalid_argument, "corrupt manifest.json: node id beyond next_id");
    if (id != 0 && (!m.parent || !s->nodes_.count(*m.parent))) {
      throw Error(ErrorCode::invalid_argument, "corrupt manifest.json: node " + std::to_string(id) + " has no parent");
    }
    if (!std::filesystem::exists(dir / m.checkpoint)) {
      throw Error(ErrorCode::not_found, "checkpoint for node " + std::to_string(id) + " missing: " + m.checkpoint,
                  std::to_string(id));
    }
  }
  s->data_ = std::move(data);
  s->dir_ = dir;
  return s;
}

NodeId Session::prune_node(NodeId id, const PruningPlan& plan, const FineTuneConfig& config,
                           const ProgressCallback& progress, std::stop_token stop) {
  std::lock_guard writer(writer_);
  const auto parent = model(id);
  if (plan.filters.empty()) throw Error(ErrorCode::invalid_plan, "plan must remove at least one filter");
  const auto violations = validate_plan(parent->architecture(), plan);
  if (!violations.empty()) throw Error(ErrorCode::invalid_plan, violations.front().message, std::string(to_string(violations.front().kind)));
  validate(config);

  Model pruned = apply_plan(*parent, plan);
  FineTuneResult ft = fine_tune(pruned, data_->train, data_->test, config, progress, stop);
  if (ft.trace.reason == TerminationReason::cancelled) throw Error(ErrorCode::cancelled, "fine-tune cancelled");

  NodeId child;
  {
    std::shared_lock lock(mutex_);
    child = next_id_;
  }
  NodeMeta meta = describe(child, ft.model);
  meta.parent = id;
  meta.plan = plan;
  meta.plan->node_id = id;
  meta.converged = ft.trace.converged;
  meta.trace = std::move(ft.trace);
  persist_node(meta, ft.model);
  {
    std::lock_guard lock(cache_mutex_);
    models_[child] = std::make_shared<const Model>(std::move(ft.model));
  }
  std::unique_lock lock(mutex_);
  nodes_[id].children.push_back(child);
  nodes_[child] = std::move(meta);
  next_id_ = child + 1;
  write_manifest_locked();
  spdlog::info("node {}: {} filters, accuracy {:.4f}, converged {}", child, nodes_[child].filter_count,
               nodes_[child].accuracy, nodes_[child].converged);
  return child;
}

std::vector<NodeId> Session::auto_prune(NodeId id, double ratio, double stop_accuracy, const FineTuneConfig& config,
                                        const ProgressCallback& progress, std::stop_token stop,
                                        const NodeCallback& on_node) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw Error(ErrorCode::invalid_argument, "ratio must be in (0, 1)");
  if (!(stop_accuracy >= 0.0 && stop_accuracy <= 1.0)) {
    throw Error(ErrorCode::invalid_argument, "stop_accuracy must be in [0, 1]");
  }
  validate(config);
  node(id);
  std::vector<NodeId> out;
  NodeId cur = id;
  while (!stop.stop_requested()) {
    const auto prof = profile(cur);
    const auto total = static_cast<Index>(prof->size());
    const Index count = std::min<Index>(std::llround(ratio * static_cast<double>(total)), total - 1);
    if (count <= 0) break;
    const PruningPlan plan = plan_from_threshold(*prof, count, PlanOrigin::auto_ratio);
    if (plan.filters.empty()) break;
    const NodeId child = prune_node(cur, plan, config, progress, stop);
    out.push_back(child);
    if (on_node) on_node(child);
    const NodeMeta m = node(child);
    if (m.accuracy < stop_accuracy || !m.converged) break;
    cur = child;
  }
  return out;
}

Estimate Session::estimate(NodeId a, NodeId b, const EstimateQuery& query) const {
  std::shared_lock lock(mutex_);
  return cnnp::estimate(node_locked(a), node_locked(b), query);
}

std::vector<double> Session::confusion_cell_history(NodeId id, Index i, Index j) const {
  const auto path = path_to(id);
  std::shared_lock lock(mutex_);
  std::vector<double> out;
  for (NodeId n : path) {
    const auto m = confusion_from_counts(node_locked(n).confusion);
    if (i < 0 || j < 0 || i >= m.size() || j >= m.size()) {
      throw Error(ErrorCode::invalid_argument, "confusion cell (" + std::to_string(i) + ", " + std::to_string(j) +
                                                   ") outside a " + std::to_string(m.size()) + "x" +
                                                   std::to_string(m.size()) + " matrix");
    }
    out.push_back(m.percent[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
  }
  return out;
}

}  // namespace cnnp
