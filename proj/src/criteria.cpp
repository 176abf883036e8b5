#include "cnnp/criteria.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <spdlog/spdlog.h>

#include "cnnp/kernels.hpp"

namespace cnnp {
namespace {

std::map<std::size_t, Index> conv_sizes(const Architecture& arch) {
  std::map<std::size_t, Index> out;
  for (std::size_t l : conv_layer_indices(arch)) out[l] = arch.layers[l].out_channels;
  return out;
}

void sort_unique(std::vector<FilterRef>& v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

}  // namespace

std::vector<FilterRef> all_filters(const Architecture& arch) {
  std::vector<FilterRef> out;
  for (std::size_t l : conv_layer_indices(arch)) {
    for (Index f = 0; f < arch.layers[l].out_channels; ++f) out.push_back({l, f});
  }
  return out;
}

std::string_view to_string(InstabilityMeasure m) {
  return m == InstabilityMeasure::variance ? "variance" : "mad";
}

InstabilityMeasure instability_measure_from_string(std::string_view name) {
  if (name == "mad") return InstabilityMeasure::mean_absolute_deviation;
  if (name == "variance") return InstabilityMeasure::variance;
  throw Error(ErrorCode::invalid_argument, "unknown instability measure '" + std::string(name) + "'");
}

std::size_t SensitivityProfile::index_of(const FilterRef& f) const {
  const auto it = std::lower_bound(filters.begin(), filters.end(), f);
  if (it == filters.end() || *it != f) throw Error(ErrorCode::not_found, "no filter " + to_string(f) + " in profile");
  return static_cast<std::size_t>(it - filters.begin());
}

std::vector<std::pair<std::size_t, Index>> SensitivityProfile::layer_sizes() const {
  std::vector<std::pair<std::size_t, Index>> out;
  for (const FilterRef& f : filters) {
    if (out.empty() || out.back().first != f.layer) out.emplace_back(f.layer, 0);
    ++out.back().second;
  }
  return out;
}

void finalize_run(SensitivityRun& run) {
  const std::size_t n = run.filters.size();
  run.sensitivity.assign(n, 0.0);
  for (std::size_t begin = 0; begin < n;) {
    std::size_t end = begin;
    double sq = 0.0;
    while (end < n && run.filters[end].layer == run.filters[begin].layer) sq += run.raw[end] * run.raw[end], ++end;
    const double norm = std::sqrt(sq);
    for (std::size_t i = begin; i < end; ++i) run.sensitivity[i] = norm > 0 ? run.raw[i] / norm : 0.0;
    begin = end;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  // filters are in (layer, filter) order, so a stable sort breaks ties by index.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return run.sensitivity[a] < run.sensitivity[b]; });
  run.rank.assign(n, 0);
  for (std::size_t r = 0; r < n; ++r) run.rank[order[r]] = static_cast<Index>(r);
}

SensitivityRun sensitivity_run(const Model& model, const Dataset& data, const SensitivityOptions& options,
                               std::uint64_t seed) {
  if (options.num_batches < 1) throw Error(ErrorCode::invalid_argument, "num_batches must be >= 1");
  if (options.batch_size < 1) throw Error(ErrorCode::invalid_argument, "batch_size must be >= 1");
  if (data.size() == 0) throw Error(ErrorCode::empty_dataset, "sensitivity needs a non-empty dataset");
  const Architecture& arch = model.architecture();
  const auto convs = conv_layer_indices(arch);

  auto order = batches(static_cast<std::size_t>(data.size()), static_cast<std::size_t>(options.batch_size), seed, true);
  if (static_cast<Index>(order.size()) > options.num_batches) {
    order.resize(static_cast<std::size_t>(options.num_batches));
  } else if (static_cast<Index>(order.size()) < options.num_batches) {
    spdlog::warn("sensitivity: {} batches of {} requested but dataset holds {} examples; using {} batches",
                 options.num_batches, options.batch_size, data.size(), order.size());
  }

  SensitivityRun run;
  run.seed = seed;
  run.filters = all_filters(arch);
  run.raw.assign(run.filters.size(), 0.0);
  BackwardOptions bopts;
  bopts.param_grads = false;
  for (const auto& idx : order) {
    const Batch b = gather(data, idx);
    const auto pass = forward_pass(model, b.images);
    auto loss = softmax_cross_entropy(pass.logits, b.labels);
    // grad_logits carries 1/N from the batch mean; undo it for per-example gradients.
    const Index n = b.images.dim(0);
    loss.grad_logits.vec() *= static_cast<float>(n);
    const auto grads = backward_pass(model, pass.cache, loss.grad_logits, bopts);
    std::size_t offset = 0;
    for (std::size_t l : convs) {
      const Tensorf& f = feature_map(pass, arch, l);
      const Tensorf& g = grads.feature_maps[l];
      const Index c = f.dim(1), hw = f.dim(2) * f.dim(3);
      const auto prod = f.matrix(n * c, hw).array() * g.matrix(n * c, hw).array();
      const Eigen::VectorXd means = prod.template cast<double>().rowwise().sum() / static_cast<double>(hw);
      for (Index s = 0; s < n; ++s)
        for (Index ch = 0; ch < c; ++ch) run.raw[offset + static_cast<std::size_t>(ch)] += std::abs(means[s * c + ch]);
      offset += static_cast<std::size_t>(c);
    }
    run.examples += n;
  }
  for (double& r : run.raw) r /= static_cast<double>(run.examples);
  finalize_run(run);
  return run;
}

double rank_instability(std::span<const double> ranks, InstabilityMeasure measure) {
  if (ranks.empty()) return 0.0;
  const double n = static_cast<double>(ranks.size());
  const double mean = std::accumulate(ranks.begin(), ranks.end(), 0.0) / n;
  double acc = 0.0;
  for (double r : ranks) {
    const double d = r - mean;
    acc += measure == InstabilityMeasure::variance ? d * d : std::abs(d);
  }
  return acc / n;
}

SensitivityProfile aggregate_runs(std::vector<SensitivityRun> runs, InstabilityMeasure measure) {
  if (runs.empty()) throw Error(ErrorCode::invalid_argument, "a profile needs at least one run");
  SensitivityProfile p;
  p.measure = measure;
  p.filters = runs.front().filters;
  const std::size_t nf = p.filters.size();
  for (const auto& r : runs) {
    if (r.filters != p.filters || r.sensitivity.size() != nf || r.rank.size() != nf) {
      throw Error(ErrorCode::shape_mismatch, "sensitivity runs cover different filters");
    }
  }
  const double n = static_cast<double>(runs.size());
  p.mean_sensitivity.assign(nf, 0.0);
  p.mean_rank.assign(nf, 0.0);
  p.instability.assign(nf, 0.0);
  std::vector<double> ranks(runs.size());
  for (std::size_t i = 0; i < nf; ++i) {
    for (std::size_t r = 0; r < runs.size(); ++r) {
      p.mean_sensitivity[i] += runs[r].sensitivity[i];
      ranks[r] = static_cast<double>(runs[r].rank[i]);
    }
    p.mean_sensitivity[i] /= n;
    p.mean_rank[i] = std::accumulate(ranks.begin(), ranks.end(), 0.0) / n;
    p.instability[i] = rank_instability(ranks, measure);
  }
  p.runs = std::move(runs);
  return p;
}

SensitivityProfile build_profile(const Model& model, const Dataset& data, std::size_t runs,
                                 const SensitivityOptions& options, std::uint64_t base_seed,
                                 InstabilityMeasure measure) {
  if (runs < 1) throw Error(ErrorCode::invalid_argument, "profile needs n >= 1 runs");
  std::vector<SensitivityRun> out;
  for (std::size_t i = 0; i < runs; ++i) {
    out.push_back(sensitivity_run(model, data, options, base_seed + i));
    out.back().run_index = i;
  }
  return aggregate_runs(std::move(out), measure);
}

std::string_view to_string(PlanOrigin o) {
  switch (o) {
    case PlanOrigin::threshold: return "threshold";
    case PlanOrigin::auto_ratio: return "auto_ratio";
    case PlanOrigin::manual_refined: return "manual_refined";
  }
  return "threshold";
}

PlanOrigin plan_origin_from_string(std::string_view name) {
  for (PlanOrigin o : {PlanOrigin::threshold, PlanOrigin::auto_ratio, PlanOrigin::manual_refined}) {
    if (to_string(o) == name) return o;
  }
  throw Error(ErrorCode::invalid_argument, "unknown plan origin '" + std::string(name) + "'");
}

bool PruningPlan::contains(const FilterRef& f) const { return std::binary_search(filters.begin(), filters.end(), f); }

std::vector<std::size_t> removal_order(const SensitivityProfile& profile) {
  std::vector<std::size_t> order(profile.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (profile.mean_sensitivity[a] != profile.mean_sensitivity[b]) {
      return profile.mean_sensitivity[a] < profile.mean_sensitivity[b];
    }
    return profile.instability[a] > profile.instability[b];
  });
  return order;
}

PruningPlan plan_from_threshold(const SensitivityProfile& profile, Index count, PlanOrigin origin) {
  const Index total = static_cast<Index>(profile.size());
  if (count < 0) throw Error(ErrorCode::invalid_argument, "filter count must be >= 0");
  if (count >= total) {
    throw Error(ErrorCode::invalid_argument, "cannot remove " + std::to_string(count) + " of " +
                                                 std::to_string(total) + " filters");
  }
  const auto order = removal_order(profile);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + count);

  std::map<std::size_t, Index> per_layer;
  for (std::size_t i : chosen) ++per_layer[profile.filters[i].layer];
  for (const auto& [layer, size] : profile.layer_sizes()) {
    if (per_layer[layer] < size) continue;
    // The last chosen filter of this layer is its most sensitive victim.
    for (auto it = chosen.rbegin(); it != chosen.rend(); ++it) {
      if (profile.filters[*it].layer == layer) {
        chosen.erase(std::next(it).base());
        break;
      }
    }
  }

  PruningPlan plan;
  plan.origin = origin;
  plan.requested = count;
  for (std::size_t i : chosen) plan.filters.push_back(profile.filters[i]);
  sort_unique(plan.filters);
  plan.shortfall = count - static_cast<Index>(plan.filters.size());
  if (plan.shortfall > 0) {
    spdlog::info("plan: {} requested filters spared to keep every layer alive", plan.shortfall);
  }
  return plan;
}

PruningPlan plan_from_fraction(const SensitivityProfile& profile, double fraction, PlanOrigin origin) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw Error(ErrorCode::invalid_argument, "fraction must be in [0, 1)");
  }
  return plan_from_threshold(profile, static_cast<Index>(std::llround(fraction * static_cast<double>(profile.size()))),
                             origin);
}

PlanImpact plan_impact(const SensitivityProfile& profile, const PruningPlan& plan) {
  std::vector<bool> removed(profile.size(), false);
  for (const FilterRef& f : plan.filters) removed[profile.index_of(f)] = true;
  auto pct = [&](auto weight) {
    double all = 0.0, kept = 0.0;
    for (std::size_t i = 0; i < profile.size(); ++i) {
      all += weight(i);
      if (!removed[i]) kept += weight(i);
    }
    return all > 0.0 ? 100.0 * kept / all : 100.0;
  };
  PlanImpact out;
  out.remaining_filters_pct = pct([](std::size_t) { return 1.0; });
  out.remaining_sensitivity_pct = pct([&](std::size_t i) { return profile.mean_sensitivity[i]; });
  out.remaining_instability_pct = pct([&](std::size_t i) { return profile.instability[i]; });
  return out;
}

PruningPlan refine_plan(const Architecture& arch, const PruningPlan& plan, std::span<const FilterRef> add,
                        std::span<const FilterRef> remove) {
  const auto sizes = conv_sizes(arch);
  std::set<FilterRef> result(plan.filters.begin(), plan.filters.end());
  for (const FilterRef& f : remove) {
    if (!result.erase(f)) throw Error(ErrorCode::invalid_plan, "filter " + to_string(f) + " is not in the plan");
  }
  for (const FilterRef& f : add) {
    const auto it = sizes.find(f.layer);
    if (it == sizes.end() || f.filter < 0 || f.filter >= it->second) {
      throw Error(ErrorCode::not_found, "model has no filter " + to_string(f));
    }
    result.insert(f);
  }
  std::map<std::size_t, Index> per_layer;
  for (const FilterRef& f : result) ++per_layer[f.layer];
  for (const auto& [layer, count] : per_layer) {
    if (count >= sizes.at(layer)) {
      throw Error(ErrorCode::invalid_plan, "plan would remove every filter of layer " + std::to_string(layer),
                  "layer " + std::to_string(layer));
    }
  }
  PruningPlan out;
  out.node_id = plan.node_id;
  out.origin = PlanOrigin::manual_refined;
  out.filters.assign(result.begin(), result.end());
  out.requested = static_cast<Index>(out.filters.size());
  return out;
}

nlohmann::json to_json(const FilterRef& f) { return {{"layer", f.layer}, {"filter", f.filter}}; }

FilterRef filter_from_json(const nlohmann::json& j) {
  try {
    return {j.at("layer").get<std::size_t>(), j.at("filter").get<Index>()};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_argument, std::string("bad filter reference: ") + e.what());
  }
}

nlohmann::json to_json(const SensitivityProfile& profile) {
  nlohmann::json filters = nlohmann::json::array();
  for (std::size_t i = 0; i < profile.size(); ++i) {
    nlohmann::json ranks = nlohmann::json::array(), sens = nlohmann::json::array(), raw = nlohmann::json::array();
    for (const auto& r : profile.runs) {
      ranks.push_back(r.rank[i]);
      sens.push_back(r.sensitivity[i]);
      raw.push_back(r.raw[i]);
    }
    filters.push_back({{"layer", profile.filters[i].layer},
                       {"index", profile.filters[i].filter},
                       {"sensitivity", profile.mean_sensitivity[i]},
                       {"mean_rank", profile.mean_rank[i]},
                       {"instability", profile.instability[i]},
                       {"ranks", ranks},
                       {"run_sensitivity", sens},
                       {"run_raw", raw}});
  }
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : profile.runs) runs.push_back({{"run_index", r.run_index}, {"seed", r.seed}, {"examples", r.examples}});
  return {{"n", profile.runs.size()}, {"measure", to_string(profile.measure)}, {"runs", runs}, {"filters", filters}};
}

SensitivityProfile profile_from_json(const nlohmann::json& j) {
  try {
    const auto& runs_j = j.at("runs");
    std::vector<SensitivityRun> runs(runs_j.size());
    for (std::size_t r = 0; r < runs.size(); ++r) {
      runs[r].run_index = runs_j[r].at("run_index").get<std::size_t>();
      runs[r].seed = runs_j[r].at("seed").get<std::uint64_t>();
      runs[r].examples = runs_j[r].at("examples").get<Index>();
    }
    for (const auto& f : j.at("filters")) {
      const FilterRef ref{f.at("layer").get<std::size_t>(), f.at("index").get<Index>()};
      for (std::size_t r = 0; r < runs.size(); ++r) {
        runs[r].filters.push_back(ref);
        runs[r].rank.push_back(f.at("ranks").at(r).get<Index>());
        runs[r].sensitivity.push_back(f.at("run_sensitivity").at(r).get<double>());
        runs[r].raw.push_back(f.at("run_raw").at(r).get<double>());
      }
    }
    return aggregate_runs(std::move(runs), instability_measure_from_string(j.at("measure").get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_argument, std::string("bad profile JSON: ") + e.what());
  }
}

nlohmann::json to_json(const PruningPlan& plan) {
  nlohmann::json filters = nlohmann::json::array();
  for (const FilterRef& f : plan.filters) filters.push_back(to_json(f));
  nlohmann::json j = {{"filters", filters},
                      {"origin", to_string(plan.origin)},
                      {"requested", plan.requested},
                      {"shortfall", plan.shortfall}};
  j["node_id"] = plan.node_id ? nlohmann::json(*plan.node_id) : nlohmann::json(nullptr);
  return j;
}

PruningPlan plan_from_json(const nlohmann::json& j) {
  try {
    PruningPlan p;
    for (const auto& f : j.at("filters")) p.filters.push_back(filter_from_json(f));
    const std::size_t given = p.filters.size();
    sort_unique(p.filters);
    if (p.filters.size() != given) throw Error(ErrorCode::invalid_plan, "plan lists a filter twice");
    p.origin = plan_origin_from_string(j.value("origin", std::string("manual_refined")));
    p.requested = j.value("requested", static_cast<Index>(p.filters.size()));
    p.shortfall = j.value("shortfall", Index{0});
    if (j.contains("node_id") && !j["node_id"].is_null()) p.node_id = j["node_id"].get<std::int64_t>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_argument, std::string("bad plan JSON: ") + e.what());
  }
}

}  // namespace cnnp
