#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "cnnp/datasets.hpp"
#include "cnnp/model.hpp"

namespace cnnp {

/// Every conv filter of `arch` in (layer, filter) order.
std::vector<FilterRef> all_filters(const Architecture& arch);

/// One pass of the first-order Taylor criterion over a sampled data subset.
/// Vectors are indexed like `filters`.
struct SensitivityRun {
  std::size_t run_index = 0;
  std::uint64_t seed = 0;
  Index examples = 0;
  std::vector<FilterRef> filters;
  std::vector<double> raw;
  std::vector<double> sensitivity;  // raw divided by its layer's L2 norm
  std::vector<Index> rank;          // 0 = least sensitive
};

enum class InstabilityMeasure { mean_absolute_deviation, variance };

std::string_view to_string(InstabilityMeasure m);
InstabilityMeasure instability_measure_from_string(std::string_view name);

struct SensitivityProfile {
  std::vector<FilterRef> filters;
  std::vector<SensitivityRun> runs;
  std::vector<double> mean_sensitivity;
  std::vector<double> mean_rank;
  std::vector<double> instability;
  InstabilityMeasure measure = InstabilityMeasure::mean_absolute_deviation;

  std::size_t size() const { return filters.size(); }
  std::size_t index_of(const FilterRef& f) const;
  /// Filters per conv layer, keyed by layer index in ascending order.
  std::vector<std::pair<std::size_t, Index>> layer_sizes() const;
};

struct SensitivityOptions {
  Index num_batches = 10;
  Index batch_size = 100;
};

/// Raw score of filter c: mean over examples n of |mean over (h,w) of
/// dl_n/df * f| where f is the filter's (post-ReLU) feature map and l_n the
/// example's loss. Parameters are not modified.
SensitivityRun sensitivity_run(const Model& model, const Dataset& data, const SensitivityOptions& options,
                               std::uint64_t seed);

/// Normalizes raw scores per layer and assigns global ranks.
void finalize_run(SensitivityRun& run);

/// Runs with seeds base_seed + i, i < runs.
SensitivityProfile build_profile(const Model& model, const Dataset& data, std::size_t runs,
                                 const SensitivityOptions& options, std::uint64_t base_seed,
                                 InstabilityMeasure measure = InstabilityMeasure::mean_absolute_deviation);

/// Aggregates finished runs (means and instability).
SensitivityProfile aggregate_runs(std::vector<SensitivityRun> runs,
                                  InstabilityMeasure measure = InstabilityMeasure::mean_absolute_deviation);

/// Instability of one filter from its per-run ranks.
double rank_instability(std::span<const double> ranks, InstabilityMeasure measure);

enum class PlanOrigin { threshold, auto_ratio, manual_refined };

std::string_view to_string(PlanOrigin o);
PlanOrigin plan_origin_from_string(std::string_view name);

struct PruningPlan {
  std::optional<std::int64_t> node_id;
  std::vector<FilterRef> filters;  // sorted, unique
  PlanOrigin origin = PlanOrigin::threshold;
  Index requested = 0;
  Index shortfall = 0;  // requested filters spared to keep every layer alive

  std::size_t size() const { return filters.size(); }
  bool contains(const FilterRef& f) const;
};

/// Filters ordered for removal: mean sensitivity ascending, instability
/// descending, then layer and filter index.
std::vector<std::size_t> removal_order(const SensitivityProfile& profile);

/// The `count` first filters of `removal_order`, sparing the most sensitive
/// victim of any layer that would otherwise be emptied.
PruningPlan plan_from_threshold(const SensitivityProfile& profile, Index count,
                                PlanOrigin origin = PlanOrigin::threshold);
/// count = llround(fraction * total filters).
PruningPlan plan_from_fraction(const SensitivityProfile& profile, double fraction,
                               PlanOrigin origin = PlanOrigin::threshold);

struct PlanImpact {
  double remaining_filters_pct = 100.0;
  double remaining_sensitivity_pct = 100.0;
  double remaining_instability_pct = 100.0;
};

PlanImpact plan_impact(const SensitivityProfile& profile, const PruningPlan& plan);

/// Applies `remove` then `add`; the result must leave every conv layer of
/// `arch` with at least one filter.
PruningPlan refine_plan(const Architecture& arch, const PruningPlan& plan, std::span<const FilterRef> add,
                        std::span<const FilterRef> remove);

nlohmann::json to_json(const SensitivityProfile& profile);
SensitivityProfile profile_from_json(const nlohmann::json& j);

nlohmann::json to_json(const PruningPlan& plan);
PruningPlan plan_from_json(const nlohmann::json& j);

nlohmann::json to_json(const FilterRef& f);
FilterRef filter_from_json(const nlohmann::json& j);

}  // namespace cnnp
