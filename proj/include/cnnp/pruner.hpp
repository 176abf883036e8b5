#pragma once

#include <string>
#include <vector>

#include "cnnp/criteria.hpp"
#include "cnnp/model.hpp"

namespace cnnp {

enum class ViolationKind { missing_filter, duplicate, layer_emptied };

std::string_view to_string(ViolationKind k);

struct PlanViolation {
  ViolationKind kind;
  FilterRef filter;  // offending filter (layer only for layer_emptied)
  std::string message;
};

/// Existence, duplicate and layer-survival checks. Never throws.
std::vector<PlanViolation> validate_plan(const Architecture& arch, const PruningPlan& plan);

/// Removed fraction of each conv layer's filters, in layer order.
std::vector<std::pair<std::size_t, double>> plan_layer_fractions(const Architecture& arch, const PruningPlan& plan);

/// Removes the plan's filters and the matching input slices of the next
/// parametric layer (conv input channels, or the linear columns of the
/// channel in [C,H,W] flatten order). Surviving parameters are copied
/// bit-exactly. Throws invalid_plan when validation fails.
template <typename Scalar>
ModelState<Scalar> apply_plan(const ModelState<Scalar>& model, const PruningPlan& plan);

}  // namespace cnnp
