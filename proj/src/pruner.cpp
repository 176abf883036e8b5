#include "cnnp/pruner.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

namespace cnnp {
namespace {

std::vector<Index> iota_indices(Index n) {
  std::vector<Index> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), Index{0});
  return v;
}

/// Conv layer whose channels feed parametric layer `i`, if any.
std::optional<std::size_t> producing_conv(const Architecture& arch, std::size_t i) {
  for (std::size_t k = i; k-- > 0;) {
    switch (arch.layers[k].kind) {
      case LayerKind::conv2d: return k;
      case LayerKind::linear: return std::nullopt;
      default: break;
    }
  }
  return std::nullopt;
}

/// Next parametric layer after conv `l`.
std::optional<std::size_t> consumer_of(const Architecture& arch, std::size_t l) {
  for (std::size_t k = l + 1; k < arch.layers.size(); ++k) {
    if (arch.layers[k].has_parameters()) return k;
  }
  return std::nullopt;
}

}  // namespace

std::string_view to_string(ViolationKind k) {
  switch (k) {
    case ViolationKind::missing_filter: return "missing";
    case ViolationKind::duplicate: return "duplicate";
    case ViolationKind::layer_emptied: return "layer emptied";
  }
  return "missing";
}

std::vector<PlanViolation> validate_plan(const Architecture& arch, const PruningPlan& plan) {
  std::vector<PlanViolation> out;
  std::map<std::size_t, Index> sizes;
  for (std::size_t l : conv_layer_indices(arch)) sizes[l] = arch.layers[l].out_channels;
  std::set<FilterRef> seen;
  std::map<std::size_t, Index> removed;
  for (const FilterRef& f : plan.filters) {
    const auto it = sizes.find(f.layer);
    if (it == sizes.end() || f.filter < 0 || f.filter >= it->second) {
      out.push_back({ViolationKind::missing_filter, f, "model has no filter " + to_string(f)});
      continue;
    }
    if (!seen.insert(f).second) {
      out.push_back({ViolationKind::duplicate, f, "filter " + to_string(f) + " listed more than once"});
      continue;
    }
    ++removed[f.layer];
  }
  for (const auto& [layer, count] : removed) {
    if (count >= sizes[layer]) {
      out.push_back({ViolationKind::layer_emptied, {layer, 0},
                     "plan removes all " + std::to_string(sizes[layer]) + " filters of layer " + std::to_string(layer)});
    }
  }
  return out;
}

std::vector<std::pair<std::size_t, double>> plan_layer_fractions(const Architecture& arch, const PruningPlan& plan) {
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t l : conv_layer_indices(arch)) {
    const auto n = std::count_if(plan.filters.begin(), plan.filters.end(), [&](const FilterRef& f) { return f.layer == l; });
    out.emplace_back(l, static_cast<double>(n) / static_cast<double>(arch.layers[l].out_channels));
  }
  return out;
}

template <typename Scalar>
ModelState<Scalar> apply_plan(const ModelState<Scalar>& model, const PruningPlan& plan) {
  const Architecture& arch = model.architecture();
  const auto violations = validate_plan(arch, plan);
  if (!violations.empty()) {
    std::string msg = "invalid pruning plan:";
    for (const auto& v : violations) msg += " " + v.message + ";";
    throw Error(ErrorCode::invalid_plan, msg, std::string(to_string(violations.front().kind)));
  }
  if (plan.filters.empty()) return model;

  std::map<std::size_t, std::vector<Index>> keep;
  for (std::size_t l : conv_layer_indices(arch)) {
    std::vector<Index> k;
    for (Index f = 0; f < arch.layers[l].out_channels; ++f) {
      if (!plan.contains({l, f})) k.push_back(f);
    }
    keep[l] = std::move(k);
  }

  Architecture next = arch;
  for (auto& [l, kept] : keep) {
    if (static_cast<Index>(kept.size()) == arch.layers[l].out_channels) continue;
    const auto consumer = consumer_of(arch, l);
    if (!consumer) {
      throw Error(ErrorCode::invalid_plan, "layer " + std::to_string(l) + " has no downstream parametric layer");
    }
    next.layers[l].out_channels = static_cast<Index>(kept.size());
    LayerSpec& c = next.layers[*consumer];
    if (c.kind == LayerKind::conv2d) {
      c.in_channels = static_cast<Index>(kept.size());
    } else {
      const Index per_channel = arch.layers[*consumer].in_features / arch.layers[l].out_channels;
      c.in_features = static_cast<Index>(kept.size()) * per_channel;
    }
  }

  ModelState<Scalar> out(next, model.seed());
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    if (!l.has_parameters()) continue;
    const LayerParams<Scalar>& src = model.params(i);
    const std::vector<Index> rows = l.kind == LayerKind::conv2d ? keep[i] : iota_indices(l.out_features);

    // Input columns that survive, expanded to weight-matrix columns.
    const Index in_units = l.kind == LayerKind::conv2d ? l.in_channels : l.in_features;
    const Index unit_cols = l.kind == LayerKind::conv2d ? l.kernel_h * l.kernel_w : 1;
    std::vector<Index> cols;
    const auto prod = producing_conv(arch, i);
    if (prod) {
      const Index channels = arch.layers[*prod].out_channels;
      const Index per_channel = in_units / channels;  // spatial positions per channel after flatten
      for (Index ch : keep[*prod])
        for (Index k = 0; k < per_channel * unit_cols; ++k) cols.push_back(ch * per_channel * unit_cols + k);
    } else {
      cols = iota_indices(in_units * unit_cols);
    }

    const Index src_cols = in_units * unit_cols;
    const auto w = src.weights.matrix(src.weights.dim(0), src_cols);
    LayerParams<Scalar> p{Tensor<Scalar>(weight_shape(next.layers[i])), Tensor<Scalar>(bias_shape(next.layers[i]))};
    auto dst = p.weights.matrix(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < cols.size(); ++c) dst(static_cast<Index>(r), static_cast<Index>(c)) = w(rows[r], cols[c]);
      p.bias[static_cast<Index>(r)] = src.bias[rows[r]];
    }
    out.set_params(i, std::move(p));
  }
  return out;
}

template ModelState<float> apply_plan(const ModelState<float>&, const PruningPlan&);
template ModelState<double> apply_plan(const ModelState<double>&, const PruningPlan&);

}  // namespace cnnp
