#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "cnnp/model.hpp"

namespace cnnp {

enum class OptimizerKind { sgd, adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(std::string_view name);

template <typename Scalar>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  // Adam moments, lazily shaped like the parameters on the first step.
  std::vector<LayerParams<Scalar>> first_moment;
  std::vector<LayerParams<Scalar>> second_moment;
};

/// SGD: p -= lr * g. Adam: bias-corrected moment update. Increments `step`.
template <typename Scalar>
void optimizer_step(OptimizerState<Scalar>& state, ModelState<Scalar>& model,
                    const std::vector<LayerParams<Scalar>>& grads);

}  // namespace cnnp
