#include "cnnp/optimizer.hpp"

#include <cmath>

namespace cnnp {
namespace {

template <typename Scalar>
void adam_update(Tensor<Scalar>& p, const Tensor<Scalar>& g, Tensor<Scalar>& m, Tensor<Scalar>& v,
                 const OptimizerState<Scalar>& s, double step_size, double bias2) {
  const auto b1 = static_cast<Scalar>(s.beta1);
  const auto b2 = static_cast<Scalar>(s.beta2);
  m.vec() = b1 * m.vec() + (Scalar(1) - b1) * g.vec();
  v.vec() = b2 * v.vec() + (Scalar(1) - b2) * g.vec().cwiseAbs2();
  // p -= lr * m_hat / (sqrt(v_hat) + eps), folded into one expression.
  const auto denom = (v.vec().array() / static_cast<Scalar>(bias2)).sqrt() + static_cast<Scalar>(s.epsilon);
  p.vec().array() -= static_cast<Scalar>(step_size) * m.vec().array() / denom;
}

}  // namespace

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_kind_from_string(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw Error(ErrorCode::invalid_argument, "unknown optimizer '" + std::string(name) + "'");
}

template <typename Scalar>
void optimizer_step(OptimizerState<Scalar>& state, ModelState<Scalar>& model,
                    const std::vector<LayerParams<Scalar>>& grads) {
  if (grads.size() != model.layer_count()) {
    throw Error(ErrorCode::shape_mismatch, "gradient list does not match model layer count");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!model.architecture().layers[i].has_parameters()) continue;
    if (grads[i].weights.shape() != model.params(i).weights.shape() ||
        grads[i].bias.shape() != model.params(i).bias.shape()) {
      throw Error(ErrorCode::shape_mismatch, "layer " + std::to_string(i) + ": gradient shape " +
                                                 shape_string(grads[i].weights.shape()) +
                                                 " does not match parameter shape " +
                                                 shape_string(model.params(i).weights.shape()),
                  "layer " + std::to_string(i));
    }
  }

  ++state.step;
  if (state.kind == OptimizerKind::sgd) {
    const auto lr = static_cast<Scalar>(state.learning_rate);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!model.architecture().layers[i].has_parameters()) continue;
      auto& p = model.mutable_params(i);
      p.weights.vec() -= lr * grads[i].weights.vec();
      p.bias.vec() -= lr * grads[i].bias.vec();
    }
    return;
  }

  if (state.first_moment.size() != grads.size()) {
    state.first_moment.assign(grads.size(), {});
    state.second_moment.assign(grads.size(), {});
  }
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(state.beta1, t);
  const double bias2 = 1.0 - std::pow(state.beta2, t);
  const double step_size = state.learning_rate / bias1;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!model.architecture().layers[i].has_parameters()) continue;
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.weights.shape() != grads[i].weights.shape()) {
      m = {Tensor<Scalar>(grads[i].weights.shape()), Tensor<Scalar>(grads[i].bias.shape())};
      v = m;
    }
    auto& p = model.mutable_params(i);
    adam_update(p.weights, grads[i].weights, m.weights, v.weights, state, step_size, bias2);
    adam_update(p.bias, grads[i].bias, m.bias, v.bias, state, step_size, bias2);
  }
}

template void optimizer_step(OptimizerState<float>&, ModelState<float>&,
                             const std::vector<LayerParams<float>>&);
template void optimizer_step(OptimizerState<double>&, ModelState<double>&,
                             const std::vector<LayerParams<double>>&);

}  // namespace cnnp
