#include "cnnp/model.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

#include "cnnp/datasets.hpp"
#include "cnnp/kernels.hpp"
#include "cnnp/rng.hpp"

namespace cnnp {
namespace {

std::uint64_t next_uid() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename Scalar>
void check_batch(const ModelState<Scalar>& model, const Tensor<Scalar>& batch) {
  const Shape& in = model.architecture().input_shape;
  if (batch.rank() != 4 || batch.dim(1) != in[0] || batch.dim(2) != in[1] || batch.dim(3) != in[2]) {
    throw Error(ErrorCode::shape_mismatch,
                "batch " + shape_string(batch.shape()) + " does not match model input [N," +
                    shape_string(in).substr(1),
                "input");
  }
}

/// Runs one layer forward. `argmax` receives pooling indices when non-null.
template <typename Scalar>
Tensor<Scalar> run_layer(const ModelState<Scalar>& model, std::size_t i, const Tensor<Scalar>& x,
                         std::vector<std::int32_t>* argmax) {
  const LayerSpec& l = model.architecture().layers[i];
  try {
    switch (l.kind) {
      case LayerKind::conv2d: {
        const auto& p = model.params(i);
        return conv2d(x, p.weights, p.bias, l.stride, l.padding);
      }
      case LayerKind::maxpool2d: {
        auto r = maxpool2d(x, l.window, l.stride);
        if (argmax) *argmax = std::move(r.argmax);
        return std::move(r.output);
      }
      case LayerKind::relu:
        return relu(x);
      case LayerKind::flatten:
        return x.reshaped({x.dim(0), x.size() / x.dim(0)});
      case LayerKind::linear: {
        const auto& p = model.params(i);
        return linear(x, p.weights, p.bias);
      }
    }
  } catch (const Error& e) {
    throw Error(e.code(), "layer " + std::to_string(i) + " (" + std::string(to_string(l.kind)) +
                              "): " + e.what(),
                "layer " + std::to_string(i));
  }
  throw Error(ErrorCode::invalid_architecture, "unknown layer kind");
}

}  // namespace

std::string to_string(const FilterRef& f) {
  return "L" + std::to_string(f.layer) + ":F" + std::to_string(f.filter);
}

Shape weight_shape(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv2d: return {l.out_channels, l.in_channels, l.kernel_h, l.kernel_w};
    case LayerKind::linear: return {l.out_features, l.in_features};
    default: return {};
  }
}

Shape bias_shape(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv2d: return {l.out_channels};
    case LayerKind::linear: return {l.out_features};
    default: return {};
  }
}

template <typename Scalar>
ModelState<Scalar>::ModelState(Architecture arch, std::uint64_t seed)
    : arch_(std::move(arch)), seed_(seed), uid_(next_uid()) {
  shapes_ = infer_shapes(arch_);
  if (conv_layer_indices(arch_).empty()) {
    throw Error(ErrorCode::invalid_architecture, "architecture needs at least one conv2d layer");
  }
  params_.resize(arch_.layers.size());
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    if (!arch_.layers[i].has_parameters()) continue;
    params_[i].weights = Tensor<Scalar>(weight_shape(arch_.layers[i]));
    params_[i].bias = Tensor<Scalar>(bias_shape(arch_.layers[i]));
  }
}

template <typename Scalar>
ModelState<Scalar>::ModelState(const ModelState& other)
    : arch_(other.arch_),
      shapes_(other.shapes_),
      params_(other.params_),
      seed_(other.seed_),
      uid_(next_uid()) {}

template <typename Scalar>
ModelState<Scalar>& ModelState<Scalar>::operator=(const ModelState& other) {
  if (this != &other) {
    arch_ = other.arch_;
    shapes_ = other.shapes_;
    params_ = other.params_;
    seed_ = other.seed_;
    uid_ = next_uid();
    revision_ = 0;
  }
  return *this;
}

template <typename Scalar>
LayerParams<Scalar>& ModelState<Scalar>::mutable_params(std::size_t layer) {
  ++revision_;
  return params_.at(layer);
}

template <typename Scalar>
void ModelState<Scalar>::set_params(std::size_t layer, LayerParams<Scalar> p) {
  const LayerSpec& l = arch_.layers.at(layer);
  if (p.weights.shape() != weight_shape(l) || p.bias.shape() != bias_shape(l)) {
    throw Error(ErrorCode::shape_mismatch,
                "layer " + std::to_string(layer) + ": parameters " + shape_string(p.weights.shape()) +
                    "/" + shape_string(p.bias.shape()) + " do not match spec " +
                    shape_string(weight_shape(l)) + "/" + shape_string(bias_shape(l)),
                "layer " + std::to_string(layer));
  }
  ++revision_;
  params_[layer] = std::move(p);
}

Model build_model(const Architecture& arch, std::uint64_t seed) {
  Model m(arch, seed);
  Rng rng(seed);
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    if (!l.has_parameters()) continue;
    const Index fan_in = l.kind == LayerKind::conv2d ? l.in_channels * l.kernel_h * l.kernel_w
                                                      : l.in_features;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    auto& p = m.mutable_params(i);
    for (float& w : p.weights.values()) w = static_cast<float>(rng.uniform(-bound, bound));
  }
  return m;
}

template <typename Scalar>
ForwardPass<Scalar> forward_pass(const ModelState<Scalar>& model, const Tensor<Scalar>& batch,
                                 std::optional<std::size_t> layer_count) {
  check_batch(model, batch);
  const std::size_t count = std::min(layer_count.value_or(model.layer_count()), model.layer_count());
  ForwardPass<Scalar> pass;
  auto& c = pass.cache;
  c.inputs.reserve(count);
  c.argmax.resize(count);
  c.model_uid = model.uid();
  c.model_revision = model.revision();
  Tensor<Scalar> x = batch;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor<Scalar> y = run_layer(model, i, x, &c.argmax[i]);
    c.inputs.push_back(std::move(x));
    x = std::move(y);
  }
  c.layers_run = count;
  pass.logits = std::move(x);
  return pass;
}

template <typename Scalar>
Tensor<Scalar> infer(const ModelState<Scalar>& model, const Tensor<Scalar>& batch) {
  check_batch(model, batch);
  Tensor<Scalar> x = batch;
  for (std::size_t i = 0; i < model.layer_count(); ++i) x = run_layer(model, i, x, nullptr);
  return x;
}

std::size_t feature_map_layer(const Architecture& arch, std::size_t conv_layer) {
  if (conv_layer >= arch.layers.size() || arch.layers[conv_layer].kind != LayerKind::conv2d) {
    throw Error(ErrorCode::invalid_argument, "layer " + std::to_string(conv_layer) + " is not conv2d");
  }
  const std::size_t next = conv_layer + 1;
  return next < arch.layers.size() && arch.layers[next].kind == LayerKind::relu ? next : conv_layer;
}

template <typename Scalar>
const Tensor<Scalar>& feature_map(const ForwardPass<Scalar>& pass, const Architecture& arch,
                                  std::size_t conv_layer) {
  const std::size_t k = feature_map_layer(arch, conv_layer);
  if (k + 1 < pass.cache.layers_run) return pass.cache.inputs[k + 1];
  if (k + 1 == pass.cache.layers_run) return pass.logits;
  throw Error(ErrorCode::invalid_argument, "forward pass stopped before layer " + std::to_string(k));
}

template <typename Scalar>
Gradients<Scalar> backward_pass(const ModelState<Scalar>& model, const ForwardCache<Scalar>& cache,
                                const Tensor<Scalar>& grad_output, const BackwardOptions& options) {
  if (cache.model_uid != model.uid() || cache.model_revision != model.revision()) {
    throw Error(ErrorCode::stale_cache, "forward cache was produced by a different model state");
  }
  const Architecture& arch = model.architecture();
  Gradients<Scalar> g;
  g.params.resize(model.layer_count());
  g.feature_maps.resize(model.layer_count());

  std::vector<std::ptrdiff_t> conv_of_fm(model.layer_count(), -1);
  for (std::size_t l : conv_layer_indices(arch)) {
    conv_of_fm[feature_map_layer(arch, l)] = static_cast<std::ptrdiff_t>(l);
  }

  Tensor<Scalar> grad = grad_output;
  for (std::size_t k = cache.layers_run; k-- > 0;) {
    if (conv_of_fm[k] >= 0) g.feature_maps[static_cast<std::size_t>(conv_of_fm[k])] = grad;
    const LayerSpec& l = arch.layers[k];
    const Tensor<Scalar>& x = cache.inputs[k];
    const bool need_input = k > 0 || options.input_grad;
    switch (l.kind) {
      case LayerKind::conv2d: {
        auto cg = conv2d_backward(x, model.params(k).weights, l.stride, l.padding, grad, need_input);
        if (options.param_grads) g.params[k] = {std::move(cg.weights), std::move(cg.bias)};
        grad = std::move(cg.input);
        break;
      }
      case LayerKind::maxpool2d:
        grad = maxpool2d_backward(x.shape(), cache.argmax[k], grad);
        break;
      case LayerKind::relu:
        grad = options.guided_relu ? guided_relu_backward(x, grad) : relu_backward(x, grad);
        break;
      case LayerKind::flatten:
        grad = grad.reshaped(x.shape());
        break;
      case LayerKind::linear: {
        auto lg = linear_backward(x, model.params(k).weights, grad);
        if (options.param_grads) g.params[k] = {std::move(lg.weights), std::move(lg.bias)};
        grad = std::move(lg.input);
        break;
      }
    }
  }
  if (options.input_grad) g.input = std::move(grad);
  return g;
}

template <typename Scalar>
static std::vector<int> argmax_rows_impl(const Tensor<Scalar>& logits) {
  const Index n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index j = 1; j < c; ++j) {
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> argmax_rows(const Tensorf& logits) { return argmax_rows_impl(logits); }
std::vector<int> argmax_rows(const Tensord& logits) { return argmax_rows_impl(logits); }

std::vector<int> predict(const Model& model, const Tensorf& batch) { return argmax_rows(infer(model, batch)); }

std::vector<int> predict_dataset(const Model& model, const Dataset& data, Index chunk) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(data.size()));
  for (Index begin = 0; begin < data.size(); begin += chunk) {
    const Batch b = slice(data, begin, std::min(data.size(), begin + chunk));
    const auto p = predict(model, b.images);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Evaluation evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                Index num_classes) {
  if (labels.empty()) throw Error(ErrorCode::empty_dataset, "cannot evaluate on an empty dataset");
  if (predictions.size() != labels.size()) {
    throw Error(ErrorCode::shape_mismatch, "prediction and label counts differ");
  }
  Evaluation e;
  e.class_correct.assign(static_cast<std::size_t>(num_classes), 0);
  e.class_total.assign(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    ++e.class_total.at(c);
    if (predictions[i] == labels[i]) {
      ++e.class_correct[c];
      ++e.correct;
    }
  }
  e.total = static_cast<std::int64_t>(labels.size());
  e.accuracy = static_cast<double>(e.correct) / static_cast<double>(e.total);
  e.predictions.assign(predictions.begin(), predictions.end());
  return e;
}

Evaluation evaluate(const Model& model, const Dataset& data) {
  if (data.size() == 0) throw Error(ErrorCode::empty_dataset, "cannot evaluate on an empty dataset");
  const auto preds = predict_dataset(model, data);
  return evaluate_predictions(preds, data.labels, std::max(data.num_classes(), model.architecture().num_classes()));
}

double dataset_loss(const Model& model, const Dataset& data, Index chunk) {
  if (data.size() == 0) throw Error(ErrorCode::empty_dataset, "cannot evaluate on an empty dataset");
  double total = 0.0;
  for (Index begin = 0; begin < data.size(); begin += chunk) {
    const Batch b = slice(data, begin, std::min(data.size(), begin + chunk));
    const auto r = softmax_cross_entropy(infer(model, b.images), b.labels);
    for (double l : r.per_example) total += l;
  }
  return total / static_cast<double>(data.size());
}

std::int64_t count_params(const Architecture& arch) {
  std::int64_t n = 0;
  for (const auto& l : arch.layers) {
    if (l.kind == LayerKind::conv2d) n += l.out_channels * (l.in_channels * l.kernel_h * l.kernel_w + 1);
    if (l.kind == LayerKind::linear) n += l.out_features * (l.in_features + 1);
  }
  return n;
}

std::int64_t count_flops(const Architecture& arch) {
  const auto shapes = infer_shapes(arch);
  std::int64_t n = 0;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    const Index outputs = shape_size(shapes[i]);
    switch (l.kind) {
      case LayerKind::conv2d:
        n += 2 * l.in_channels * l.kernel_h * l.kernel_w * outputs + outputs;
        break;
      case LayerKind::linear:
        n += 2 * l.in_features * l.out_features + l.out_features;
        break;
      case LayerKind::relu:
      case LayerKind::maxpool2d:
        n += outputs;
        break;
      case LayerKind::flatten:
        break;
    }
  }
  return n;
}

template <typename Scalar>
bool bit_identical(const ModelState<Scalar>& a, const ModelState<Scalar>& b) {
  if (!(a.architecture() == b.architecture())) return false;
  auto same = [](const Tensor<Scalar>& x, const Tensor<Scalar>& y) {
    return x.shape() == y.shape() &&
           std::memcmp(x.data(), y.data(), static_cast<std::size_t>(x.size()) * sizeof(Scalar)) == 0;
  };
  for (std::size_t i = 0; i < a.layer_count(); ++i) {
    if (!same(a.params(i).weights, b.params(i).weights) || !same(a.params(i).bias, b.params(i).bias)) {
      return false;
    }
  }
  return true;
}

#define CNNP_INSTANTIATE_MODEL(S)                                                                  \
  template class ModelState<S>;                                                                    \
  template ForwardPass<S> forward_pass(const ModelState<S>&, const Tensor<S>&,                     \
                                       std::optional<std::size_t>);                                \
  template Tensor<S> infer(const ModelState<S>&, const Tensor<S>&);                               \
  template const Tensor<S>& feature_map(const ForwardPass<S>&, const Architecture&, std::size_t); \
  template Gradients<S> backward_pass(const ModelState<S>&, const ForwardCache<S>&,                \
                                      const Tensor<S>&, const BackwardOptions&);                   \
  template bool bit_identical(const ModelState<S>&, const ModelState<S>&);

CNNP_INSTANTIATE_MODEL(float)
CNNP_INSTANTIATE_MODEL(double)

}  // namespace cnnp
