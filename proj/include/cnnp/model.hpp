#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cnnp/architecture.hpp"
#include "cnnp/tensor.hpp"

namespace cnnp {

struct Dataset;

/// One convolutional filter: output channel `filter` of conv layer `layer`.
struct FilterRef {
  std::size_t layer = 0;
  Index filter = 0;

  friend auto operator<=>(const FilterRef&, const FilterRef&) = default;
};

std::string to_string(const FilterRef& f);

template <typename Scalar>
struct LayerParams {
  Tensor<Scalar> weights;  // conv [out][in][kh][kw], linear [out][in]
  Tensor<Scalar> bias;     // [out]

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Architecture plus every learned parameter. Mutable access goes through
/// `mutable_params`, which bumps `revision()` so forward caches taken earlier
/// are rejected by `backward_pass`.
template <typename Scalar>
class ModelState {
 public:
  ModelState() = default;
  /// Zero-initialized parameters. Throws if the architecture is inconsistent.
  explicit ModelState(Architecture arch, std::uint64_t seed = 0);

  ModelState(const ModelState& other);
  ModelState& operator=(const ModelState& other);
  ModelState(ModelState&&) noexcept = default;
  ModelState& operator=(ModelState&&) noexcept = default;

  const Architecture& architecture() const noexcept { return arch_; }
  const std::vector<Shape>& output_shapes() const noexcept { return shapes_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t layer_count() const noexcept { return arch_.layers.size(); }

  const LayerParams<Scalar>& params(std::size_t layer) const { return params_.at(layer); }
  LayerParams<Scalar>& mutable_params(std::size_t layer);
  std::span<const LayerParams<Scalar>> parameters() const noexcept { return params_; }
  /// Replace one layer's parameters; shapes must match the layer spec.
  void set_params(std::size_t layer, LayerParams<Scalar> p);

  std::uint64_t uid() const noexcept { return uid_; }
  std::uint64_t revision() const noexcept { return revision_; }

  template <typename To>
  ModelState<To> cast() const {
    ModelState<To> out(arch_, seed_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!arch_.layers[i].has_parameters()) continue;
      out.set_params(i, {params_[i].weights.template cast<To>(), params_[i].bias.template cast<To>()});
    }
    return out;
  }

 private:
  Architecture arch_;
  std::vector<Shape> shapes_;
  std::vector<LayerParams<Scalar>> params_;
  std::uint64_t seed_ = 0;
  std::uint64_t uid_ = 0;
  std::uint64_t revision_ = 0;
};

using Model = ModelState<float>;

/// Expected parameter shapes for a layer (empty tensors for non-parametric layers).
Shape weight_shape(const LayerSpec& layer);
Shape bias_shape(const LayerSpec& layer);

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
Model build_model(const Architecture& arch, std::uint64_t seed);

template <typename Scalar>
struct ForwardCache {
  std::vector<Tensor<Scalar>> inputs;               // input to each executed layer
  std::vector<std::vector<std::int32_t>> argmax;    // maxpool layers only
  std::size_t layers_run = 0;
  std::uint64_t model_uid = 0;
  std::uint64_t model_revision = 0;
};

template <typename Scalar>
struct ForwardPass {
  Tensor<Scalar> logits;  // output of the last executed layer
  ForwardCache<Scalar> cache;
};

/// Runs layers [0, layer_count) (all by default) and keeps every layer input.
template <typename Scalar>
ForwardPass<Scalar> forward_pass(const ModelState<Scalar>& model, const Tensor<Scalar>& batch,
                                 std::optional<std::size_t> layer_count = std::nullopt);

/// Logits only, without retaining activations.
template <typename Scalar>
Tensor<Scalar> infer(const ModelState<Scalar>& model, const Tensor<Scalar>& batch);

/// Layer whose output is the feature map of conv layer `conv_layer`: the
/// following ReLU when present, else the conv itself.
std::size_t feature_map_layer(const Architecture& arch, std::size_t conv_layer);

template <typename Scalar>
const Tensor<Scalar>& feature_map(const ForwardPass<Scalar>& pass, const Architecture& arch,
                                  std::size_t conv_layer);

template <typename Scalar>
struct Gradients {
  std::vector<LayerParams<Scalar>> params;        // empty tensors for non-parametric layers
  std::vector<Tensor<Scalar>> feature_maps;       // dL/d(feature map), conv layers only
  Tensor<Scalar> input;                           // dL/d(batch), when requested
};

struct BackwardOptions {
  bool param_grads = true;
  bool input_grad = false;
  bool guided_relu = false;
};

/// Backpropagates `grad_output` (gradient of the output of the last layer the
/// cache ran) down to the input.
template <typename Scalar>
Gradients<Scalar> backward_pass(const ModelState<Scalar>& model, const ForwardCache<Scalar>& cache,
                                const Tensor<Scalar>& grad_output, const BackwardOptions& options = {});

std::vector<int> argmax_rows(const Tensorf& logits);
std::vector<int> argmax_rows(const Tensord& logits);

std::vector<int> predict(const Model& model, const Tensorf& batch);

/// Predictions for every example of `data`, evaluated in fixed-size chunks.
std::vector<int> predict_dataset(const Model& model, const Dataset& data, Index chunk = 500);

struct Evaluation {
  double accuracy = 0.0;
  std::int64_t correct = 0;
  std::int64_t total = 0;
  std::vector<std::int64_t> class_correct;
  std::vector<std::int64_t> class_total;
  std::vector<int> predictions;
};

Evaluation evaluate(const Model& model, const Dataset& data);
Evaluation evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                Index num_classes);

/// Mean softmax cross-entropy of the model over `data`.
double dataset_loss(const Model& model, const Dataset& data, Index chunk = 500);

std::int64_t count_params(const Architecture& arch);
std::int64_t count_flops(const Architecture& arch);
inline std::int64_t count_params(const Model& m) { return count_params(m.architecture()); }
inline std::int64_t count_flops(const Model& m) { return count_flops(m.architecture()); }

/// Byte-level parameter equality (distinguishes -0.0 from 0.0).
template <typename Scalar>
bool bit_identical(const ModelState<Scalar>& a, const ModelState<Scalar>& b);

}  // namespace cnnp
