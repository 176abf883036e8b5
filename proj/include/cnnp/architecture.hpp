#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cnnp/tensor.hpp"

namespace cnnp {

enum class LayerKind { conv2d, maxpool2d, relu, flatten, linear };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

/// One layer of a sequential network. Only the fields relevant to `kind`
/// are meaningful.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // conv2d
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel_h = 0;
  Index kernel_w = 0;
  Index stride = 1;
  Index padding = 0;
  // maxpool2d
  Index window = 0;
  // linear
  Index in_features = 0;
  Index out_features = 0;

  static LayerSpec conv(Index in, Index out, Index kernel, Index stride = 1, Index padding = 0);
  static LayerSpec maxpool(Index window, Index stride);
  static LayerSpec relu();
  static LayerSpec flatten();
  static LayerSpec linear(Index in, Index out);

  bool has_parameters() const { return kind == LayerKind::conv2d || kind == LayerKind::linear; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct Architecture {
  Shape input_shape;  // [C, H, W]
  std::vector<LayerSpec> layers;
  std::vector<std::string> class_names;

  Index num_classes() const { return static_cast<Index>(class_names.size()); }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Per-example output shape of every layer, checking that the chain is
/// consistent from `input_shape` to `[num_classes]`. Throws
/// `invalid_architecture` naming the first offending layer.
std::vector<Shape> infer_shapes(const Architecture& arch);

/// Shape of the input to layer `i` (per example).
Shape layer_input_shape(const Architecture& arch, const std::vector<Shape>& outputs, std::size_t i);

std::vector<std::size_t> conv_layer_indices(const Architecture& arch);
Index total_filters(const Architecture& arch);

/// 1x28x28 -> conv3x3(32) -> relu -> pool2 -> conv3x3(64) -> relu -> pool2
/// -> flatten -> linear(1600, 10).
Architecture mnist_architecture();

/// Six 3x3 conv layers (64,128,256,256,512,512), ReLU after each, 2x2 pooling
/// after each pair, single linear head. Channel widths can be scaled down for
/// property experiments.
Architecture six_conv_architecture(Index channels, Index height, Index width,
                                   std::vector<std::string> class_names, double width_scale = 1.0);

nlohmann::json to_json(const LayerSpec& layer);
LayerSpec layer_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j);

}  // namespace cnnp
