#include "cnnp/architecture.hpp"

#include <cmath>

namespace cnnp {
namespace {

[[noreturn]] void arch_error(std::size_t layer, const std::string& what) {
  throw Error(ErrorCode::invalid_architecture,
              "layer " + std::to_string(layer) + ": " + what, "layer " + std::to_string(layer));
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::maxpool2d, LayerKind::relu, LayerKind::flatten,
                      LayerKind::linear}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorCode::invalid_architecture, "unknown layer kind '" + std::string(name) + "'");
}

LayerSpec LayerSpec::conv(Index in, Index out, Index kernel, Index stride, Index padding) {
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.in_channels = in;
  l.out_channels = out;
  l.kernel_h = l.kernel_w = kernel;
  l.stride = stride;
  l.padding = padding;
  return l;
}

LayerSpec LayerSpec::maxpool(Index window, Index stride) {
  LayerSpec l;
  l.kind = LayerKind::maxpool2d;
  l.window = window;
  l.stride = stride;
  return l;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  return l;
}

LayerSpec LayerSpec::linear(Index in, Index out) {
  LayerSpec l;
  l.kind = LayerKind::linear;
  l.in_features = in;
  l.out_features = out;
  return l;
}

std::vector<Shape> infer_shapes(const Architecture& arch) {
  if (arch.input_shape.size() != 3) {
    throw Error(ErrorCode::invalid_architecture,
                "input_shape must be [C,H,W], got " + shape_string(arch.input_shape));
  }
  for (Index d : arch.input_shape) {
    if (d <= 0) {
      throw Error(ErrorCode::invalid_architecture,
                  "input_shape dimensions must be positive: " + shape_string(arch.input_shape));
    }
  }
  if (arch.class_names.empty()) {
    throw Error(ErrorCode::invalid_architecture, "architecture has no classes");
  }

  std::vector<Shape> out;
  out.reserve(arch.layers.size());
  Shape cur = arch.input_shape;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    switch (l.kind) {
      case LayerKind::conv2d: {
        if (cur.size() != 3) arch_error(i, "conv2d needs a [C,H,W] input, got " + shape_string(cur));
        if (l.in_channels < 1 || l.out_channels < 1) arch_error(i, "channel counts must be >= 1");
        if (l.kernel_h < 1 || l.kernel_w < 1) arch_error(i, "kernel must be >= 1");
        if (l.stride < 1) arch_error(i, "stride must be >= 1");
        if (l.padding < 0) arch_error(i, "padding must be >= 0");
        if (l.in_channels != cur[0]) {
          arch_error(i, "in_channels " + std::to_string(l.in_channels) + " but input has " +
                            std::to_string(cur[0]) + " channels");
        }
        const Index sh = cur[1] + 2 * l.padding - l.kernel_h;
        const Index sw = cur[2] + 2 * l.padding - l.kernel_w;
        if (sh < 0 || sw < 0) arch_error(i, "kernel larger than padded input " + shape_string(cur));
        if (sh % l.stride != 0 || sw % l.stride != 0) {
          arch_error(i, "stride does not tile padded input " + shape_string(cur));
        }
        cur = {l.out_channels, sh / l.stride + 1, sw / l.stride + 1};
        break;
      }
      case LayerKind::maxpool2d: {
        if (cur.size() != 3) arch_error(i, "maxpool2d needs a [C,H,W] input, got " + shape_string(cur));
        if (l.window < 1 || l.stride < 1) arch_error(i, "window and stride must be >= 1");
        if (l.window > cur[1] || l.window > cur[2]) arch_error(i, "window larger than input");
        cur = {cur[0], (cur[1] - l.window) / l.stride + 1, (cur[2] - l.window) / l.stride + 1};
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::flatten:
        cur = {shape_size(cur)};
        break;
      case LayerKind::linear: {
        if (cur.size() != 1) arch_error(i, "linear needs a flat input, got " + shape_string(cur));
        if (l.in_features < 1 || l.out_features < 1) arch_error(i, "feature counts must be >= 1");
        if (l.in_features != cur[0]) {
          arch_error(i, "in_features " + std::to_string(l.in_features) + " but input has " +
                            std::to_string(cur[0]) + " features");
        }
        cur = {l.out_features};
        break;
      }
    }
    out.push_back(cur);
  }
  if (cur != Shape{arch.num_classes()}) {
    throw Error(ErrorCode::invalid_architecture,
                "network output " + shape_string(cur) + " does not match " +
                    std::to_string(arch.num_classes()) + " classes",
                "layer " + std::to_string(arch.layers.size() - 1));
  }
  return out;
}

Shape layer_input_shape(const Architecture& arch, const std::vector<Shape>& outputs, std::size_t i) {
  return i == 0 ? arch.input_shape : outputs[i - 1];
}

std::vector<std::size_t> conv_layer_indices(const Architecture& arch) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    if (arch.layers[i].kind == LayerKind::conv2d) idx.push_back(i);
  }
  return idx;
}

Index total_filters(const Architecture& arch) {
  Index n = 0;
  for (const auto& l : arch.layers) {
    if (l.kind == LayerKind::conv2d) n += l.out_channels;
  }
  return n;
}

Architecture mnist_architecture() {
  Architecture a;
  a.input_shape = {1, 28, 28};
  a.layers = {LayerSpec::conv(1, 32, 3),  LayerSpec::relu(), LayerSpec::maxpool(2, 2),
              LayerSpec::conv(32, 64, 3), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
              LayerSpec::flatten(),       LayerSpec::linear(1600, 10)};
  for (int d = 0; d < 10; ++d) a.class_names.push_back(std::to_string(d));
  return a;
}

Architecture six_conv_architecture(Index channels, Index height, Index width,
                                   std::vector<std::string> class_names, double width_scale) {
  static constexpr Index kWidths[] = {64, 128, 256, 256, 512, 512};
  Architecture a;
  a.input_shape = {channels, height, width};
  a.class_names = std::move(class_names);
  Index in = channels, h = height, w = width;
  for (int i = 0; i < 6; ++i) {
    const Index out = std::max<Index>(1, static_cast<Index>(std::lround(kWidths[i] * width_scale)));
    a.layers.push_back(LayerSpec::conv(in, out, 3, 1, 1));
    a.layers.push_back(LayerSpec::relu());
    if (i % 2 == 1) {
      a.layers.push_back(LayerSpec::maxpool(2, 2));
      h = (h - 2) / 2 + 1;
      w = (w - 2) / 2 + 1;
    }
    in = out;
  }
  a.layers.push_back(LayerSpec::flatten());
  a.layers.push_back(LayerSpec::linear(in * h * w, a.num_classes()));
  return a;
}

nlohmann::json to_json(const LayerSpec& l) {
  nlohmann::json j{{"kind", to_string(l.kind)}};
  switch (l.kind) {
    case LayerKind::conv2d:
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["kernel_h"] = l.kernel_h;
      j["kernel_w"] = l.kernel_w;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      break;
    case LayerKind::maxpool2d:
      j["window"] = l.window;
      j["stride"] = l.stride;
      break;
    case LayerKind::linear:
      j["in_features"] = l.in_features;
      j["out_features"] = l.out_features;
      break;
    case LayerKind::flatten:
      j["order"] = "CHW";
      break;
    case LayerKind::relu:
      break;
  }
  return j;
}

LayerSpec layer_from_json(const nlohmann::json& j) {
  try {
    LayerSpec l;
    l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
    switch (l.kind) {
      case LayerKind::conv2d:
        l.in_channels = j.at("in_channels").get<Index>();
        l.out_channels = j.at("out_channels").get<Index>();
        l.kernel_h = j.at("kernel_h").get<Index>();
        l.kernel_w = j.at("kernel_w").get<Index>();
        l.stride = j.value("stride", Index{1});
        l.padding = j.value("padding", Index{0});
        break;
      case LayerKind::maxpool2d:
        l.window = j.at("window").get<Index>();
        l.stride = j.value("stride", l.window);
        break;
      case LayerKind::linear:
        l.in_features = j.at("in_features").get<Index>();
        l.out_features = j.at("out_features").get<Index>();
        break;
      case LayerKind::flatten:
        if (j.value("order", std::string("CHW")) != "CHW") {
          throw Error(ErrorCode::invalid_architecture, "only CHW flatten order is supported");
        }
        break;
      case LayerKind::relu:
        break;
    }
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_architecture, std::string("malformed layer: ") + e.what());
  }
}

nlohmann::json to_json(const Architecture& arch) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : arch.layers) layers.push_back(to_json(l));
  return {{"input_shape", arch.input_shape}, {"layers", layers}, {"class_names", arch.class_names}};
}

Architecture architecture_from_json(const nlohmann::json& j) {
  try {
    Architecture a;
    a.input_shape = j.at("input_shape").get<Shape>();
    for (const auto& l : j.at("layers")) a.layers.push_back(layer_from_json(l));
    a.class_names = j.at("class_names").get<std::vector<std::string>>();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::invalid_architecture, std::string("malformed architecture: ") + e.what());
  }
}

}  // namespace cnnp
