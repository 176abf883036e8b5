#include "cnnp/vis.hpp"

#include <cmath>

#include "cnnp/image_io.hpp"

namespace cnnp {

Eigen::MatrixXf guided_backprop(const Model& model, const Tensorf& image, FilterRef filter, bool guided) {
  const Architecture& arch = model.architecture();
  if (filter.layer >= arch.layers.size() || arch.layers[filter.layer].kind != LayerKind::conv2d) {
    throw Error(ErrorCode::invalid_argument, "layer " + std::to_string(filter.layer) + " is not conv2d");
  }
  if (filter.filter < 0 || filter.filter >= arch.layers[filter.layer].out_channels) {
    throw Error(ErrorCode::not_found, "model has no filter " + to_string(filter));
  }
  if (image.rank() != 3 || image.shape() != arch.input_shape) {
    throw Error(ErrorCode::shape_mismatch, "image is " + shape_string(image.shape()) + ", model expects " +
                                               shape_string(arch.input_shape));
  }
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const Tensorf batch = image.reshaped({1, c, h, w});
  const std::size_t fm = feature_map_layer(arch, filter.layer);
  const auto pass = forward_pass(model, batch, fm + 1);

  Tensorf seed(pass.logits.shape());
  const Index plane = pass.logits.dim(2) * pass.logits.dim(3);
  seed.vec().segment(filter.filter * plane, plane) = pass.logits.vec().segment(filter.filter * plane, plane);

  BackwardOptions opt;
  opt.param_grads = false;
  opt.input_grad = true;
  opt.guided_relu = guided;
  const auto g = backward_pass(model, pass.cache, seed, opt);

  Eigen::MatrixXf map = Eigen::MatrixXf::Zero(h, w);
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) map(y, x) = std::max(map(y, x), std::abs(g.input.at(0, ch, y, x)));
  const float top = map.maxCoeff();
  if (top > 0.0f && std::isfinite(top)) map /= top;
  return map;
}

std::vector<std::int64_t> pixel_histogram(const Eigen::MatrixXf& map, int bins) {
  if (bins < 1) throw Error(ErrorCode::invalid_argument, "histogram needs at least one bin");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(bins), 0);
  for (Index i = 0; i < map.size(); ++i) {
    const double v = std::clamp(static_cast<double>(map.data()[i]), 0.0, 1.0);
    const auto b = std::min(static_cast<int>(v * bins), bins - 1);
    ++counts[static_cast<std::size_t>(b)];
  }
  return counts;
}

std::string saliency_png(const Eigen::MatrixXf& map) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(map.size()));
  for (Index y = 0; y < map.rows(); ++y)
    for (Index x = 0; x < map.cols(); ++x) {
      const float v = std::clamp(map(y, x), 0.0f, 1.0f);
      px[static_cast<std::size_t>(y * map.cols() + x)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return encode_png_gray(px, map.cols(), map.rows());
}

}  // namespace cnnp
