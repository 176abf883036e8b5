#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cnnp/model.hpp"

namespace cnnp {

/// H x W saliency in [0, 1], scaled so the strongest pixel is 1. Only the
/// target filter's activation is kept as the seed gradient.
/// `image` is [C, H, W]. With `guided` false, plain ReLU backprop is used.
Eigen::MatrixXf guided_backprop(const Model& model, const Tensorf& image, FilterRef filter, bool guided = true);

/// Equal-width bins over [0, 1]; the last bin is closed on the right.
std::vector<std::int64_t> pixel_histogram(const Eigen::MatrixXf& map, int bins = 32);

/// 8-bit grayscale PNG of a [0, 1] map.
std::string saliency_png(const Eigen::MatrixXf& map);

}  // namespace cnnp
