#pragma once

// Test-only helpers: random fixtures and independent reference oracles.

#include <cmath>
#include <functional>
#include <vector>

#include "cnnp/architecture.hpp"
#include "cnnp/datasets.hpp"
#include "cnnp/model.hpp"
#include "cnnp/rng.hpp"
#include "cnnp/tensor.hpp"

namespace cnnp::testing {

template <typename Scalar>
Tensor<Scalar> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<Scalar> t(shape);
  for (auto& v : t.values()) v = static_cast<Scalar>(rng.uniform(lo, hi));
  return t;
}

/// Values are a shuffled, evenly spaced grid, so no two entries are closer
/// than `gap` (keeps max-pool argmax stable under finite differences).
template <typename Scalar>
Tensor<Scalar> distinct_tensor(const Shape& shape, Rng& rng, double gap = 0.01) {
  Tensor<Scalar> t(shape);
  auto order = permutation(static_cast<std::size_t>(t.size()), rng);
  const double offset = -gap * static_cast<double>(t.size()) / 2.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    t[static_cast<Index>(i)] = static_cast<Scalar>(offset + gap * static_cast<double>(order[i]) + gap / 2);
  }
  return t;
}

/// Seven nested loops, straight from the definition of cross-correlation.
template <typename Scalar>
Tensor<Scalar> naive_conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b,
                            Index stride, Index pad) {
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const Index oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor<Scalar> y({n, cout, oh, ow});
  for (Index s = 0; s < n; ++s)
    for (Index o = 0; o < cout; ++o)
      for (Index r = 0; r < oh; ++r)
        for (Index c = 0; c < ow; ++c) {
          Scalar acc = b[o];
          for (Index i = 0; i < cin; ++i)
            for (Index u = 0; u < kh; ++u)
              for (Index v = 0; v < kw; ++v) {
                const Index yy = r * stride - pad + u, xx = c * stride - pad + v;
                if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                acc += x.at(s, i, yy, xx) * w.at(o, i, u, v);
              }
          y.at(s, o, r, c) = acc;
        }
  return y;
}

/// Central differences of a scalar function with respect to every entry of `t`.
inline Tensord numeric_gradient(Tensord& t, const std::function<double()>& f, double h = 1e-5) {
  Tensord g(t.shape());
  for (Index i = 0; i < t.size(); ++i) {
    const double saved = t[i];
    t[i] = saved + h;
    const double up = f();
    t[i] = saved - h;
    const double down = f();
    t[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// ||a - b|| / max(||a|| + ||b||, tiny).
inline double relative_error(const Tensord& a, const Tensord& b) {
  const double denom = std::max(a.vec().norm() + b.vec().norm(), 1e-12);
  return (a.vec() - b.vec()).norm() / denom;
}

/// Small dataset of random images with random labels.
inline Dataset random_dataset(Index n, const Shape& example, Index classes, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.images = Tensorf({n, example[0], example[1], example[2]});
  for (auto& v : d.images.values()) v = static_cast<float>(rng.uniform());
  for (Index i = 0; i < n; ++i) {
    d.labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
    d.ids.push_back(std::to_string(i));
  }
  for (Index c = 0; c < classes; ++c) d.class_names.push_back("c" + std::to_string(c));
  return d;
}

/// input 1xHxW -> conv(1->a) -> relu -> conv(a->b) -> relu -> pool2 -> flatten -> linear.
inline Architecture toy_architecture(Index a, Index b, Index hw = 8, Index classes = 3) {
  Architecture arch;
  arch.input_shape = {1, hw, hw};
  const Index after = (hw - 2 - 2 - 2) / 2 + 1;
  arch.layers = {LayerSpec::conv(1, a, 3),   LayerSpec::relu(), LayerSpec::conv(a, b, 3),
                 LayerSpec::relu(),          LayerSpec::maxpool(2, 2), LayerSpec::flatten(),
                 LayerSpec::linear(b * after * after, classes)};
  for (Index c = 0; c < classes; ++c) arch.class_names.push_back("c" + std::to_string(c));
  return arch;
}

/// Random weights and biases (biases nonzero, unlike build_model).
inline Model random_model(const Architecture& arch, std::uint64_t seed, double scale = 0.5) {
  Model m(arch, seed);
  Rng rng(seed);
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    if (!arch.layers[i].has_parameters()) continue;
    auto& p = m.mutable_params(i);
    for (auto& v : p.weights.values()) v = static_cast<float>(rng.uniform(-scale, scale));
    for (auto& v : p.bias.values()) v = static_cast<float>(rng.uniform(-0.1, 0.1));
  }
  return m;
}

/// Class 0 lights the left half of a 6x6 image, class 1 the right half.
inline Dataset halves_dataset(Index n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.images = Tensorf({n, 1, 6, 6});
  d.class_names = {"left", "right"};
  for (Index i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    for (Index y = 0; y < 6; ++y)
      for (Index x = 0; x < 6; ++x) {
        const bool lit = (x < 3) == (label == 0);
        d.images.at(i, 0, y, x) = static_cast<float>((lit ? 0.7 : 0.0) + 0.3 * rng.uniform());
      }
    d.labels.push_back(label);
    d.ids.push_back(std::to_string(i));
  }
  return d;
}

}  // namespace cnnp::testing
