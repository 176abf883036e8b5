#include "cnnp/kernels.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace cnnp {
namespace {

[[noreturn]] void shape_error(const std::string& op, const std::string& what) {
  throw Error(ErrorCode::shape_mismatch, op + ": " + what, what);
}

void expect_rank(const std::string& op, const char* name, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    shape_error(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " +
                        shape_string(shape));
  }
}

Index conv_out_extent(const std::string& op, const char* axis, Index in, Index kernel, Index stride,
                      Index padding) {
  const Index span = in + 2 * padding - kernel;
  if (stride < 1) shape_error(op, "stride must be >= 1");
  if (span < 0) {
    shape_error(op, std::string(axis) + ": kernel " + std::to_string(kernel) +
                        " exceeds padded input " + std::to_string(in + 2 * padding));
  }
  if (span % stride != 0) {
    shape_error(op, std::string(axis) + ": stride " + std::to_string(stride) +
                        " does not tile padded input " + std::to_string(in + 2 * padding));
  }
  return span / stride + 1;
}

template <typename Scalar>
void im2col(const Scalar* image, Index channels, Index height, Index width, Index kh, Index kw,
            Index stride, Index padding, Index out_h, Index out_w, RowMatrix<Scalar>& cols) {
  cols.resize(channels * kh * kw, out_h * out_w);
  for (Index c = 0; c < channels; ++c) {
    const Scalar* plane = image + c * height * width;
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        Scalar* row = cols.data() + ((c * kh + i) * kw + j) * out_h * out_w;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index y = oy * stride - padding + i;
          Scalar* dst = row + oy * out_w;
          if (y < 0 || y >= height) {
            std::fill(dst, dst + out_w, Scalar(0));
            continue;
          }
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index x = ox * stride - padding + j;
            dst[ox] = (x < 0 || x >= width) ? Scalar(0) : plane[y * width + x];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, Index channels, Index height, Index width, Index kh,
                Index kw, Index stride, Index padding, Index out_h, Index out_w, Scalar* image) {
  for (Index c = 0; c < channels; ++c) {
    Scalar* plane = image + c * height * width;
    for (Index i = 0; i < kh; ++i) {
      for (Index j = 0; j < kw; ++j) {
        const Scalar* row = cols.data() + ((c * kh + i) * kw + j) * out_h * out_w;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index y = oy * stride - padding + i;
          if (y < 0 || y >= height) continue;
          const Scalar* src = row + oy * out_w;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index x = ox * stride - padding + j;
            if (x >= 0 && x < width) plane[y * width + x] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                      const Tensor<Scalar>& bias, Index stride, Index padding) {
  const std::string op = "conv2d";
  expect_rank(op, "input", input.shape(), 4);
  expect_rank(op, "weights", weights.shape(), 4);
  expect_rank(op, "bias", bias.shape(), 1);
  if (padding < 0) shape_error(op, "padding must be >= 0");
  const Index n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index cout = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);
  if (weights.dim(1) != cin) {
    shape_error(op, "in_channels: weights expect " + std::to_string(weights.dim(1)) +
                        ", input has " + std::to_string(cin));
  }
  if (bias.dim(0) != cout) {
    shape_error(op, "out_channels: bias has " + std::to_string(bias.dim(0)) + ", weights have " +
                        std::to_string(cout));
  }
  const Index oh = conv_out_extent(op, "height", h, kh, stride, padding);
  const Index ow = conv_out_extent(op, "width", w, kw, stride, padding);

  Tensor<Scalar> output({n, cout, oh, ow});
  const auto wmat = weights.matrix(cout, cin * kh * kw);
  const auto b = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias.data(), cout);
  RowMatrix<Scalar> cols;
  for (Index s = 0; s < n; ++s) {
    im2col(input.data() + s * cin * h * w, cin, h, w, kh, kw, stride, padding, oh, ow, cols);
    Eigen::Map<RowMatrix<Scalar>> out(output.data() + s * cout * oh * ow, cout, oh * ow);
    out.noalias() = wmat * cols;
    out.colwise() += b;
  }
  return output;
}

template <typename Scalar>
Conv2dGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                                    Index stride, Index padding, const Tensor<Scalar>& grad_output,
                                    bool need_input_grad) {
  const std::string op = "conv2d_backward";
  expect_rank(op, "input", input.shape(), 4);
  expect_rank(op, "weights", weights.shape(), 4);
  expect_rank(op, "grad_output", grad_output.shape(), 4);
  const Index n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index cout = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);
  const Index oh = conv_out_extent(op, "height", h, kh, stride, padding);
  const Index ow = conv_out_extent(op, "width", w, kw, stride, padding);
  if (grad_output.shape() != Shape{n, cout, oh, ow}) {
    shape_error(op, "grad_output " + shape_string(grad_output.shape()) + " does not match " +
                        shape_string({n, cout, oh, ow}));
  }

  Conv2dGrads<Scalar> g;
  g.weights = Tensor<Scalar>(weights.shape());
  g.bias = Tensor<Scalar>({cout});
  if (need_input_grad) g.input = Tensor<Scalar>(input.shape());

  auto dw = g.weights.matrix(cout, cin * kh * kw);
  auto db = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(g.bias.data(), cout);
  const auto wmat = weights.matrix(cout, cin * kh * kw);
  RowMatrix<Scalar> cols;
  RowMatrix<Scalar> dcols;
  for (Index s = 0; s < n; ++s) {
    im2col(input.data() + s * cin * h * w, cin, h, w, kh, kw, stride, padding, oh, ow, cols);
    Eigen::Map<const RowMatrix<Scalar>> dout(grad_output.data() + s * cout * oh * ow, cout, oh * ow);
    dw.noalias() += dout * cols.transpose();
    db += dout.rowwise().sum();
    if (need_input_grad) {
      dcols.noalias() = wmat.transpose() * dout;
      col2im_add(dcols, cin, h, w, kh, kw, stride, padding, oh, ow,
                 g.input.data() + s * cin * h * w);
    }
  }
  return g;
}

template <typename Scalar>
MaxPoolResult<Scalar> maxpool2d(const Tensor<Scalar>& input, Index window, Index stride) {
  const std::string op = "maxpool2d";
  expect_rank(op, "input", input.shape(), 4);
  if (window < 1 || stride < 1) shape_error(op, "window and stride must be >= 1");
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (window > h || window > w) {
    shape_error(op, "window " + std::to_string(window) + " exceeds input " + shape_string(input.shape()));
  }
  const Index oh = (h - window) / stride + 1;
  const Index ow = (w - window) / stride + 1;

  MaxPoolResult<Scalar> r{Tensor<Scalar>({n, c, oh, ow}), {}};
  r.argmax.resize(static_cast<std::size_t>(r.output.size()));
  const Scalar* in = input.data();
  Scalar* out = r.output.data();
  std::size_t k = 0;
  for (Index plane = 0; plane < n * c; ++plane) {
    const Index base = plane * h * w;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox, ++k) {
        Index best = base + (oy * stride) * w + ox * stride;
        for (Index i = 0; i < window; ++i) {
          for (Index j = 0; j < window; ++j) {
            const Index idx = base + (oy * stride + i) * w + ox * stride + j;
            if (in[idx] > in[best]) best = idx;
          }
        }
        out[k] = in[best];
        r.argmax[k] = static_cast<std::int32_t>(best);
      }
    }
  }
  return r;
}

template <typename Scalar>
Tensor<Scalar> maxpool2d_backward(const Shape& input_shape, std::span<const std::int32_t> argmax,
                                  const Tensor<Scalar>& grad_output) {
  if (static_cast<Index>(argmax.size()) != grad_output.size()) {
    shape_error("maxpool2d_backward", "argmax count " + std::to_string(argmax.size()) +
                                          " does not match grad_output size " +
                                          std::to_string(grad_output.size()));
  }
  Tensor<Scalar> grad_input(input_shape);
  for (std::size_t k = 0; k < argmax.size(); ++k) {
    grad_input[argmax[k]] += grad_output[static_cast<Index>(k)];
  }
  return grad_input;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input) {
  Tensor<Scalar> out(input.shape());
  out.vec() = input.vec().cwiseMax(Scalar(0));
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_output) {
  if (input.shape() != grad_output.shape()) {
    shape_error("relu_backward", "grad_output " + shape_string(grad_output.shape()) +
                                     " vs input " + shape_string(input.shape()));
  }
  Tensor<Scalar> g(input.shape());
  g.vec() = (input.vec().array() > Scalar(0)).select(grad_output.vec(), Scalar(0));
  return g;
}

template <typename Scalar>
Tensor<Scalar> guided_relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_output) {
  if (input.shape() != grad_output.shape()) {
    shape_error("guided_relu_backward", "grad_output " + shape_string(grad_output.shape()) +
                                            " vs input " + shape_string(input.shape()));
  }
  Tensor<Scalar> g(input.shape());
  g.vec() = (input.vec().array() > Scalar(0) && grad_output.vec().array() > Scalar(0))
                .select(grad_output.vec(), Scalar(0));
  return g;
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                      const Tensor<Scalar>& bias) {
  const std::string op = "linear";
  expect_rank(op, "input", input.shape(), 2);
  expect_rank(op, "weights", weights.shape(), 2);
  expect_rank(op, "bias", bias.shape(), 1);
  const Index n = input.dim(0), in = input.dim(1), out = weights.dim(0);
  if (weights.dim(1) != in) {
    shape_error(op, "in_features: weights expect " + std::to_string(weights.dim(1)) +
                        ", input has " + std::to_string(in));
  }
  if (bias.dim(0) != out) {
    shape_error(op, "out_features: bias has " + std::to_string(bias.dim(0)) + ", weights have " +
                        std::to_string(out));
  }
  Tensor<Scalar> result({n, out});
  auto y = result.matrix(n, out);
  y.noalias() = input.matrix(n, in) * weights.matrix(out, in).transpose();
  y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.data(), out);
  return result;
}

template <typename Scalar>
LinearGrads<Scalar> linear_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                                    const Tensor<Scalar>& grad_output) {
  const Index n = input.dim(0), in = input.dim(1), out = weights.dim(0);
  if (grad_output.shape() != Shape{n, out}) {
    shape_error("linear_backward", "grad_output " + shape_string(grad_output.shape()) +
                                       " does not match " + shape_string({n, out}));
  }
  LinearGrads<Scalar> g{Tensor<Scalar>({n, in}), Tensor<Scalar>({out, in}), Tensor<Scalar>({out})};
  const auto dy = grad_output.matrix(n, out);
  g.input.matrix(n, in).noalias() = dy * weights.matrix(out, in);
  g.weights.matrix(out, in).noalias() = dy.transpose() * input.matrix(n, in);
  g.bias.matrix(1, out) = dy.colwise().sum();
  return g;
}

template <typename Scalar>
LossResult<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) {
    shape_error("softmax_cross_entropy", "logits must be [N, C], got " + shape_string(logits.shape()));
  }
  const Index n = logits.dim(0), c = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) {
    shape_error("softmax_cross_entropy", "batch: " + std::to_string(labels.size()) +
                                             " labels for " + std::to_string(n) + " rows");
  }
  LossResult<Scalar> r;
  r.grad_logits = Tensor<Scalar>({n, c});
  r.per_example.resize(static_cast<std::size_t>(n));
  Eigen::VectorXd row(c);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= c) {
      throw Error(ErrorCode::label_out_of_range,
                  "label " + std::to_string(label) + " outside [0, " + std::to_string(c) + ")",
                  "example " + std::to_string(i));
    }
    for (Index j = 0; j < c; ++j) row[j] = static_cast<double>(logits[i * c + j]);
    const double m = row.maxCoeff();
    const Eigen::VectorXd e = (row.array() - m).exp();
    const double sum = e.sum();
    const double loss = m + std::log(sum) - row[label];
    r.per_example[static_cast<std::size_t>(i)] = loss;
    total += loss;
    for (Index j = 0; j < c; ++j) {
      const double p = e[j] / sum - (j == label ? 1.0 : 0.0);
      r.grad_logits[i * c + j] = static_cast<Scalar>(p / static_cast<double>(n));
    }
  }
  r.loss = total / static_cast<double>(n);
  return r;
}

#define CNNP_INSTANTIATE_KERNELS(S)                                                              \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Index, Index); \
  template Conv2dGrads<S> conv2d_backward(const Tensor<S>&, const Tensor<S>&, Index, Index,      \
                                          const Tensor<S>&, bool);                               \
  template MaxPoolResult<S> maxpool2d(const Tensor<S>&, Index, Index);                          \
  template Tensor<S> maxpool2d_backward(const Shape&, std::span<const std::int32_t>,            \
                                        const Tensor<S>&);                                       \
  template Tensor<S> relu(const Tensor<S>&);                                                     \
  template Tensor<S> relu_backward(const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> guided_relu_backward(const Tensor<S>&, const Tensor<S>&);                   \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);               \
  template LinearGrads<S> linear_backward(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&); \
  template LossResult<S> softmax_cross_entropy(const Tensor<S>&, std::span<const int>);

CNNP_INSTANTIATE_KERNELS(float)
CNNP_INSTANTIATE_KERNELS(double)

}  // namespace cnnp
