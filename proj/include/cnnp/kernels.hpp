#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cnnp/tensor.hpp"

// Per-layer forward/backward kernels. Activations are NCHW; convolution is
// cross-correlation. Shapes must match exactly, nothing broadcasts.
namespace cnnp {

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                      const Tensor<Scalar>& bias, Index stride, Index padding);

template <typename Scalar>
struct Conv2dGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

template <typename Scalar>
Conv2dGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                                    Index stride, Index padding, const Tensor<Scalar>& grad_output,
                                    bool need_input_grad = true);

template <typename Scalar>
struct MaxPoolResult {
  Tensor<Scalar> output;
  std::vector<std::int32_t> argmax;  // flat index into the input, one per output element
};

/// Ties resolve to the first row-major position in the window.
template <typename Scalar>
MaxPoolResult<Scalar> maxpool2d(const Tensor<Scalar>& input, Index window, Index stride);

template <typename Scalar>
Tensor<Scalar> maxpool2d_backward(const Shape& input_shape, std::span<const std::int32_t> argmax,
                                  const Tensor<Scalar>& grad_output);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input);

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_output);

/// Guided variant: gradient passes only where input > 0 and grad_output > 0.
template <typename Scalar>
Tensor<Scalar> guided_relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_output);

/// input [N, In], weights [Out, In], bias [Out] -> [N, Out].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                      const Tensor<Scalar>& bias);

template <typename Scalar>
struct LinearGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

template <typename Scalar>
LinearGrads<Scalar> linear_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& weights,
                                    const Tensor<Scalar>& grad_output);

template <typename Scalar>
struct LossResult {
  double loss = 0.0;                  // batch mean
  std::vector<double> per_example;    // -log softmax(logit)[label]
  Tensor<Scalar> grad_logits;         // (softmax - onehot) / N
};

/// Log-sum-exp is evaluated in double regardless of Scalar.
template <typename Scalar>
LossResult<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels);

}  // namespace cnnp
