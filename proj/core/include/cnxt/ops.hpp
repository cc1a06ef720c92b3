// SPDX-License-Identifier: Apache-2.0
//
// Neural-network layer kernels. Every operation exists as a pure forward
// function and as an op instance that retains what backward needs.
// Kernels are instantiated for float (training/inference) and double
// (gradient checking).
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cnxt/tensor.hpp"

namespace cnxt {

enum class Mode { kTrain, kInfer };

/// Geometry of one square-kernel convolution.
struct ConvSpec {
  std::size_t kernel = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t groups = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  static ConvSpec standard(std::size_t kernel, std::size_t in, std::size_t out,
                           std::size_t stride = 1, std::size_t padding = 0);
  static ConvSpec grouped(std::size_t kernel, std::size_t in, std::size_t out, std::size_t groups,
                          std::size_t stride = 1, std::size_t padding = 0);
  static ConvSpec depthwise(std::size_t channels, std::size_t kernel = 3, std::size_t stride = 1,
                            std::size_t padding = 0);
  static ConvSpec pointwise(std::size_t in, std::size_t out);

  /// Throws SpecError unless every count is positive and groups divide both
  /// channel counts.
  void validate() const;

  std::size_t in_per_group() const { return in_channels / groups; }
  std::size_t out_per_group() const { return out_channels / groups; }
  bool is_depthwise() const { return groups == in_channels && out_channels == in_channels; }
  bool is_pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }

  Shape4 weight_shape() const { return {out_channels, in_per_group(), kernel, kernel}; }
  /// floor((extent + 2p - F) / s) + 1; throws SpecError if the padded extent
  /// is smaller than the kernel.
  std::size_t output_extent(std::size_t extent) const;
  Shape4 output_shape(const Shape4& input) const;

  std::string str() const;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

template <typename T>
struct ConvParams {
  BasicTensor4<T> weights;
  std::optional<BasicTensor4<T>> bias;  // (1, B, 1, 1)
};

template <typename T>
struct BatchNormParams {
  BasicTensor4<T> gamma;  // each (1, C, 1, 1)
  BasicTensor4<T> beta;
  BasicTensor4<T> running_mean;
  BasicTensor4<T> running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  static BatchNormParams identity(std::size_t channels);
  std::size_t channels() const { return gamma.shape().c(); }
  void validate(std::size_t channels) const;
};

struct PoolSpec {
  std::size_t window = 2;
  std::size_t stride = 2;
};

/// Gradients of one op. The optional members mirror the op's parameters:
/// convolution/linear weights and bias, or batch-norm gamma and beta.
template <typename T>
struct GradientBundle {
  BasicTensor4<T> d_input;
  std::optional<BasicTensor4<T>> d_weights;
  std::optional<BasicTensor4<T>> d_bias;
};

// ---------------------------------------------------------------------------
// Forward kernels

/// Grouped 2-D convolution lowered to im2col and matrix multiply.
template <typename T>
BasicTensor4<T> conv2d(const BasicTensor4<T>& input, const ConvParams<T>& params,
                       const ConvSpec& spec);

/// Channel-wise convolution; requires groups == in == out.
template <typename T>
BasicTensor4<T> depthwise_conv(const BasicTensor4<T>& input, const ConvParams<T>& params,
                               const ConvSpec& spec);

/// 1x1 channel mixing at each spatial position.
template <typename T>
BasicTensor4<T> pointwise_conv(const BasicTensor4<T>& input, const ConvParams<T>& params,
                               const ConvSpec& spec);

template <typename T>
BasicTensor4<T> separable_conv(const BasicTensor4<T>& input, const ConvParams<T>& dw,
                               const ConvSpec& dw_spec, const ConvParams<T>& pw,
                               const ConvSpec& pw_spec);

template <typename T>
BasicTensor4<T> relu6(const BasicTensor4<T>& input);

/// y = gamma * (x - mean) / sqrt(var + eps) + beta per channel. Train mode
/// uses biased batch statistics over (n, h, w) and folds them into the
/// running estimates of `params`.
template <typename T>
BasicTensor4<T> batch_norm(const BasicTensor4<T>& input, BatchNormParams<T>& params, Mode mode);

template <typename T>
BasicTensor4<T> avg_pool(const BasicTensor4<T>& input, const PoolSpec& pool);

template <typename T>
BasicTensor4<T> global_avg_pool(const BasicTensor4<T>& input);

/// Flattens each sample to c*h*w features. Weights are (out, in, 1, 1),
/// bias (1, out, 1, 1); output is (n, out, 1, 1).
template <typename T>
BasicTensor4<T> linear(const BasicTensor4<T>& input, const BasicTensor4<T>& weights,
                       const BasicTensor4<T>& bias);

/// Row-wise softmax over each sample's c*h*w values.
template <typename T>
BasicTensor4<T> softmax(const BasicTensor4<T>& input);

/// Bernoulli keep mask scaled by 1/(1-rate) for inverted dropout.
std::vector<float> dropout_mask(std::size_t count, double rate, std::uint64_t seed);

template <typename T>
BasicTensor4<T> dropout(const BasicTensor4<T>& input, double rate, Mode mode, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Backward kernels (pure functions of the forward operands)

template <typename T>
GradientBundle<T> conv2d_backward(const BasicTensor4<T>& input, const ConvParams<T>& params,
                                  const ConvSpec& spec, const BasicTensor4<T>& upstream);

template <typename T>
GradientBundle<T> depthwise_conv_backward(const BasicTensor4<T>& input,
                                          const ConvParams<T>& params, const ConvSpec& spec,
                                          const BasicTensor4<T>& upstream);

/// Derivative is 1 on (0, 6) and 0 elsewhere, including both kinks.
template <typename T>
BasicTensor4<T> relu6_backward(const BasicTensor4<T>& input, const BasicTensor4<T>& upstream);

template <typename T>
BasicTensor4<T> avg_pool_backward(const Shape4& input_shape, const PoolSpec& pool,
                                  const BasicTensor4<T>& upstream);

template <typename T>
BasicTensor4<T> global_avg_pool_backward(const Shape4& input_shape,
                                         const BasicTensor4<T>& upstream);

template <typename T>
GradientBundle<T> linear_backward(const BasicTensor4<T>& input, const BasicTensor4<T>& weights,
                                  const BasicTensor4<T>& upstream);

template <typename T>
BasicTensor4<T> softmax_backward(const BasicTensor4<T>& output, const BasicTensor4<T>& upstream);

// ---------------------------------------------------------------------------
// Op instances: forward caches operands, backward consumes them. Calling
// backward before forward throws UsageError.

template <typename T>
class ConvOp {
 public:
  enum class Kind { kGeneral, kDepthwise, kPointwise };

  explicit ConvOp(ConvSpec spec, Kind kind = Kind::kGeneral);

  BasicTensor4<T> forward(const BasicTensor4<T>& input, const ConvParams<T>& params);
  GradientBundle<T> backward(const BasicTensor4<T>& upstream) const;

  const ConvSpec& spec() const { return spec_; }
  Kind kind() const { return kind_; }

 private:
  ConvSpec spec_;
  Kind kind_;
  std::optional<BasicTensor4<T>> input_;
  std::optional<ConvParams<T>> params_;
};

template <typename T>
class BatchNormOp {
 public:
  BasicTensor4<T> forward(const BasicTensor4<T>& input, BatchNormParams<T>& params, Mode mode);
  /// d_weights holds d_gamma and d_bias holds d_beta.
  GradientBundle<T> backward(const BasicTensor4<T>& upstream) const;

 private:
  struct Cache {
    BasicTensor4<T> normalized;
    std::vector<double> inv_std;
    std::vector<double> gamma;
    Mode mode;
  };
  std::optional<Cache> cache_;
};

template <typename T>
class ReLU6Op {
 public:
  BasicTensor4<T> forward(const BasicTensor4<T>& input);
  GradientBundle<T> backward(const BasicTensor4<T>& upstream) const;

 private:
  std::optional<BasicTensor4<T>> input_;
};

template <typename T>
class AvgPoolOp {
 public:
  explicit AvgPoolOp(PoolSpec pool) : pool_(pool) {}
  BasicTensor4<T> forward(const BasicTensor4<T>& input);
  GradientBundle<T> backward(const BasicTensor4<T>& upstream) const;

 private:
  PoolSpec pool_;
  std::optional<Shape4> input_shape_;
};

template <typename T>
class GlobalAvgPoolOp {
 public:
  BasicTensor4<T> forward(const BasicTensor4<T>& input);
  GradientBundle<T> backward(const BasicTensor4<T>& upstream) const;

 private:
  std::optional<Shape4> input_shape_;
};

template <typename T>
class LinearOp {
 public:
  BasicTensor4<T> forward(const BasicTensor4<T>& input, const BasicTensor4<T>& weights,
                          const BasicTensor4<T>& bias);
  GradientBundle<T> backward(const BasicTensor4<T>& upstream) const;

 private:
  std::optional<BasicTensor4<T>> input_;
  std::optional<BasicTensor4<T>> weights_;
};

template <typename T>
class SoftmaxOp {
 public:
  BasicTensor4<T> forward(const BasicTensor4<T>& input);
  GradientBundle<T> backward(const BasicTensor4<T>& upstream) const;

 private:
  std::optional<BasicTensor4<T>> output_;
};

template <typename T>
class DropoutOp {
 public:
  BasicTensor4<T> forward(const BasicTensor4<T>& input, double rate, Mode mode,
                          std::uint64_t seed);
  GradientBundle<T> backward(const BasicTensor4<T>& upstream) const;

 private:
  std::optional<std::vector<float>> mask_;  // empty vector: identity
  std::optional<Shape4> shape_;
};

}  // namespace cnxt
