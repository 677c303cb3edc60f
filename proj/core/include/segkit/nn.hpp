#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "segkit/tensor.hpp"

// Functional layer vocabulary. Image tensors are NCHW.
namespace segkit::nn {

enum class PaddingMode { kSame, kValid };

struct ConvSpec {
  std::size_t out_channels = 1;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t dilation_rate = 1;  // atrous rate; 1 is ordinary convolution
  PaddingMode padding = PaddingMode::kSame;
  std::size_t groups = 1;
  bool depthwise = false;  // groups == in_channels == out_channels
};

// Output extent along one spatial axis. Valid mode throws kKernelTooLarge
// when the dilated kernel does not fit.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t rate, PaddingMode mode);

// Atrous convolution y[i] = sum_k x[i + r*k] w[k] via column unfolding.
// weights: O x (I/groups) x kh x kw; bias: O or undefined.
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
              const ConvSpec& spec);

// Direct sliding-window convolution without dilation support; the reference
// path the atrous kernel must reproduce at rate 1. Same summation order.
Tensor conv2d_standard(const Tensor& input, const Tensor& weights, const Tensor& bias,
                       const ConvSpec& spec);

// One kh x kw filter per channel: weights C x 1 x kh x kw.
Tensor depthwise_conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
                        const ConvSpec& spec);

// Fractionally strided convolution, no padding: output = (H - 1) * stride + k.
// weights: I x O x kh x kw.
Tensor transposed_conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
                         std::size_t stride = 2);

enum class PoolKind { kMax, kAverage };

struct PoolSpec {
  std::size_t window = 2;
  std::size_t stride = 2;
  PaddingMode padding = PaddingMode::kValid;
};

// Padded cells never win a max and are excluded from an average. Max-pool
// gradients go to the first maximum in row-major window order.
Tensor pool2d(PoolKind kind, const Tensor& input, const PoolSpec& spec);
Tensor pool2d(PoolKind kind, const Tensor& input, std::size_t window, std::size_t stride);

// Splits H and W into `bins` contiguous, non-overlapping ranges
// [floor(i*H/n), floor((i+1)*H/n)) and averages each.
Tensor adaptive_avg_pool(const Tensor& input, std::size_t bins);

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  static BatchNormState identity(std::size_t channels);
};

// Training mode normalises by per-channel batch statistics over (N, H, W)
// (biased variance) and moves the running statistics by `momentum`.
Tensor batch_norm(const Tensor& input, BatchNormState& state, bool training);

// Bilinear resampling with half-pixel centres (align_corners = false).
Tensor resize_bilinear(const Tensor& input, std::size_t out_h, std::size_t out_w);
// scale_factor in {2, 4, 8}.
Tensor bilinear_upsample(const Tensor& input, std::size_t scale_factor);
Tensor nearest_upsample(const Tensor& input, std::size_t scale = 2);

enum class Activation { kIdentity, kSigmoid, kRelu, kLeakyRelu, kTanh, kSoftmaxChannel };

inline constexpr double kLeakySlope = 0.01;

Tensor activation(Activation kind, const Tensor& input);
Tensor sigmoid(const Tensor& input);
Tensor relu(const Tensor& input);
Tensor leaky_relu(const Tensor& input);
Tensor tanh(const Tensor& input);
// Softmax over axis 1 of a rank-4 tensor.
Tensor softmax_channel(const Tensor& input);

// f(x W + b) with x: N x F, W: F x O, b: O.
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias,
             Activation act = Activation::kIdentity);

// Channel-axis argmax of an N x C x H x W tensor -> N*H*W labels (first max
// wins).
std::vector<int> argmax_channel(const Tensor& input);

}  // namespace segkit::nn
