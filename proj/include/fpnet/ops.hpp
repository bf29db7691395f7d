#pragma once

#include <cstddef>
#include <vector>

#include "fpnet/tensor.hpp"

namespace fpnet::ops {

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const ConvSpec& spec);

// Direct convolution. weight is (outC,inC,kH,kW) with odd kernel extents;
// bias is an optional (1,outC,1,1) channel vector. Each output element is
// accumulated in double precision in input-channel, kernel-row, kernel-column
// order.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec);

enum class PoolEdge {
  strict,  // extents must be divisible by k
  ceil,    // partial windows at the far edge average their in-bounds pixels
};

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& input, std::size_t k, PoolEdge edge = PoolEdge::strict);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, std::size_t s);

// Nearest upsampling by s, cropped to (out_h, out_w); the partner of
// PoolEdge::ceil for odd extents.
template <typename T>
Tensor<T> upsample_nearest_to(const Tensor<T>& input, std::size_t s, std::size_t out_h,
                              std::size_t out_w);

// Bilinear upsampling by an integer factor, half-pixel centres, edge clamped.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, std::size_t s);

// Elementwise binary ops. Shapes must match, except that an operand with a
// single channel is broadcast across the other's channels.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
// x * alpha + beta.
template <typename T>
Tensor<T> scale_shift(const Tensor<T>& x, const Tensor<T>& alpha, const Tensor<T>& beta);

// x + bias with bias a (1,C,1,1) channel vector.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count);

// out[b,0,h,w] = (1/C) * sum_c a[b,c,h,w] * b[b,c,h,w].
template <typename T>
Tensor<T> channel_inner_product(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> channel_max(const Tensor<T>& x);
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x);

struct BatchNormSpec {
  bool training = false;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalization. Training mode with batch > 1 normalizes with
// batch statistics and updates the running buffers in place; otherwise the
// running statistics are used.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormSpec& spec);

// Scalar reductions, accumulated in double.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

}  // namespace fpnet::ops
