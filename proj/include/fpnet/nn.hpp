#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <string_view>

#include "fpnet/ops.hpp"
#include "fpnet/param_store.hpp"

namespace fpnet::nn {

// Forward-pass phase. Training switches normalization to batch statistics
// (for batches larger than one) and lets it update running buffers.
struct Context {
  bool training = false;
};

enum class Init {
  fan_in_uniform,  // U(-b, b), b = sqrt(6 / fan_in)
  zeros,
};

// Creates named parameters and buffers under a dotted prefix.
template <typename T>
class Builder {
 public:
  Builder(ParamStore<T>& params, TensorDict<T>& buffers, std::mt19937_64& rng, std::string prefix = {});

  Builder child(std::string_view name) const;
  std::string qualified(std::string_view name) const;

  Tensor<T> param(std::string_view name, const Shape& shape, Init init, std::size_t fan_in);
  Tensor<T> constant_param(std::string_view name, const Shape& shape, T value);
  Tensor<T> buffer(std::string_view name, const Shape& shape, T value);

 private:
  ParamStore<T>* params_;
  TensorDict<T>* buffers_;
  std::mt19937_64* rng_;
  std::string prefix_;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const Builder<T>& b, std::size_t in, std::size_t out, std::size_t kernel, ops::ConvSpec spec = {},
         bool bias = true, Init init = Init::fan_in_uniform);

  Tensor<T> forward(const Tensor<T>& x) const { return ops::conv2d(x, weight_, bias_, spec_); }

  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }
  std::size_t out_channels() const { return weight_.shape().n(); }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
  ops::ConvSpec spec_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(const Builder<T>& b, std::size_t channels);

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) const;

  const Tensor<T>& gamma() const { return gamma_; }
  const Tensor<T>& beta() const { return beta_; }
  const Tensor<T>& running_mean() const { return running_mean_; }
  const Tensor<T>& running_var() const { return running_var_; }

 private:
  Tensor<T> gamma_, beta_;
  mutable Tensor<T> running_mean_, running_var_;
};

// conv (no bias) -> batch normalization -> optional ReLU, padding k/2 * dilation.
// With relu enabled this is the Bconv block.
template <typename T>
class ConvBN {
 public:
  ConvBN() = default;
  ConvBN(const Builder<T>& b, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
         std::size_t dilation = 1, bool relu = true);

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) const;

  const Conv2d<T>& conv() const { return conv_; }
  const BatchNorm2d<T>& bn() const { return bn_; }
  std::size_t out_channels() const { return conv_.out_channels(); }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  bool relu_ = true;
};

template <typename T>
ConvBN<T> bconv(const Builder<T>& b, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1) {
  return ConvBN<T>(b, in, out, kernel, stride, 1, true);
}

// High-resolution / half-resolution feature pair. A single-branch pair
// leaves the unused member undefined.
template <typename T>
struct FreqPair {
  Tensor<T> high;
  Tensor<T> low;
};

struct ChannelSplit {
  std::size_t high;
  std::size_t low;
};

// high = ceil((1 - alpha) * C), low = floor(alpha * C).
ChannelSplit split_channels(std::size_t channels, double alpha);

// Half of an extent, rounded up; odd extents pool with a partial edge window.
constexpr std::size_t half_extent(std::size_t e) { return (e + 1) / 2; }

template <typename T>
void check_freq_pair(const FreqPair<T>& pair, std::string_view where);

// Splits channels by alpha and average-pools the low group once.
template <typename T>
FreqPair<T> to_freq_pair(const Tensor<T>& x, double alpha);

enum class FreqBranches { both, high, low };

// Octave convolution over a FreqPair:
//   Y^H = conv(X^H; W_hh) + up2(conv(X^L; W_lh)) + b_h
//   Y^L = conv(X^L; W_ll) + conv(pool2(X^H); W_hl) + b_l
// The four path convolutions carry no bias of their own. Branches left out
// of `outputs` are neither computed nor parameterized.
template <typename T>
class OctaveConv {
 public:
  OctaveConv() = default;
  OctaveConv(const Builder<T>& b, std::size_t in_channels, std::size_t out_channels, double alpha,
             FreqBranches outputs = FreqBranches::both, std::size_t kernel = 3);

  FreqPair<T> forward(const FreqPair<T>& x) const;

  ChannelSplit in_split() const { return in_; }
  ChannelSplit out_split() const { return out_; }
  FreqBranches outputs() const { return outputs_; }
  bool has_high() const { return outputs_ != FreqBranches::low; }
  bool has_low() const { return outputs_ != FreqBranches::high; }

  const Tensor<T>& w_hh() const { return w_hh_; }
  const Tensor<T>& w_lh() const { return w_lh_; }
  const Tensor<T>& w_ll() const { return w_ll_; }
  const Tensor<T>& w_hl() const { return w_hl_; }
  const Tensor<T>& b_h() const { return b_h_; }
  const Tensor<T>& b_l() const { return b_l_; }

 private:
  ChannelSplit in_{}, out_{};
  FreqBranches outputs_ = FreqBranches::both;
  ops::ConvSpec spec_;
  Tensor<T> w_hh_, w_lh_, w_ll_, w_hl_, b_h_, b_l_;
};

// Receptive-field block: four parallel branches (1x1; 1x1 -> 3x3 with
// dilation 3, 5, 7), concatenated, fused by 1x1 conv+BN, plus a 1x1 conv+BN
// shortcut, then ReLU.
template <typename T>
class RFB {
 public:
  RFB() = default;
  RFB(const Builder<T>& b, std::size_t in, std::size_t out);

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) const;

 private:
  ConvBN<T> branch0_;
  ConvBN<T> reduce1_, dilated1_;
  ConvBN<T> reduce2_, dilated2_;
  ConvBN<T> reduce3_, dilated3_;
  ConvBN<T> fuse_, shortcut_;
};

// Spatial attention: [channel max, channel mean] -> 7x7 conv -> sigmoid,
// broadcast-multiplied onto the input.
template <typename T>
class SAM {
 public:
  SAM() = default;
  explicit SAM(const Builder<T>& b);

  Tensor<T> attention(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x) const { return ops::mul(x, attention(x)); }

  const Conv2d<T>& conv() const { return conv_; }

 private:
  Conv2d<T> conv_;
};

}  // namespace fpnet::nn
