#pragma once

#include "fpnet/nn.hpp"

namespace fpnet {

// Frequency perception module for one pyramid level: split into a
// frequency pair, octave-convolve, and fuse both branches back at the
// level's resolution and the decoder width.
//
//   f = bconv1x1_h(Y^H) + bconv1x1_l(up2(Y^L))
//
// In single-branch modes only the selected branch is built and fused.
template <typename T>
class FPM {
 public:
  FPM() = default;
  FPM(const nn::Builder<T>& b, std::size_t in_channels, std::size_t width, double alpha,
      nn::FreqBranches branches = nn::FreqBranches::both);

  Tensor<T> forward(const Tensor<T>& x, const nn::Context& ctx) const;

  nn::FreqPair<T> split(const Tensor<T>& x) const { return nn::to_freq_pair(x, alpha_); }
  const nn::OctaveConv<T>& octave() const { return octave_; }
  const nn::ConvBN<T>& high_adapter() const { return adapt_high_; }
  const nn::ConvBN<T>& low_adapter() const { return adapt_low_; }
  nn::FreqBranches branches() const { return branches_; }
  std::size_t width() const { return width_; }

 private:
  double alpha_ = 0.5;
  std::size_t in_channels_ = 0;
  std::size_t width_ = 0;
  nn::FreqBranches branches_ = nn::FreqBranches::both;
  nn::OctaveConv<T> octave_;
  nn::ConvBN<T> adapt_high_;
  nn::ConvBN<T> adapt_low_;
};

template <typename T>
struct DecoderState {
  Tensor<T> f4_prime;
  Tensor<T> f3_prime;
  Tensor<T> f2_prime;
  Tensor<T> s1_logits;  // single channel, level-2 resolution
};

// Neighbor connection decoder over the three top frequency features:
//   f4' = g(f4)
//   f3' = f3 * g(f4)
//   f2' = cat(f2 * g(f3'), cat(up2(f3'), up2(f4')))
// g is nearest x2 upsampling followed by a 3x3 Bconv; cat is channel
// concatenation followed by a 3x3 Bconv. S1 = conv1x1(f2').
template <typename T>
class NCD {
 public:
  NCD() = default;
  NCD(const nn::Builder<T>& b, std::size_t width);

  DecoderState<T> forward(const Tensor<T>& f2, const Tensor<T>& f3, const Tensor<T>& f4,
                          const nn::Context& ctx) const;

  // Nearest x2 upsampling followed by the given Bconv.
  static Tensor<T> up_conv(const nn::ConvBN<T>& conv, const Tensor<T>& x, const nn::Context& ctx);

  const nn::ConvBN<T>& up_f4() const { return up_f4_; }
  const nn::ConvBN<T>& up_f4_gate() const { return up_f4_gate_; }
  const nn::ConvBN<T>& up_f3_gate() const { return up_f3_gate_; }
  const nn::ConvBN<T>& cat_inner() const { return cat_inner_; }
  const nn::ConvBN<T>& cat_outer() const { return cat_outer_; }
  const nn::Conv2d<T>& head() const { return head_; }

 private:
  std::size_t width_ = 0;
  nn::ConvBN<T> up_f4_;       // f4'
  nn::ConvBN<T> up_f4_gate_;  // multiplier of f3
  nn::ConvBN<T> up_f3_gate_;  // multiplier of f2
  nn::ConvBN<T> cat_inner_;
  nn::ConvBN<T> cat_outer_;
  nn::Conv2d<T> head_;
};

}  // namespace fpnet
