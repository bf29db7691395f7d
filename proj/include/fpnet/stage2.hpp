#pragma once

#include "fpnet/nn.hpp"

namespace fpnet {

// Single-channel coarse logit map guiding a correction step.
template <typename T>
struct PriorMask {
  Tensor<T> logits;

  explicit PriorMask(Tensor<T> l) : logits(std::move(l)) {
    if (logits.shape().c() != 1) {
      throw UsageError("prior mask must have exactly one channel, got " + logits.shape().str());
    }
  }
};

template <typename T>
struct ModulationMaps {
  Tensor<T> affinity;  // (b,1,H,W) per-pixel channel similarity
  Tensor<T> alpha;     // (b,width,H,W)
  Tensor<T> beta;      // (b,width,H,W)
};

// f'_{i+1} = up2(F_{i+1} * sigmoid(S_g)), the single-channel gate broadcast
// across channels. S_g must already be at F_{i+1}'s resolution.
template <typename T>
Tensor<T> prior_correct(const Tensor<T>& next, const PriorMask<T>& prior);

// Correction fusion module for one level pair.
//
//   A          = (1/C) <F_i, f'_{i+1}>_channels
//   alpha,beta = conv3x3(bconv3x3(A))           (bottleneck of `bottleneck` channels)
//   out        = f'_{i+1} + bconv3x3(F_i) * alpha + beta
//
// The alpha/beta convolutions start at zero, so a fresh module returns the
// prior-corrected feature unchanged.
template <typename T>
class CFM {
 public:
  CFM() = default;
  CFM(const nn::Builder<T>& b, std::size_t width, std::size_t bottleneck);

  ModulationMaps<T> channel_correlate(const Tensor<T>& current, const Tensor<T>& corrected,
                                      const nn::Context& ctx) const;
  Tensor<T> modulate_fuse(const Tensor<T>& current, const Tensor<T>& corrected, const ModulationMaps<T>& maps,
                          const nn::Context& ctx) const;
  Tensor<T> forward(const Tensor<T>& current, const Tensor<T>& next, const PriorMask<T>& prior,
                    const nn::Context& ctx) const;

  const nn::ConvBN<T>& bottleneck() const { return bottleneck_; }
  const nn::Conv2d<T>& alpha_conv() const { return alpha_; }
  const nn::Conv2d<T>& beta_conv() const { return beta_; }
  const nn::ConvBN<T>& moduland() const { return moduland_; }
  std::size_t width() const { return width_; }

 private:
  void require_width(const Tensor<T>& x, const char* what) const;

  std::size_t width_ = 0;
  nn::ConvBN<T> bottleneck_;
  nn::Conv2d<T> alpha_;
  nn::Conv2d<T> beta_;
  nn::ConvBN<T> moduland_;
};

}  // namespace fpnet
