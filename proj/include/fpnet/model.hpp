#pragma once

#include <cstdint>
#include <optional>
#include <random>

#include "fpnet/config.hpp"
#include "fpnet/stage1.hpp"
#include "fpnet/stage2.hpp"

namespace fpnet {

// Encoder levels X1..X4 at strides 4, 8, 16, 32.
template <typename T>
struct FeaturePyramid {
  Tensor<T> x1, x2, x3, x4;
};

// Single-channel logit maps at input resolution.
template <typename T>
struct PredictionTriplet {
  Tensor<T> s1;
  Tensor<T> s2;
  Tensor<T> s_output;
};

// Four stride-2 stages of stacked Bconv blocks. The first stage halves the
// resolution twice so that X1 sits at stride 4.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const nn::Builder<T>& b, const std::vector<std::size_t>& channels, std::size_t input_size);

  FeaturePyramid<T> forward(const Tensor<T>& image, const nn::Context& ctx) const;

 private:
  std::size_t input_size_ = 0;
  std::vector<nn::ConvBN<T>> stages_[4];
};

// Correction and refinement stage: three 1x1 reductions to the fusion width,
// two top-down fusions (CFM, or concatenation when CFM is switched off), the
// S2 head after the first fusion, and the refinement head
//   S_out = conv1x1(bconv(bconv(sam(rfb(X1)) + up(adapter(f2_out)))))
// where the RFB/SAM branch is present only with high-resolution
// preservation on.
template <typename T>
class StageTwo {
 public:
  struct Output {
    Tensor<T> s2;     // at level-3 resolution
    Tensor<T> s_out;  // at level-1 resolution with HRP, level-2 without
    Tensor<T> f3_out;
    Tensor<T> f2_out;
  };

  StageTwo() = default;
  StageTwo(const nn::Builder<T>& b, const FPNetConfig& cfg);

  Output forward(const FeaturePyramid<T>& pyr, const Tensor<T>& s1, const nn::Context& ctx) const;

 private:
  Tensor<T> fuse_plain(const nn::ConvBN<T>& conv, const Tensor<T>& current, const Tensor<T>& next,
                       const nn::Context& ctx) const;

  bool use_cfm_ = true;
  bool use_hrp_ = true;
  nn::ConvBN<T> reduce2_, reduce3_, reduce4_;
  CFM<T> cfm1_, cfm2_;
  nn::ConvBN<T> fuse3_, fuse2_;
  nn::Conv2d<T> s2_head_;
  nn::Conv2d<T> adapter_;
  nn::RFB<T> rfb_;
  nn::SAM<T> sam_;
  nn::ConvBN<T> refine1_, refine2_;
  nn::Conv2d<T> out_head_;
};

template <typename T>
class FPNet {
 public:
  explicit FPNet(const FPNetConfig& cfg);
  FPNet(const FPNet&) = delete;
  FPNet& operator=(const FPNet&) = delete;

  FeaturePyramid<T> encode(const Tensor<T>& image, const nn::Context& ctx) const;
  // Frequency features f2, f3, f4 (or plain Bconv features without FPM) and the NCD state.
  DecoderState<T> stage_one(const FeaturePyramid<T>& pyr, const nn::Context& ctx) const;
  PredictionTriplet<T> forward(const Tensor<T>& image, const nn::Context& ctx) const;

  const FPNetConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  TensorDict<T>& buffers() { return buffers_; }
  const TensorDict<T>& buffers() const { return buffers_; }

 private:
  Tensor<T> level_feature(std::size_t level, const Tensor<T>& x, const nn::Context& ctx) const;

  FPNetConfig cfg_;
  ParamStore<T> params_;
  TensorDict<T> buffers_;
  std::mt19937_64 init_rng_;
  Encoder<T> encoder_;
  FPM<T> fpm_[3];
  nn::ConvBN<T> plain_[3];
  NCD<T> ncd_;
  std::optional<StageTwo<T>> stage_two_;
};

// Bilinear upsampling of a logit map to a square target extent.
template <typename T>
Tensor<T> to_input_resolution(const Tensor<T>& logits, std::size_t size);

}  // namespace fpnet
