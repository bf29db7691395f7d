#include "fpnet/model.hpp"

namespace fpnet {

template <typename T>
Encoder<T>::Encoder(const nn::Builder<T>& b, const std::vector<std::size_t>& channels, std::size_t input_size)
    : input_size_(input_size) {
  std::size_t in = 3;
  for (std::size_t level = 0; level < 4; ++level) {
    const nn::Builder<T> stage = b.child("stage" + std::to_string(level + 1));
    const std::size_t out = channels[level];
    stages_[level].push_back(nn::bconv(stage.child("conv1"), in, out, 3, 2));
    stages_[level].push_back(nn::bconv(stage.child("conv2"), out, out, 3, level == 0 ? 2 : 1));
    in = out;
  }
}

template <typename T>
FeaturePyramid<T> Encoder<T>::forward(const Tensor<T>& image, const nn::Context& ctx) const {
  const Shape s = image.shape();
  if (s.c() != 3 || s.h() != input_size_ || s.w() != input_size_) {
    throw DimensionError("encoder expects (b,3," + std::to_string(input_size_) + "," + std::to_string(input_size_) +
                         ") images, got " + s.str());
  }
  Tensor<T> outs[4];
  Tensor<T> x = image;
  for (std::size_t level = 0; level < 4; ++level) {
    for (const auto& block : stages_[level]) x = block.forward(x, ctx);
    outs[level] = x;
  }
  return {outs[0], outs[1], outs[2], outs[3]};
}

template <typename T>
StageTwo<T>::StageTwo(const nn::Builder<T>& b, const FPNetConfig& cfg) : use_cfm_(cfg.use_cfm), use_hrp_(cfg.use_hrp) {
  const std::size_t w = cfg.cfm_width, d = cfg.ncd_width;
  reduce2_ = nn::bconv(b.child("reduce2"), cfg.channels[1], w, 1);
  reduce3_ = nn::bconv(b.child("reduce3"), cfg.channels[2], w, 1);
  reduce4_ = nn::bconv(b.child("reduce4"), cfg.channels[3], w, 1);
  if (use_cfm_) {
    cfm1_ = CFM<T>(b.child("cfm1"), w, cfg.bottleneck_width);
    cfm2_ = CFM<T>(b.child("cfm2"), w, cfg.bottleneck_width);
  } else {
    fuse3_ = nn::bconv(b.child("fuse3"), 2 * w, w, 3);
    fuse2_ = nn::bconv(b.child("fuse2"), 2 * w, w, 3);
  }
  s2_head_ = nn::Conv2d<T>(b.child("s2_head"), w, 1, 1);
  adapter_ = nn::Conv2d<T>(b.child("adapter"), w, d, 1);
  if (use_hrp_) {
    rfb_ = nn::RFB<T>(b.child("rfb"), cfg.channels[0], d);
    sam_ = nn::SAM<T>(b.child("sam"));
  }
  refine1_ = nn::bconv(b.child("refine1"), d, d, 3);
  refine2_ = nn::bconv(b.child("refine2"), d, d, 3);
  out_head_ = nn::Conv2d<T>(b.child("out_head"), d, 1, 1);
}

template <typename T>
Tensor<T> StageTwo<T>::fuse_plain(const nn::ConvBN<T>& conv, const Tensor<T>& current, const Tensor<T>& next,
                                  const nn::Context& ctx) const {
  return conv.forward(ops::concat_channels<T>({current, ops::upsample_nearest(next, 2)}), ctx);
}

template <typename T>
typename StageTwo<T>::Output StageTwo<T>::forward(const FeaturePyramid<T>& pyr, const Tensor<T>& s1,
                                                  const nn::Context& ctx) const {
  const Tensor<T> f2 = reduce2_.forward(pyr.x2, ctx);
  const Tensor<T> f3 = reduce3_.forward(pyr.x3, ctx);
  const Tensor<T> f4 = reduce4_.forward(pyr.x4, ctx);
  Output out;
  if (use_cfm_) {
    // S1 lives at level-2 resolution; the first correction gates level 4.
    const PriorMask<T> prior1(ops::avg_pool2(s1, 4));
    out.f3_out = cfm1_.forward(f3, f4, prior1, ctx);
    out.s2 = s2_head_.forward(out.f3_out);
    out.f2_out = cfm2_.forward(f2, out.f3_out, PriorMask<T>(out.s2), ctx);
  } else {
    out.f3_out = fuse_plain(fuse3_, f3, f4, ctx);
    out.s2 = s2_head_.forward(out.f3_out);
    out.f2_out = fuse_plain(fuse2_, f2, out.f3_out, ctx);
  }
  Tensor<T> z = adapter_.forward(out.f2_out);
  if (use_hrp_) z = ops::add(sam_.forward(rfb_.forward(pyr.x1, ctx)), ops::upsample_bilinear(z, 2));
  out.s_out = out_head_.forward(refine2_.forward(refine1_.forward(z, ctx), ctx));
  return out;
}

template <typename T>
FPNet<T>::FPNet(const FPNetConfig& cfg) : cfg_(cfg), init_rng_(cfg.seed) {
  cfg_.validate();
  const nn::Builder<T> root(params_, buffers_, init_rng_);
  encoder_ = Encoder<T>(root.child("encoder"), cfg_.channels, cfg_.input_size);
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string name = std::to_string(i + 2);
    const std::size_t in = cfg_.channels[i + 1];
    if (cfg_.use_fpm) {
      fpm_[i] = FPM<T>(root.child("fpm" + name), in, cfg_.ncd_width, cfg_.alpha_oct, cfg_.freq_mode);
    } else {
      plain_[i] = nn::bconv(root.child("plain" + name), in, cfg_.ncd_width, 3);
    }
  }
  ncd_ = NCD<T>(root.child("ncd"), cfg_.ncd_width);
  if (cfg_.has_stage_two()) stage_two_.emplace(root.child("stage2"), cfg_);
}

template <typename T>
FeaturePyramid<T> FPNet<T>::encode(const Tensor<T>& image, const nn::Context& ctx) const {
  return encoder_.forward(image, ctx);
}

template <typename T>
Tensor<T> FPNet<T>::level_feature(std::size_t level, const Tensor<T>& x, const nn::Context& ctx) const {
  return cfg_.use_fpm ? fpm_[level].forward(x, ctx) : plain_[level].forward(x, ctx);
}

template <typename T>
DecoderState<T> FPNet<T>::stage_one(const FeaturePyramid<T>& pyr, const nn::Context& ctx) const {
  return ncd_.forward(level_feature(0, pyr.x2, ctx), level_feature(1, pyr.x3, ctx), level_feature(2, pyr.x4, ctx),
                      ctx);
}

template <typename T>
Tensor<T> to_input_resolution(const Tensor<T>& logits, std::size_t size) {
  const std::size_t h = logits.shape().h();
  if (h == 0 || size % h != 0 || logits.shape().w() != h) {
    throw DimensionError("cannot upsample " + logits.shape().str() + " to " + std::to_string(size));
  }
  return ops::upsample_bilinear(logits, size / h);
}

template <typename T>
PredictionTriplet<T> FPNet<T>::forward(const Tensor<T>& image, const nn::Context& ctx) const {
  const FeaturePyramid<T> pyr = encode(image, ctx);
  const DecoderState<T> st = stage_one(pyr, ctx);
  const std::size_t size = cfg_.input_size;
  PredictionTriplet<T> out;
  out.s1 = to_input_resolution(st.s1_logits, size);
  if (stage_two_) {
    const auto two = stage_two_->forward(pyr, st.s1_logits, ctx);
    out.s2 = to_input_resolution(two.s2, size);
    out.s_output = to_input_resolution(two.s_out, size);
  } else {
    out.s2 = out.s1;
    out.s_output = out.s1;
  }
  return out;
}

template class Encoder<float>;
template class Encoder<double>;
template class StageTwo<float>;
template class StageTwo<double>;
template class FPNet<float>;
template class FPNet<double>;
template Tensor<float> to_input_resolution(const Tensor<float>&, std::size_t);
template Tensor<double> to_input_resolution(const Tensor<double>&, std::size_t);

}  // namespace fpnet
