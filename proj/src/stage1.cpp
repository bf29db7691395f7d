#include "fpnet/stage1.hpp"

namespace fpnet {

template <typename T>
FPM<T>::FPM(const nn::Builder<T>& b, std::size_t in_channels, std::size_t width, double alpha,
            nn::FreqBranches branches)
    : alpha_(alpha),
      in_channels_(in_channels),
      width_(width),
      branches_(branches),
      octave_(b.child("oct"), in_channels, in_channels, alpha, branches) {
  if (octave_.has_high()) adapt_high_ = nn::ConvBN<T>(b.child("adapt_h"), octave_.out_split().high, width, 1);
  if (octave_.has_low()) adapt_low_ = nn::ConvBN<T>(b.child("adapt_l"), octave_.out_split().low, width, 1);
}

template <typename T>
Tensor<T> FPM<T>::forward(const Tensor<T>& x, const nn::Context& ctx) const {
  if (x.shape().c() != in_channels_) {
    throw DimensionError("fpm: expected " + std::to_string(in_channels_) + " channels, got " + x.shape().str());
  }
  const nn::FreqPair<T> y = octave_.forward(split(x));
  const Shape s = x.shape();
  Tensor<T> fused;
  if (octave_.has_high()) fused = adapt_high_.forward(y.high, ctx);
  if (octave_.has_low()) {
    Tensor<T> low = adapt_low_.forward(ops::upsample_nearest_to(y.low, 2, s.h(), s.w()), ctx);
    fused = fused.defined() ? ops::add(fused, low) : low;
  }
  return fused;
}

template <typename T>
NCD<T>::NCD(const nn::Builder<T>& b, std::size_t width)
    : width_(width),
      up_f4_(b.child("up4"), width, width, 3),
      up_f4_gate_(b.child("up4_gate"), width, width, 3),
      up_f3_gate_(b.child("up3_gate"), width, width, 3),
      cat_inner_(b.child("cat_inner"), 2 * width, width, 3),
      cat_outer_(b.child("cat_outer"), 2 * width, width, 3),
      head_(b.child("head"), width, 1, 1) {}

template <typename T>
Tensor<T> NCD<T>::up_conv(const nn::ConvBN<T>& conv, const Tensor<T>& x, const nn::Context& ctx) {
  return conv.forward(ops::upsample_nearest(x, 2), ctx);
}

template <typename T>
DecoderState<T> NCD<T>::forward(const Tensor<T>& f2, const Tensor<T>& f3, const Tensor<T>& f4,
                                const nn::Context& ctx) const {
  const Shape s2 = f2.shape(), s3 = f3.shape(), s4 = f4.shape();
  for (const Shape& s : {s2, s3, s4}) {
    if (s.c() != width_ || s.n() != s2.n()) {
      throw DimensionError("ncd: feature " + s.str() + " does not have decoder width " + std::to_string(width_));
    }
  }
  if (s3.h() * 2 != s2.h() || s3.w() * 2 != s2.w() || s4.h() * 2 != s3.h() || s4.w() * 2 != s3.w()) {
    throw DimensionError("ncd: resolutions " + s2.str() + " > " + s3.str() + " > " + s4.str() +
                         " are not a factor-2 chain");
  }
  DecoderState<T> st;
  st.f4_prime = up_conv(up_f4_, f4, ctx);
  st.f3_prime = ops::mul(f3, up_conv(up_f4_gate_, f4, ctx));
  Tensor<T> gated = ops::mul(f2, up_conv(up_f3_gate_, st.f3_prime, ctx));
  Tensor<T> inner = cat_inner_.forward(
      ops::concat_channels<T>({ops::upsample_nearest(st.f3_prime, 2), ops::upsample_nearest(st.f4_prime, 2)}), ctx);
  st.f2_prime = cat_outer_.forward(ops::concat_channels<T>({gated, inner}), ctx);
  st.s1_logits = head_.forward(st.f2_prime);
  return st;
}

template class FPM<float>;
template class FPM<double>;
template class NCD<float>;
template class NCD<double>;

}  // namespace fpnet
