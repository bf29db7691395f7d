#include "fpnet/nn.hpp"

#include <cmath>

namespace fpnet::nn {

template <typename T>
Builder<T>::Builder(ParamStore<T>& params, TensorDict<T>& buffers, std::mt19937_64& rng, std::string prefix)
    : params_(&params), buffers_(&buffers), rng_(&rng), prefix_(std::move(prefix)) {}

template <typename T>
Builder<T> Builder<T>::child(std::string_view name) const {
  return Builder(*params_, *buffers_, *rng_, qualified(name));
}

template <typename T>
std::string Builder<T>::qualified(std::string_view name) const {
  if (prefix_.empty()) return std::string(name);
  return prefix_ + "." + std::string(name);
}

template <typename T>
Tensor<T> Builder<T>::param(std::string_view name, const Shape& shape, Init init, std::size_t fan_in) {
  std::vector<T> values(shape.numel(), T(0));
  if (init == Init::fan_in_uniform) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in == 0 ? 1 : fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : values) v = static_cast<T>(dist(*rng_));
  }
  return params_->add(qualified(name), Tensor<T>::from(shape, std::move(values)));
}

template <typename T>
Tensor<T> Builder<T>::constant_param(std::string_view name, const Shape& shape, T value) {
  return params_->add(qualified(name), Tensor<T>::full(shape, value));
}

template <typename T>
Tensor<T> Builder<T>::buffer(std::string_view name, const Shape& shape, T value) {
  Tensor<T> t = Tensor<T>::full(shape, value);
  buffers_->insert(qualified(name), t);
  return t;
}

template <typename T>
Conv2d<T>::Conv2d(const Builder<T>& b, std::size_t in, std::size_t out, std::size_t kernel, ops::ConvSpec spec,
                  bool bias, Init init)
    : spec_(spec) {
  Builder<T> scope = b;
  weight_ = scope.param("weight", Shape{out, in, kernel, kernel}, init, in * kernel * kernel);
  if (bias) bias_ = scope.constant_param("bias", Shape::channels(out), T(0));
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(const Builder<T>& b, std::size_t channels) {
  Builder<T> scope = b;
  gamma_ = scope.constant_param("gamma", Shape::channels(channels), T(1));
  beta_ = scope.constant_param("beta", Shape::channels(channels), T(0));
  running_mean_ = scope.buffer("running_mean", Shape::channels(channels), T(0));
  running_var_ = scope.buffer("running_var", Shape::channels(channels), T(1));
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, const Context& ctx) const {
  ops::BatchNormSpec spec;
  spec.training = ctx.training;
  return ops::batch_norm(x, gamma_, beta_, running_mean_, running_var_, spec);
}

template <typename T>
ConvBN<T>::ConvBN(const Builder<T>& b, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                  std::size_t dilation, bool relu)
    : conv_(b.child("conv"), in, out, kernel, ops::ConvSpec{stride, dilation * (kernel / 2), dilation}, false),
      bn_(b.child("bn"), out),
      relu_(relu) {}

template <typename T>
Tensor<T> ConvBN<T>::forward(const Tensor<T>& x, const Context& ctx) const {
  Tensor<T> y = bn_.forward(conv_.forward(x), ctx);
  return relu_ ? ops::relu(y) : y;
}

ChannelSplit split_channels(std::size_t channels, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("octave split ratio must lie in (0,1)");
  const auto low = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(channels)));
  const std::size_t high = channels - low;
  if (channels < 2 || low == 0 || high == 0) {
    throw UsageError("cannot split " + std::to_string(channels) + " channels into two frequency groups");
  }
  return {high, low};
}

namespace {
ops::PoolEdge edge_for(const Shape& s) {
  return (s.h() % 2 != 0 || s.w() % 2 != 0) ? ops::PoolEdge::ceil : ops::PoolEdge::strict;
}
}  // namespace

template <typename T>
void check_freq_pair(const FreqPair<T>& pair, std::string_view where) {
  if (!pair.high.defined() || !pair.low.defined()) return;
  const Shape h = pair.high.shape();
  const Shape l = pair.low.shape();
  if (l.n() != h.n() || l.h() != half_extent(h.h()) || l.w() != half_extent(h.w())) {
    throw DimensionError(std::string(where) + ": low branch " + l.str() + " is not at half the resolution of " +
                         h.str());
  }
}

template <typename T>
FreqPair<T> to_freq_pair(const Tensor<T>& x, double alpha) {
  const Shape s = x.shape();
  if (s.c() < 2) throw UsageError("to_freq_pair needs at least two channels, got " + s.str());
  const ChannelSplit split = split_channels(s.c(), alpha);
  FreqPair<T> pair;
  pair.high = ops::slice_channels(x, 0, split.high);
  pair.low = ops::avg_pool2(ops::slice_channels(x, split.high, split.low), 2, edge_for(s));
  return pair;
}

template <typename T>
OctaveConv<T>::OctaveConv(const Builder<T>& b, std::size_t in_channels, std::size_t out_channels, double alpha,
                          FreqBranches outputs, std::size_t kernel)
    : in_(split_channels(in_channels, alpha)),
      out_(split_channels(out_channels, alpha)),
      outputs_(outputs),
      spec_{1, kernel / 2, 1} {
  Builder<T> scope = b;
  auto weight = [&](const char* name, std::size_t out, std::size_t in) {
    return scope.param(name, Shape{out, in, kernel, kernel}, Init::fan_in_uniform, in_channels * kernel * kernel);
  };
  if (has_high()) {
    w_hh_ = weight("w_hh", out_.high, in_.high);
    w_lh_ = weight("w_lh", out_.high, in_.low);
    b_h_ = scope.constant_param("b_h", Shape::channels(out_.high), T(0));
  }
  if (has_low()) {
    w_ll_ = weight("w_ll", out_.low, in_.low);
    w_hl_ = weight("w_hl", out_.low, in_.high);
    b_l_ = scope.constant_param("b_l", Shape::channels(out_.low), T(0));
  }
}

template <typename T>
FreqPair<T> OctaveConv<T>::forward(const FreqPair<T>& x) const {
  if (!x.high.defined() || !x.low.defined()) throw DimensionError("octave_conv needs both frequency branches");
  check_freq_pair(x, "octave_conv input");
  const Shape hs = x.high.shape();
  if (hs.c() != in_.high || x.low.shape().c() != in_.low) {
    throw DimensionError("octave_conv: expected " + std::to_string(in_.high) + "/" + std::to_string(in_.low) +
                         " channels, got " + hs.str() + " and " + x.low.shape().str());
  }
  const Tensor<T> none;
  FreqPair<T> y;
  if (has_high()) {
    Tensor<T> same = ops::conv2d(x.high, w_hh_, none, spec_);
    Tensor<T> from_low = ops::upsample_nearest_to(ops::conv2d(x.low, w_lh_, none, spec_), 2, hs.h(), hs.w());
    y.high = ops::add_bias(ops::add(same, from_low), b_h_);
  }
  if (has_low()) {
    Tensor<T> same = ops::conv2d(x.low, w_ll_, none, spec_);
    Tensor<T> from_high = ops::conv2d(ops::avg_pool2(x.high, 2, edge_for(hs)), w_hl_, none, spec_);
    y.low = ops::add_bias(ops::add(same, from_high), b_l_);
  }
  check_freq_pair(y, "octave_conv output");
  return y;
}

template <typename T>
RFB<T>::RFB(const Builder<T>& b, std::size_t in, std::size_t out)
    : branch0_(b.child("b0"), in, out, 1),
      reduce1_(b.child("b1.reduce"), in, out, 1),
      dilated1_(b.child("b1.dilated"), out, out, 3, 1, 3),
      reduce2_(b.child("b2.reduce"), in, out, 1),
      dilated2_(b.child("b2.dilated"), out, out, 3, 1, 5),
      reduce3_(b.child("b3.reduce"), in, out, 1),
      dilated3_(b.child("b3.dilated"), out, out, 3, 1, 7),
      fuse_(b.child("fuse"), 4 * out, out, 1, 1, 1, false),
      shortcut_(b.child("shortcut"), in, out, 1, 1, 1, false) {}

template <typename T>
Tensor<T> RFB<T>::forward(const Tensor<T>& x, const Context& ctx) const {
  Tensor<T> b0 = branch0_.forward(x, ctx);
  Tensor<T> b1 = dilated1_.forward(reduce1_.forward(x, ctx), ctx);
  Tensor<T> b2 = dilated2_.forward(reduce2_.forward(x, ctx), ctx);
  Tensor<T> b3 = dilated3_.forward(reduce3_.forward(x, ctx), ctx);
  Tensor<T> fused = fuse_.forward(ops::concat_channels<T>({b0, b1, b2, b3}), ctx);
  return ops::relu(ops::add(fused, shortcut_.forward(x, ctx)));
}

template <typename T>
SAM<T>::SAM(const Builder<T>& b) : conv_(b.child("conv"), 2, 1, 7, ops::ConvSpec{1, 3, 1}, false) {}

template <typename T>
Tensor<T> SAM<T>::attention(const Tensor<T>& x) const {
  Tensor<T> stats = ops::concat_channels<T>({ops::channel_max(x), ops::channel_mean(x)});
  return ops::sigmoid(conv_.forward(stats));
}

#define FPNET_INSTANTIATE_NN(T)                                              \
  template class Builder<T>;                                                 \
  template class Conv2d<T>;                                                  \
  template class BatchNorm2d<T>;                                             \
  template class ConvBN<T>;                                                  \
  template class OctaveConv<T>;                                              \
  template class RFB<T>;                                                     \
  template class SAM<T>;                                                     \
  template void check_freq_pair(const FreqPair<T>&, std::string_view);       \
  template FreqPair<T> to_freq_pair(const Tensor<T>&, double);

FPNET_INSTANTIATE_NN(float)
FPNET_INSTANTIATE_NN(double)

#undef FPNET_INSTANTIATE_NN

}  // namespace fpnet::nn
