#include "fpnet/stage2.hpp"

namespace fpnet {

template <typename T>
Tensor<T> prior_correct(const Tensor<T>& next, const PriorMask<T>& prior) {
  const Shape f = next.shape(), g = prior.logits.shape();
  if (g.n() != f.n() || g.h() != f.h() || g.w() != f.w()) {
    throw DimensionError("prior_correct: mask " + g.str() + " does not match feature " + f.str());
  }
  return ops::upsample_nearest(ops::mul(next, ops::sigmoid(prior.logits)), 2);
}

template <typename T>
CFM<T>::CFM(const nn::Builder<T>& b, std::size_t width, std::size_t bottleneck)
    : width_(width),
      bottleneck_(b.child("bottleneck"), 1, bottleneck, 3),
      alpha_(b.child("alpha"), bottleneck, width, 3, ops::ConvSpec{1, 1, 1}, true, nn::Init::zeros),
      beta_(b.child("beta"), bottleneck, width, 3, ops::ConvSpec{1, 1, 1}, true, nn::Init::zeros),
      moduland_(b.child("moduland"), width, width, 3) {}

template <typename T>
void CFM<T>::require_width(const Tensor<T>& x, const char* what) const {
  if (x.shape().c() != width_) {
    throw DimensionError(std::string("cfm: ") + what + " " + x.shape().str() + " does not have " +
                         std::to_string(width_) + " channels");
  }
}

template <typename T>
ModulationMaps<T> CFM<T>::channel_correlate(const Tensor<T>& current, const Tensor<T>& corrected,
                                            const nn::Context& ctx) const {
  require_width(current, "current feature");
  ModulationMaps<T> maps;
  maps.affinity = ops::channel_inner_product(current, corrected);
  Tensor<T> squeezed = bottleneck_.forward(maps.affinity, ctx);
  maps.alpha = alpha_.forward(squeezed);
  maps.beta = beta_.forward(squeezed);
  return maps;
}

template <typename T>
Tensor<T> CFM<T>::modulate_fuse(const Tensor<T>& current, const Tensor<T>& corrected, const ModulationMaps<T>& maps,
                                const nn::Context& ctx) const {
  require_width(current, "current feature");
  if (corrected.shape() != current.shape()) {
    throw DimensionError("cfm: corrected feature " + corrected.shape().str() + " does not match " +
                         current.shape().str());
  }
  return ops::add(corrected, ops::scale_shift(moduland_.forward(current, ctx), maps.alpha, maps.beta));
}

template <typename T>
Tensor<T> CFM<T>::forward(const Tensor<T>& current, const Tensor<T>& next, const PriorMask<T>& prior,
                          const nn::Context& ctx) const {
  require_width(next, "next feature");
  Tensor<T> corrected = prior_correct(next, prior);
  ModulationMaps<T> maps = channel_correlate(current, corrected, ctx);
  return modulate_fuse(current, corrected, maps, ctx);
}

template Tensor<float> prior_correct(const Tensor<float>&, const PriorMask<float>&);
template Tensor<double> prior_correct(const Tensor<double>&, const PriorMask<double>&);
template class CFM<float>;
template class CFM<double>;

}  // namespace fpnet
