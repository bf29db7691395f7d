#include "fpnet/param_store.hpp"

#include <cmath>

namespace fpnet {

template <typename T>
void TensorDict<T>::insert(std::string name, Tensor<T> tensor) {
  if (index_.contains(name)) throw UsageError("duplicate tensor name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(tensor));
}

template <typename T>
bool TensorDict<T>::contains(std::string_view name) const {
  return index_.contains(std::string(name));
}

template <typename T>
const Tensor<T>& TensorDict<T>::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw UsageError("unknown tensor name '" + std::string(name) + "'");
  return entries_[it->second].second;
}

template <typename T>
Tensor<T>& TensorDict<T>::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw UsageError("unknown tensor name '" + std::string(name) + "'");
  return entries_[it->second].second;
}

template <typename T>
Tensor<T> ParamStore<T>::add(std::string name, Tensor<T> tensor) {
  if (!tensor.is_leaf()) throw UsageError("parameter '" + name + "' must be a leaf tensor");
  tensor.set_requires_grad(true);
  const Shape shape = tensor.shape();
  params_.insert(name, tensor);
  first_.insert(name, Tensor<T>::zeros(shape));
  second_.insert(std::move(name), Tensor<T>::zeros(shape));
  return tensor;
}

template <typename T>
std::size_t ParamStore<T>::coordinate_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : params_) total += t.numel();
  return total;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

template <typename T>
void adam_step(ParamStore<T>& params, const AdamOptions& options) {
  for (const auto& [name, p] : params.tensors()) {
    if (!p.grad_ready()) throw UsageError("adam_step: parameter '" + name + "' has no gradient");
  }
  const std::size_t step = params.step_count() + 1;
  const double bc1 = 1.0 - std::pow(options.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(options.beta2, static_cast<double>(step));
  for (auto& [name, p] : params.tensors()) {
    auto value = p.mutable_data();
    const auto grad = p.grad();
    auto m = params.first_moment(name).mutable_data();
    auto v = params.second_moment(name).mutable_data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      double x = value[i];
      x -= options.lr * options.weight_decay * x;
      const double mi = options.beta1 * m[i] + (1.0 - options.beta1) * g;
      const double vi = options.beta2 * v[i] + (1.0 - options.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      x -= options.lr * (mi / bc1) / (std::sqrt(vi / bc2) + options.eps);
      value[i] = static_cast<T>(x);
    }
    require_finite(std::span<const T>(value.data(), value.size()), "adam_step");
  }
  params.set_step_count(step);
  params.zero_grad();
}

template class TensorDict<float>;
template class TensorDict<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template void adam_step(ParamStore<float>&, const AdamOptions&);
template void adam_step(ParamStore<double>&, const AdamOptions&);

}  // namespace fpnet
