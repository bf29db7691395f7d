#include "fpnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace fpnet {

std::string Shape::str() const {
  std::ostringstream os;
  os << '(' << dims[0] << ',' << dims[1] << ',' << dims[2] << ',' << dims[3] << ')';
  return os.str();
}

namespace {
thread_local bool g_grad_mode = true;

template <typename T>
void require_finite_impl(std::span<const T> values, std::string_view where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << where << " produced a non-finite value at flat index " << i;
      throw NumericError(os.str());
    }
  }
}
}  // namespace

void require_finite(std::span<const float> values, std::string_view where) {
  require_finite_impl(values, where);
}
void require_finite(std::span<const double> values, std::string_view where) {
  require_finite_impl(values, where);
}

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

template <typename T>
const typename Tensor<T>::Impl& Tensor<T>::impl() const {
  if (!impl_) throw UsageError("access to an undefined tensor");
  return *impl_;
}

template <typename T>
typename Tensor<T>::Impl& Tensor<T>::impl() {
  if (!impl_) throw UsageError("access to an undefined tensor");
  return *impl_;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  return from(shape, std::vector<T>(shape.numel(), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> values, bool requires_grad) {
  if (values.size() != shape.numel()) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape.str());
  }
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = shape;
  t.impl_->data = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!is_leaf()) throw UsageError("values of an operation result are immutable");
  return impl().data;
}

template <typename T>
T Tensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
  const Shape& s = shape();
  if (n >= s.n() || c >= s.c() || h >= s.h() || w >= s.w()) {
    throw DimensionError("index out of range for shape " + s.str());
  }
  return impl().data[((n * s.c() + c) * s.h() + h) * s.w() + w];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on a tensor with shape " + shape().str());
  return impl().data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (!is_leaf()) throw UsageError("requires_grad can only be changed on leaf tensors");
  impl().requires_grad = on;
  if (!on) {
    impl().grad.clear();
    impl().grad_ready = false;
  }
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (impl().grad.empty()) throw UsageError("tensor has no gradient buffer");
  return impl().grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() const {
  if (!impl_) throw UsageError("access to an undefined tensor");
  Impl& self = *impl_;
  if (self.grad.empty()) self.grad.assign(self.data.size(), T(0));
  self.grad_ready = true;
  return self.grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  Impl& self = impl();
  std::fill(self.grad.begin(), self.grad.end(), T(0));
  self.grad_ready = false;
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return from(shape(), std::vector<T>(impl().data), requires_grad);
}

template <typename T>
void Tensor<T>::set_grad_fn(std::shared_ptr<GradNode<T>> node) {
  impl().grad_fn = std::move(node);
  if (impl().grad_fn) impl().requires_grad = true;
}

template <typename T>
void Tensor<T>::backward() {
  Impl& root = impl();
  if (root.shape.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + root.shape.str());
  }
  if (root.graph_consumed) {
    throw UsageError("backward() called twice on the same graph; re-run the forward pass first");
  }
  if (!root.grad_fn) {
    if (!root.requires_grad) throw UsageError("backward() on a tensor without a recorded graph");
    grad_buffer()[0] += T(1);
    root.graph_consumed = true;
    return;
  }

  // Post-order over interior nodes: every tensor appears after all tensors
  // it was computed from. Shared ownership keeps nodes alive while the graph
  // is being released.
  std::vector<std::shared_ptr<Impl>> order;
  std::unordered_set<const Impl*> seen;
  struct Frame {
    std::shared_ptr<Impl> node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_, 0});
  seen.insert(impl_.get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    const auto& inputs = top.node->grad_fn->inputs;
    if (top.next < inputs.size()) {
      const auto& child = inputs[top.next++].impl_;
      if (child && child->grad_fn && seen.insert(child.get()).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(top.node);
    stack.pop_back();
  }

  root.grad.assign(1, T(1));
  root.grad_ready = true;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl& node = **it;
    if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
    node.grad_fn->backward(std::span<const T>(node.grad), std::span<const T>(node.data));
    // Interior gradients are transient.
    node.grad.clear();
    node.grad.shrink_to_fit();
    node.grad_ready = false;
    node.grad_fn.reset();
  }
  root.graph_consumed = true;
}

namespace autograd {

template <typename T>
Tensor<T> record(std::string_view op, const Shape& shape, std::vector<T> values,
                 std::vector<Tensor<T>> inputs, typename GradNode<T>::Backward backward) {
  require_finite(std::span<const T>(values), op);
  Tensor<T> out = Tensor<T>::from(shape, std::move(values));
  if (!grad_mode_enabled()) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
  if (!needs) return out;
  auto node = std::make_shared<GradNode<T>>();
  node->op = std::string(op);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.set_grad_fn(std::move(node));
  return out;
}

template Tensor<float> record<float>(std::string_view, const Shape&, std::vector<float>,
                                     std::vector<Tensor<float>>, GradNode<float>::Backward);
template Tensor<double> record<double>(std::string_view, const Shape&, std::vector<double>,
                                       std::vector<Tensor<double>>, GradNode<double>::Backward);

}  // namespace autograd

template class Tensor<float>;
template class Tensor<double>;

}  // namespace fpnet
