#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fpnet/errors.hpp"

namespace fpnet {

// Extents of a rank-4 (batch, channel, height, width) array.
struct Shape {
  std::array<std::size_t, 4> dims{0, 0, 0, 0};

  constexpr Shape() = default;
  constexpr Shape(std::size_t n, std::size_t c, std::size_t h, std::size_t w) : dims{n, c, h, w} {}

  // Per-channel vectors (biases, normalization statistics) are stored as (1,C,1,1).
  static constexpr Shape channels(std::size_t c) { return {1, c, 1, 1}; }
  static constexpr Shape scalar() { return {1, 1, 1, 1}; }

  constexpr std::size_t n() const { return dims[0]; }
  constexpr std::size_t c() const { return dims[1]; }
  constexpr std::size_t h() const { return dims[2]; }
  constexpr std::size_t w() const { return dims[3]; }
  constexpr std::size_t plane() const { return dims[2] * dims[3]; }
  constexpr std::size_t numel() const { return dims[0] * dims[1] * dims[2] * dims[3]; }

  constexpr bool operator==(const Shape&) const = default;

  std::string str() const;
};

template <typename T>
class Tensor;

// One recorded operation. `backward` receives the gradient flowing into the
// operation's output together with the output values, and accumulates into
// the grad buffers of `inputs`.
template <typename T>
struct GradNode {
  using Backward = std::function<void(std::span<const T> grad_out, std::span<const T> out)>;

  std::string op;
  std::vector<Tensor<T>> inputs;
  Backward backward;
};

// Dense tensor with shared ownership. Copies alias the same storage; use
// clone() for an independent copy. Values are immutable once an operation
// has produced them; only leaf tensors (parameters, inputs) may be edited.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<T> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t numel() const { return impl().shape.numel(); }

  std::span<const T> data() const { return impl().data; }
  // Leaf tensors only; results of recorded operations are read-only.
  std::span<T> mutable_data();

  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;
  T item() const;

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return impl().grad_fn == nullptr; }

  bool has_grad() const { return !impl().grad.empty(); }
  // True once backward has delivered a gradient since the last zero_grad().
  bool grad_ready() const { return impl().grad_ready; }
  std::span<const T> grad() const;
  // Allocates a zero buffer on first use and marks the gradient populated.
  // Gradient storage is shared by all copies, hence const.
  std::span<T> grad_buffer() const;
  void zero_grad();

  Tensor clone(bool requires_grad = false) const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<GradNode<T>>& grad_fn() const { return impl().grad_fn; }
  void set_grad_fn(std::shared_ptr<GradNode<T>> node);

  // Populates gradients of every reachable requires_grad tensor and clears
  // the recorded graph. The tensor must be a scalar produced by recorded ops.
  void backward();

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool grad_ready = false;
    bool graph_consumed = false;
    std::shared_ptr<GradNode<T>> grad_fn;
  };

  const Impl& impl() const;
  Impl& impl();

  std::shared_ptr<Impl> impl_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

// Recording is enabled by default; NoGradGuard disables it for the
// current thread (inference, finite-difference probes).
bool grad_mode_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace autograd {

// Wraps freshly computed values into a result tensor. Values are checked
// for finiteness; when recording is on and any input requires a gradient
// the backward closure is attached.
template <typename T>
Tensor<T> record(std::string_view op, const Shape& shape, std::vector<T> values,
                 std::vector<Tensor<T>> inputs, typename GradNode<T>::Backward backward);

}  // namespace autograd

void require_finite(std::span<const float> values, std::string_view where);
void require_finite(std::span<const double> values, std::string_view where);

}  // namespace fpnet
