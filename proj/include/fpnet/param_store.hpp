#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fpnet/tensor.hpp"

namespace fpnet {

// Insertion-ordered, uniquely named tensors.
template <typename T>
class TensorDict {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  void insert(std::string name, Tensor<T> tensor);
  bool contains(std::string_view name) const;
  const Tensor<T>& at(std::string_view name) const;
  Tensor<T>& at(std::string_view name);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Learnable parameters plus Adam moment buffers, kept in lockstep.
template <typename T>
class ParamStore {
 public:
  // name must be unique; the tensor is marked requires_grad.
  Tensor<T> add(std::string name, Tensor<T> tensor);

  const TensorDict<T>& tensors() const { return params_; }
  TensorDict<T>& tensors() { return params_; }
  bool contains(std::string_view name) const { return params_.contains(name); }
  const Tensor<T>& at(std::string_view name) const { return params_.at(name); }
  Tensor<T>& at(std::string_view name) { return params_.at(name); }
  std::size_t size() const { return params_.size(); }
  std::size_t coordinate_count() const;

  Tensor<T>& first_moment(std::string_view name) { return first_.at(name); }
  Tensor<T>& second_moment(std::string_view name) { return second_.at(name); }
  const Tensor<T>& first_moment(std::string_view name) const { return first_.at(name); }
  const Tensor<T>& second_moment(std::string_view name) const { return second_.at(name); }

  std::size_t step_count() const { return steps_; }
  void set_step_count(std::size_t steps) { steps_ = steps; }

  void zero_grad();

 private:
  TensorDict<T> params_;
  TensorDict<T> first_;
  TensorDict<T> second_;
  std::size_t steps_ = 0;
};

struct AdamOptions {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One Adam update with decoupled weight decay, then zeroes the gradients.
// Every parameter must have received a gradient since the last step.
template <typename T>
void adam_step(ParamStore<T>& params, const AdamOptions& options);

}  // namespace fpnet
