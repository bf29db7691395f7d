#pragma once

// Shared helpers for the test binaries: random tensors, precision casts and
// a central-difference gradient checker.

#include <cstdio>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "fpnet/ops.hpp"
#include "fpnet/param_store.hpp"
#include "fpnet/tensor.hpp"

namespace testing {

using fpnet::Shape;
using fpnet::Tensor;

template <typename T>
Tensor<T> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<T> v(s.numel());
  for (auto& x : v) x = static_cast<T>(d(rng));
  return Tensor<T>::from(s, std::move(v));
}

// Values whose magnitude is at least `gap`: keeps ReLU-style kinks outside
// the finite-difference stencil.
template <typename T>
Tensor<T> random_away_from_zero(const Shape& s, std::mt19937_64& rng, double gap = 0.05) {
  std::uniform_real_distribution<double> d(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<T> v(s.numel());
  for (auto& x : v) x = static_cast<T>(sign(rng) ? d(rng) : -d(rng));
  return Tensor<T>::from(s, std::move(v));
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> v(t.numel());
  const auto src = t.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(src[i]);
  return Tensor<To>::from(t.shape(), std::move(v));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return m;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

inline double rel_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < 1e-8) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

struct GradReport {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;
  std::string worst_where;

  void add(double analytic, double numeric, double tol, const std::string& where) {
    const double e = rel_error(analytic, numeric);
    ++checked;
    if (e <= tol) ++passed;
    if (e > worst) {
      worst = e;
      char buf[96];
      std::snprintf(buf, sizeof buf, " analytic=%.6g numeric=%.6g", analytic, numeric);
      worst_where = where + buf;
    }
  }
  double pass_fraction() const { return checked == 0 ? 0.0 : static_cast<double>(passed) / checked; }
};

// Checks d/dx_i of L = sum(R * f(inputs)) for every coordinate of every input.
// The analytic side runs in precision A; the central differences (step h) are
// always evaluated through the double instantiation of the same function, so
// 32-bit analytic gradients are compared against a 64-bit numeric reference.
// `f` must be a generic callable usable with std::vector<Tensor<float>> and
// std::vector<Tensor<double>>.
template <typename A, typename F>
GradReport check_op_gradient(F&& f, const std::vector<Tensor<A>>& inputs, std::mt19937_64& rng,
                             double h = 1e-3, double tol = 1e-3) {
  std::vector<Tensor<A>> leaves;
  for (const auto& x : inputs) leaves.push_back(x.clone(true));
  Tensor<A> y = f(leaves);
  const Tensor<A> r = random_tensor<A>(y.shape(), rng);
  Tensor<A> loss = fpnet::ops::sum(fpnet::ops::mul(y, r));
  loss.backward();

  const Tensor<double> r64 = cast<double>(r);
  std::vector<Tensor<double>> probe;
  for (const auto& x : inputs) probe.push_back(cast<double>(x));
  auto objective = [&]() {
    fpnet::NoGradGuard guard;
    const Tensor<double> out = f(probe);
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += r64.data()[i] * out.data()[i];
    return s;
  };

  GradReport report;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    auto values = probe[k].mutable_data();
    const auto analytic = leaves[k].grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double x0 = values[i];
      values[i] = x0 + h;
      const double up = objective();
      values[i] = x0 - h;
      const double down = objective();
      values[i] = x0;
      report.add(analytic[i], (up - down) / (2 * h), tol, "input " + std::to_string(k) + "[" + std::to_string(i) + "]");
    }
  }
  return report;
}

// Central differences of a scalar loss with respect to sampled parameter
// coordinates. `loss` rebuilds the graph on every call.
template <typename T>
GradReport check_param_gradient(fpnet::ParamStore<T>& params, const std::function<Tensor<T>()>& loss,
                                std::size_t samples, std::mt19937_64& rng, double h = 1e-3, double tol = 1e-3) {
  params.zero_grad();
  loss().backward();

  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& [name, p] : params.tensors())
    for (std::size_t i = 0; i < p.numel(); ++i) coords.emplace_back(name, i);
  if (samples < coords.size()) {
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(samples);
  }

  GradReport report;
  for (const auto& [name, i] : coords) {
    Tensor<T>& p = params.at(name);
    const double analytic = p.grad()[i];
    auto values = p.mutable_data();
    const T x0 = values[i];
    double up, down;
    {
      fpnet::NoGradGuard guard;
      values[i] = static_cast<T>(x0 + h);
      up = loss().item();
      values[i] = static_cast<T>(x0 - h);
      down = loss().item();
    }
    const double step = static_cast<double>(static_cast<T>(x0 + h)) - static_cast<double>(static_cast<T>(x0 - h));
    values[i] = x0;
    report.add(analytic, (up - down) / step, tol, name + "[" + std::to_string(i) + "]");
  }
  params.zero_grad();
  return report;
}

}  // namespace testing
