#pragma once

// Direct-loop reference kernels on plain double arrays, independent of the
// library's ops.

#include <cmath>
#include <cstddef>
#include <vector>

#include "fpnet/nn.hpp"
#include "fpnet/tensor.hpp"

namespace oracle {

// Dense NCHW array in double.
struct Array {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Array() = default;
  Array(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_, double fill = 0.0)
      : n(n_), c(c_), h(h_), w(w_), v(n_ * c_ * h_ * w_, fill) {}
  double& at(std::size_t a, std::size_t b, std::size_t i, std::size_t j) { return v[((a * c + b) * h + i) * w + j]; }
  double at(std::size_t a, std::size_t b, std::size_t i, std::size_t j) const {
    return v[((a * c + b) * h + i) * w + j];
  }
};

template <typename T>
Array from(const fpnet::Tensor<T>& t) {
  const fpnet::Shape s = t.shape();
  Array a(s.n(), s.c(), s.h(), s.w());
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] = static_cast<double>(t.data()[i]);
  return a;
}

inline double max_abs_diff(const Array& a, const Array& b) {
  if (a.v.size() != b.v.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

// Zero-padded convolution; bias may be empty.
inline Array conv(const Array& x, const Array& wt, const std::vector<double>& bias, std::size_t stride,
                  std::size_t pad, std::size_t dil = 1) {
  const std::size_t oh = (x.h + 2 * pad - dil * (wt.h - 1) - 1) / stride + 1;
  const std::size_t ow = (x.w + 2 * pad - dil * (wt.w - 1) - 1) / stride + 1;
  Array y(x.n, wt.n, oh, ow);
  for (std::size_t n = 0; n < x.n; ++n)
    for (std::size_t o = 0; o < wt.n; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::size_t c = 0; c < x.c; ++c)
            for (std::size_t ki = 0; ki < wt.h; ++ki)
              for (std::size_t kj = 0; kj < wt.w; ++kj) {
                const long r = static_cast<long>(i * stride + ki * dil) - static_cast<long>(pad);
                const long q = static_cast<long>(j * stride + kj * dil) - static_cast<long>(pad);
                if (r < 0 || q < 0 || r >= static_cast<long>(x.h) || q >= static_cast<long>(x.w)) continue;
                acc += x.at(n, c, static_cast<std::size_t>(r), static_cast<std::size_t>(q)) * wt.at(o, c, ki, kj);
              }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

// 2x2 average pool; a partial far-edge window averages its in-bounds pixels.
inline Array pool2(const Array& x) {
  Array y(x.n, x.c, (x.h + 1) / 2, (x.w + 1) / 2);
  for (std::size_t n = 0; n < x.n; ++n)
    for (std::size_t c = 0; c < x.c; ++c)
      for (std::size_t i = 0; i < y.h; ++i)
        for (std::size_t j = 0; j < y.w; ++j) {
          double acc = 0;
          std::size_t cnt = 0;
          for (std::size_t a = 2 * i; a < std::min(2 * i + 2, x.h); ++a)
            for (std::size_t b = 2 * j; b < std::min(2 * j + 2, x.w); ++b, ++cnt) acc += x.at(n, c, a, b);
          y.at(n, c, i, j) = acc / static_cast<double>(cnt);
        }
  return y;
}

// Nearest upsampling by s, cropped to (oh, ow).
inline Array up_nearest(const Array& x, std::size_t s, std::size_t oh, std::size_t ow) {
  Array y(x.n, x.c, oh, ow);
  for (std::size_t n = 0; n < x.n; ++n)
    for (std::size_t c = 0; c < x.c; ++c)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) y.at(n, c, i, j) = x.at(n, c, i / s, j / s);
  return y;
}

inline Array up_nearest(const Array& x, std::size_t s) { return up_nearest(x, s, x.h * s, x.w * s); }

inline Array add(const Array& a, const Array& b) {
  Array y = a;
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += b.v[i];
  return y;
}

inline Array mul(const Array& a, const Array& b) {
  Array y = a;
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] *= b.v[i];
  return y;
}

inline Array concat(const Array& a, const Array& b) {
  Array y(a.n, a.c + b.c, a.h, a.w);
  for (std::size_t n = 0; n < a.n; ++n)
    for (std::size_t i = 0; i < a.h; ++i)
      for (std::size_t j = 0; j < a.w; ++j) {
        for (std::size_t c = 0; c < a.c; ++c) y.at(n, c, i, j) = a.at(n, c, i, j);
        for (std::size_t c = 0; c < b.c; ++c) y.at(n, a.c + c, i, j) = b.at(n, c, i, j);
      }
  return y;
}

inline Array slice(const Array& x, std::size_t begin, std::size_t count) {
  Array y(x.n, count, x.h, x.w);
  for (std::size_t n = 0; n < x.n; ++n)
    for (std::size_t c = 0; c < count; ++c)
      for (std::size_t i = 0; i < x.h; ++i)
        for (std::size_t j = 0; j < x.w; ++j) y.at(n, c, i, j) = x.at(n, begin + c, i, j);
  return y;
}

inline Array relu(const Array& x) {
  Array y = x;
  for (auto& v : y.v) v = v > 0 ? v : 0;
  return y;
}

inline Array sigmoid(const Array& x) {
  Array y = x;
  for (auto& v : y.v) v = 1.0 / (1.0 + std::exp(-v));
  return y;
}

// Inference-mode batch norm with running statistics.
inline Array bn(const Array& x, const std::vector<double>& gamma, const std::vector<double>& beta,
                const std::vector<double>& mean, const std::vector<double>& var, double eps = 1e-5) {
  Array y = x;
  for (std::size_t n = 0; n < x.n; ++n)
    for (std::size_t c = 0; c < x.c; ++c)
      for (std::size_t i = 0; i < x.h; ++i)
        for (std::size_t j = 0; j < x.w; ++j)
          y.at(n, c, i, j) = gamma[c] * (x.at(n, c, i, j) - mean[c]) / std::sqrt(var[c] + eps) + beta[c];
  return y;
}

template <typename T>
std::vector<double> vec(const fpnet::Tensor<T>& t) {
  std::vector<double> v(t.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(t.data()[i]);
  return v;
}

// Y^H = conv(X^H; W_hh) + up(conv(X^L; W_lh)) + b_h
// Y^L = conv(X^L; W_ll) + conv(pool(X^H); W_hl) + b_l
inline std::pair<Array, Array> octave(const Array& xh, const Array& xl, const fpnet::nn::OctaveConv<float>& oc) {
  const std::size_t pad = oc.w_hh().shape().h() / 2;
  Array yh = add(conv(xh, from(oc.w_hh()), vec(oc.b_h()), 1, pad),
                 up_nearest(conv(xl, from(oc.w_lh()), {}, 1, pad), 2, xh.h, xh.w));
  Array yl = add(conv(xl, from(oc.w_ll()), vec(oc.b_l()), 1, pad), conv(pool2(xh), from(oc.w_hl()), {}, 1, pad));
  return {yh, yl};
}

}  // namespace oracle
