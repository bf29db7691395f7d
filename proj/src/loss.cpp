#include "fpnet/loss.hpp"

#include <cmath>

namespace fpnet {

namespace {

template <typename T>
void check_pair(const Tensor<T>& logits, const Tensor<T>& gt, const Tensor<T>& weights, const char* op) {
  const Shape s = logits.shape();
  if (s.c() != 1 || gt.shape() != s || weights.shape() != s) {
    throw DimensionError(std::string(op) + ": logits " + s.str() + ", gt " + gt.shape().str() + " and weights " +
                         weights.shape().str() + " must be matching single-channel maps");
  }
  require_finite(logits.data(), op);
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

template <typename T>
Tensor<T> weight_map(const Tensor<T>& gt) {
  const Shape s = gt.shape();
  if (s.c() != 1) throw DimensionError("weight_map: gt must be single-channel, got " + s.str());
  const auto g = gt.data();
  for (T v : g) {
    if (!(v >= T(0) && v <= T(1))) throw DataError("weight_map: gt values must lie in [0,1]");
  }
  const std::size_t H = s.h(), W = s.w();
  const long r = 15;
  std::vector<T> out(s.numel());
  std::vector<double> integral((H + 1) * (W + 1));
  for (std::size_t n = 0; n < s.n(); ++n) {
    const T* img = g.data() + n * H * W;
    for (std::size_t i = 0; i < H; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < W; ++j) {
        row += img[i * W + j];
        integral[(i + 1) * (W + 1) + j + 1] = integral[i * (W + 1) + j + 1] + row;
      }
    }
    for (std::size_t i = 0; i < H; ++i) {
      const std::size_t i0 = static_cast<std::size_t>(std::max(0L, static_cast<long>(i) - r));
      const std::size_t i1 = std::min(H, i + r + 1);
      for (std::size_t j = 0; j < W; ++j) {
        const std::size_t j0 = static_cast<std::size_t>(std::max(0L, static_cast<long>(j) - r));
        const std::size_t j1 = std::min(W, j + r + 1);
        const double box = integral[i1 * (W + 1) + j1] - integral[i0 * (W + 1) + j1] -
                           integral[i1 * (W + 1) + j0] + integral[i0 * (W + 1) + j0];
        const double mean = box / static_cast<double>((i1 - i0) * (j1 - j0));
        out[n * H * W + i * W + j] = static_cast<T>(1.0 + 5.0 * std::abs(mean - img[i * W + j]));
      }
    }
  }
  return Tensor<T>::from(s, std::move(out));
}

template <typename T>
Tensor<T> weighted_bce(const Tensor<T>& logits, const Tensor<T>& gt, const Tensor<T>& weights) {
  check_pair(logits, gt, weights, "weighted_bce");
  const Shape s = logits.shape();
  const std::size_t plane = s.plane(), B = s.n();
  const auto x = logits.data(), g = gt.data(), w = weights.data();
  std::vector<double> wsum(B, 0.0);
  double total = 0;
  for (std::size_t n = 0; n < B; ++n) {
    double num = 0;
    for (std::size_t p = n * plane; p < (n + 1) * plane; ++p) {
      const double xi = x[p];
      const double bce = std::max(xi, 0.0) - xi * g[p] + std::log1p(std::exp(-std::abs(xi)));
      num += w[p] * bce;
      wsum[n] += w[p];
    }
    if (!(wsum[n] > 0)) throw DataError("weighted_bce: weights sum to zero");
    total += num / wsum[n];
  }
  std::vector<T> out{static_cast<T>(total / static_cast<double>(B))};
  return autograd::record<T>("weighted_bce", Shape::scalar(), std::move(out), {logits},
                             [logits, gt, weights, wsum](std::span<const T> gy, std::span<const T>) {
                               if (!logits.requires_grad()) return;
                               const std::size_t plane = logits.shape().plane();
                               const std::size_t B = logits.shape().n();
                               const auto x = logits.data(), g = gt.data(), w = weights.data();
                               auto gx = logits.grad_buffer();
                               const double up = gy[0];
                               for (std::size_t n = 0; n < B; ++n) {
                                 const double scale = up / (wsum[n] * static_cast<double>(B));
                                 for (std::size_t p = n * plane; p < (n + 1) * plane; ++p) {
                                   gx[p] += static_cast<T>(scale * w[p] * (stable_sigmoid(x[p]) - g[p]));
                                 }
                               }
                             });
}

template <typename T>
Tensor<T> weighted_iou(const Tensor<T>& logits, const Tensor<T>& gt, const Tensor<T>& weights) {
  check_pair(logits, gt, weights, "weighted_iou");
  const Shape s = logits.shape();
  const std::size_t plane = s.plane(), B = s.n();
  const auto x = logits.data(), g = gt.data(), w = weights.data();
  std::vector<double> inter(B, 0.0), uni(B, 0.0);
  double total = 0;
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t q = n * plane; q < (n + 1) * plane; ++q) {
      const double p = stable_sigmoid(x[q]);
      inter[n] += w[q] * p * g[q];
      uni[n] += w[q] * (p + g[q] - p * g[q]);
    }
    total += 1.0 - (inter[n] + 1.0) / (uni[n] + 1.0);
  }
  std::vector<T> out{static_cast<T>(total / static_cast<double>(B))};
  return autograd::record<T>("weighted_iou", Shape::scalar(), std::move(out), {logits},
                             [logits, gt, weights, inter, uni](std::span<const T> gy, std::span<const T>) {
                               if (!logits.requires_grad()) return;
                               const std::size_t plane = logits.shape().plane();
                               const std::size_t B = logits.shape().n();
                               const auto x = logits.data(), g = gt.data(), w = weights.data();
                               auto gx = logits.grad_buffer();
                               const double up = gy[0] / static_cast<double>(B);
                               for (std::size_t n = 0; n < B; ++n) {
                                 const double i1 = inter[n] + 1.0, u1 = uni[n] + 1.0;
                                 for (std::size_t q = n * plane; q < (n + 1) * plane; ++q) {
                                   const double p = stable_sigmoid(x[q]);
                                   // d/dp of -(I+1)/(U+1)
                                   const double dp = -(w[q] * g[q] * u1 - i1 * w[q] * (1.0 - g[q])) / (u1 * u1);
                                   gx[q] += static_cast<T>(up * dp * p * (1.0 - p));
                                 }
                               }
                             });
}

template <typename T>
MapLoss<T> map_loss(const Tensor<T>& logits, const Tensor<T>& gt, const Tensor<T>& weights) {
  MapLoss<T> m;
  m.bce = weighted_bce(logits, gt, weights);
  m.iou = weighted_iou(logits, gt, weights);
  m.total = ops::add(m.bce, m.iou);
  return m;
}

template <typename T>
LossBreakdown<T> total_loss(const PredictionTriplet<T>& preds, const Tensor<T>& gt) {
  const Tensor<T> w = weight_map(gt);
  LossBreakdown<T> out;
  out.s1 = map_loss(preds.s1, gt, w);
  out.s2 = map_loss(preds.s2, gt, w);
  out.s_output = map_loss(preds.s_output, gt, w);
  out.total = ops::add(ops::add(out.s1.total, out.s2.total), out.s_output.total);
  return out;
}

#define FPNET_INSTANTIATE_LOSS(T)                                                            \
  template Tensor<T> weight_map(const Tensor<T>&);                                           \
  template Tensor<T> weighted_bce(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> weighted_iou(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template MapLoss<T> map_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template struct LossBreakdown<T>;                                                          \
  template LossBreakdown<T> total_loss(const PredictionTriplet<T>&, const Tensor<T>&);

FPNET_INSTANTIATE_LOSS(float)
FPNET_INSTANTIATE_LOSS(double)

#undef FPNET_INSTANTIATE_LOSS

}  // namespace fpnet
