#include "fpnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "fpnet/parallel.hpp"

namespace fpnet::ops {

namespace {

using isize = std::ptrdiff_t;

void require_rank_positive(const Shape& s, const char* op) {
  if (s.numel() == 0) throw DimensionError(std::string(op) + ": empty tensor " + s.str());
}

// Output positions o in [lo, hi) for which o*stride + offset lies in [0, extent).
// Convolution geometry for lowering to a (C*KH*KW) x (OH*OW) matrix whose
// row k = (ic*KH + kh)*KW + kw matches the weight layout.
struct ConvGeom {
  std::size_t C, H, W, KH, KW, OH, OW;
  isize S, P, D;
  std::size_t lowered_rows() const { return C * KH * KW; }
  std::size_t positions() const { return OH * OW; }
};

constexpr std::size_t kOutBlock = 4;

// Writes the lowered matrix of one image, zero where the window leaves the
// input. Row-major (k, position) or, when transposed, (position, k).
template <typename T>
void lower(const T* x, const ConvGeom& g, T* out, bool transposed) {
  const std::size_t K = g.lowered_rows(), PN = g.positions();
  for (std::size_t ic = 0; ic < g.C; ++ic)
    for (std::size_t kh = 0; kh < g.KH; ++kh)
      for (std::size_t kw = 0; kw < g.KW; ++kw) {
        const std::size_t k = (ic * g.KH + kh) * g.KW + kw;
        for (std::size_t oh = 0; oh < g.OH; ++oh) {
          const isize ih = static_cast<isize>(oh) * g.S + static_cast<isize>(kh) * g.D - g.P;
          const bool row_in = ih >= 0 && ih < static_cast<isize>(g.H);
          for (std::size_t ow = 0; ow < g.OW; ++ow) {
            const isize iw = static_cast<isize>(ow) * g.S + static_cast<isize>(kw) * g.D - g.P;
            const bool in = row_in && iw >= 0 && iw < static_cast<isize>(g.W);
            const T v = in ? x[(ic * g.H + static_cast<std::size_t>(ih)) * g.W + static_cast<std::size_t>(iw)] : T(0);
            const std::size_t q = oh * g.OW + ow;
            out[transposed ? q * K + k : k * PN + q] = v;
          }
        }
      }
}

// Scatter-adds a position-major lowered gradient back onto the input grid.
inline void raise(const double* gcol, const ConvGeom& g, double* acc) {
  const std::size_t K = g.lowered_rows();
  for (std::size_t oh = 0; oh < g.OH; ++oh)
    for (std::size_t ow = 0; ow < g.OW; ++ow) {
      const double* row = gcol + (oh * g.OW + ow) * K;
      for (std::size_t ic = 0; ic < g.C; ++ic)
        for (std::size_t kh = 0; kh < g.KH; ++kh) {
          const isize ih = static_cast<isize>(oh) * g.S + static_cast<isize>(kh) * g.D - g.P;
          if (ih < 0 || ih >= static_cast<isize>(g.H)) continue;
          for (std::size_t kw = 0; kw < g.KW; ++kw) {
            const isize iw = static_cast<isize>(ow) * g.S + static_cast<isize>(kw) * g.D - g.P;
            if (iw < 0 || iw >= static_cast<isize>(g.W)) continue;
            acc[(ic * g.H + static_cast<std::size_t>(ih)) * g.W + static_cast<std::size_t>(iw)] +=
                row[(ic * g.KH + kh) * g.KW + kw];
          }
        }
    }
}

// Result shape of an elementwise op over operands that either match or carry
// a single channel.
Shape broadcast_shape(const std::vector<Shape>& shapes, const char* op) {
  Shape out = shapes.front();
  for (const Shape& s : shapes) {
    if (s.n() != out.n() || s.h() != out.h() || s.w() != out.w()) {
      throw DimensionError(std::string(op) + ": incompatible shapes " + shapes.front().str() +
                           " and " + s.str());
    }
    if (s.c() != out.c()) {
      if (out.c() == 1) {
        out.dims[1] = s.c();
      } else if (s.c() != 1) {
        throw DimensionError(std::string(op) + ": channel extents " + std::to_string(out.c()) +
                             " and " + std::to_string(s.c()) + " are not broadcastable");
      }
    }
  }
  return out;
}

// Maps an output flat index onto an operand that is either full-shape or
// channel-broadcast.
struct Operand {
  bool broadcast;
  std::size_t channels;
  std::size_t plane;

  Operand(const Shape& operand, const Shape& out)
      : broadcast(operand.c() != out.c()), channels(out.c()), plane(out.plane()) {}

  std::size_t map(std::size_t i) const {
    if (!broadcast) return i;
    const std::size_t p = i % plane;
    const std::size_t n = i / (plane * channels);
    return n * plane + p;
  }
};

// Accumulates a gradient expressed at output shape into an operand's buffer,
// summing over broadcast channels in channel order.
template <typename T, typename Fn>
void accumulate_operand(const Tensor<T>& operand, const Shape& out, Fn&& grad_at) {
  if (!operand.requires_grad()) return;
  auto g = operand.grad_buffer();
  const Shape& s = operand.shape();
  if (s.c() == out.c()) {
    parallel_for(out.n() * out.c(), [&](std::size_t nc) {
      const std::size_t base = nc * out.plane();
      for (std::size_t p = 0; p < out.plane(); ++p) g[base + p] += T(grad_at(base + p));
    });
    return;
  }
  parallel_for(out.n(), [&](std::size_t n) {
    for (std::size_t p = 0; p < out.plane(); ++p) {
      double acc = 0.0;
      for (std::size_t c = 0; c < out.c(); ++c) acc += grad_at((n * out.c() + c) * out.plane() + p);
      g[n * out.plane() + p] += T(acc);
    }
  });
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const ConvSpec& spec) {
  if (spec.stride == 0 || spec.dilation == 0) throw UsageError("conv2d: stride and dilation must be positive");
  const std::size_t effective = spec.dilation * (kernel - 1) + 1;
  if (in + 2 * spec.padding < effective) {
    throw DimensionError("conv2d: kernel extent " + std::to_string(effective) +
                         " exceeds padded input extent " + std::to_string(in + 2 * spec.padding));
  }
  return (in + 2 * spec.padding - effective) / spec.stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec) {
  const Shape xs = input.shape();
  const Shape ws = weight.shape();
  require_rank_positive(xs, "conv2d");
  if (xs.c() != ws.c()) {
    throw DimensionError("conv2d: input has " + std::to_string(xs.c()) + " channels, weight " +
                         ws.str() + " expects " + std::to_string(ws.c()));
  }
  if (ws.h() % 2 == 0 || ws.w() % 2 == 0) {
    throw DimensionError("conv2d: kernel extents must be odd, got " + ws.str());
  }
  if (bias.defined() && bias.shape() != Shape::channels(ws.n())) {
    throw DimensionError("conv2d: bias shape " + bias.shape().str() + " does not match " +
                         std::to_string(ws.n()) + " output channels");
  }
  require_finite(input.data(), "conv2d input");

  const std::size_t N = xs.n(), C = xs.c(), H = xs.h(), W = xs.w();
  const std::size_t OC = ws.n(), KH = ws.h(), KW = ws.w();
  const std::size_t OH = conv_output_extent(H, KH, spec);
  const std::size_t OW = conv_output_extent(W, KW, spec);
  const isize S = static_cast<isize>(spec.stride);
  const isize P = static_cast<isize>(spec.padding);
  const isize D = static_cast<isize>(spec.dilation);
  const Shape out_shape{N, OC, OH, OW};

  const ConvGeom g{C, H, W, KH, KW, OH, OW, S, P, D};
  const std::size_t K = g.lowered_rows(), PN = g.positions();

  std::vector<T> out(out_shape.numel());
  {
    const T* x = input.data().data();
    const T* w = weight.data().data();
    const T* b = bias.defined() ? bias.data().data() : nullptr;
    std::vector<T> cols(N * K * PN);
    parallel_for(N, [&](std::size_t n) { lower(x + n * C * H * W, g, cols.data() + n * K * PN, false); });
    const std::size_t blocks = (OC + kOutBlock - 1) / kOutBlock;
    parallel_for(N * blocks, [&](std::size_t job) {
      const std::size_t n = job / blocks, oc0 = (job % blocks) * kOutBlock;
      const std::size_t cnt = std::min(kOutBlock, OC - oc0);
      std::vector<double> acc(kOutBlock * PN, 0.0);
      const T* col = cols.data() + n * K * PN;
      for (std::size_t k = 0; k < K; ++k) {
        const T* cr = col + k * PN;
        if (cnt == kOutBlock) {
          const double w0 = w[oc0 * K + k], w1 = w[(oc0 + 1) * K + k];
          const double w2 = w[(oc0 + 2) * K + k], w3 = w[(oc0 + 3) * K + k];
          double *a0 = acc.data(), *a1 = a0 + PN, *a2 = a1 + PN, *a3 = a2 + PN;
          for (std::size_t q = 0; q < PN; ++q) {
            const double c = static_cast<double>(cr[q]);
            a0[q] += w0 * c;
            a1[q] += w1 * c;
            a2[q] += w2 * c;
            a3[q] += w3 * c;
          }
        } else {
          for (std::size_t j = 0; j < cnt; ++j) {
            const double wv = w[(oc0 + j) * K + k];
            double* a = acc.data() + j * PN;
            for (std::size_t q = 0; q < PN; ++q) a[q] += wv * static_cast<double>(cr[q]);
          }
        }
      }
      for (std::size_t j = 0; j < cnt; ++j) {
        const double bv = b ? static_cast<double>(b[oc0 + j]) : 0.0;
        T* o = out.data() + (n * OC + oc0 + j) * PN;
        for (std::size_t q = 0; q < PN; ++q) o[q] = static_cast<T>(acc[j * PN + q] + bv);
      }
    });
  }

  return autograd::record<T>(
      "conv2d", out_shape, std::move(out), {input, weight, bias},
      [input, weight, bias, g, out_shape](std::span<const T> gy, std::span<const T>) mutable {
        const std::size_t N = out_shape.n(), OC = out_shape.c();
        const std::size_t C = g.C, H = g.H, W = g.W;
        const std::size_t K = g.lowered_rows(), PN = g.positions();
        const T* x = input.data().data();
        const T* w = weight.data().data();

        if (input.requires_grad()) {
          auto gx = input.grad_buffer();
          parallel_for(N, [&](std::size_t n) {
            // gradient of the lowered matrix, position-major
            std::vector<double> gcol(PN * K, 0.0);
            for (std::size_t q = 0; q < PN; ++q) {
              double* row = gcol.data() + q * K;
              for (std::size_t oc = 0; oc < OC; ++oc) {
                const double gv = gy[(n * OC + oc) * PN + q];
                const T* wr = w + oc * K;
                for (std::size_t k = 0; k < K; ++k) row[k] += gv * static_cast<double>(wr[k]);
              }
            }
            std::vector<double> acc(C * H * W, 0.0);
            raise(gcol.data(), g, acc.data());
            T* gp = gx.data() + n * C * H * W;
            for (std::size_t i = 0; i < acc.size(); ++i) gp[i] += static_cast<T>(acc[i]);
          });
        }

        if (weight.requires_grad()) {
          auto gw = weight.grad_buffer();
          std::vector<T> cols(N * PN * K);
          parallel_for(N, [&](std::size_t n) { lower(x + n * C * H * W, g, cols.data() + n * PN * K, true); });
          const std::size_t blocks = (OC + kOutBlock - 1) / kOutBlock;
          parallel_for(blocks, [&](std::size_t ob) {
            const std::size_t oc0 = ob * kOutBlock, cnt = std::min(kOutBlock, OC - oc0);
            std::vector<double> acc(kOutBlock * K, 0.0);
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t q = 0; q < PN; ++q) {
                const T* cr = cols.data() + (n * PN + q) * K;
                for (std::size_t j = 0; j < cnt; ++j) {
                  const double gv = gy[(n * OC + oc0 + j) * PN + q];
                  double* a = acc.data() + j * K;
                  for (std::size_t k = 0; k < K; ++k) a[k] += gv * static_cast<double>(cr[k]);
                }
              }
            for (std::size_t j = 0; j < cnt; ++j)
              for (std::size_t k = 0; k < K; ++k) gw[(oc0 + j) * K + k] += static_cast<T>(acc[j * K + k]);
          });
        }

        if (bias.defined() && bias.requires_grad()) {
          auto gb = bias.grad_buffer();
          for (std::size_t oc = 0; oc < OC; ++oc) {
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
              const T* gplane = gy.data() + (n * OC + oc) * PN;
              for (std::size_t i = 0; i < PN; ++i) acc += gplane[i];
            }
            gb[oc] += static_cast<T>(acc);
          }
        }
      });
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& input, std::size_t k, PoolEdge edge) {
  const Shape xs = input.shape();
  require_rank_positive(xs, "avg_pool2");
  if (k == 0) throw UsageError("avg_pool2: window must be positive");
  if (edge == PoolEdge::strict && (xs.h() % k != 0 || xs.w() % k != 0)) {
    throw DimensionError("avg_pool2: extents of " + xs.str() + " are not divisible by " + std::to_string(k));
  }
  const std::size_t OH = (xs.h() + k - 1) / k, OW = (xs.w() + k - 1) / k;
  const Shape out_shape{xs.n(), xs.c(), OH, OW};
  const std::size_t H = xs.h(), W = xs.w();
  std::vector<T> out(out_shape.numel());
  const T* x = input.data().data();
  parallel_for(xs.n() * xs.c(), [&](std::size_t nc) {
    const T* plane = x + nc * H * W;
    T* o = out.data() + nc * OH * OW;
    for (std::size_t oh = 0; oh < OH; ++oh) {
      const std::size_t h1 = std::min(oh * k + k, H);
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const std::size_t w1 = std::min(ow * k + k, W);
        double acc = 0.0;
        for (std::size_t h = oh * k; h < h1; ++h)
          for (std::size_t w = ow * k; w < w1; ++w) acc += plane[h * W + w];
        o[oh * OW + ow] = static_cast<T>(acc / static_cast<double>((h1 - oh * k) * (w1 - ow * k)));
      }
    }
  });
  return autograd::record<T>("avg_pool2", out_shape, std::move(out), {input},
                             [input, k, OH, OW](std::span<const T> gy, std::span<const T>) mutable {
                               const Shape xs = input.shape();
                               const std::size_t H = xs.h(), W = xs.w();
                               auto gx = input.grad_buffer();
                               parallel_for(xs.n() * xs.c(), [&](std::size_t nc) {
                                 const T* g = gy.data() + nc * OH * OW;
                                 T* gi = gx.data() + nc * H * W;
                                 for (std::size_t h = 0; h < H; ++h) {
                                   const std::size_t oh = h / k;
                                   const std::size_t rows = std::min(oh * k + k, H) - oh * k;
                                   for (std::size_t w = 0; w < W; ++w) {
                                     const std::size_t ow = w / k;
                                     const std::size_t cols = std::min(ow * k + k, W) - ow * k;
                                     gi[h * W + w] += static_cast<T>(static_cast<double>(g[oh * OW + ow]) /
                                                                     static_cast<double>(rows * cols));
                                   }
                                 }
                               });
                             });
}

template <typename T>
Tensor<T> upsample_nearest_to(const Tensor<T>& input, std::size_t s, std::size_t out_h, std::size_t out_w) {
  const Shape xs = input.shape();
  require_rank_positive(xs, "upsample_nearest");
  if (s == 0) throw UsageError("upsample_nearest: factor must be positive");
  if (out_h > xs.h() * s || out_w > xs.w() * s || out_h + s <= xs.h() * s || out_w + s <= xs.w() * s) {
    throw DimensionError("upsample_nearest: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " is not a crop of " + xs.str() + " scaled by " + std::to_string(s));
  }
  const Shape out_shape{xs.n(), xs.c(), out_h, out_w};
  const std::size_t H = xs.h(), W = xs.w();
  std::vector<T> out(out_shape.numel());
  const T* x = input.data().data();
  parallel_for(xs.n() * xs.c(), [&](std::size_t nc) {
    const T* plane = x + nc * H * W;
    T* o = out.data() + nc * out_h * out_w;
    for (std::size_t h = 0; h < out_h; ++h)
      for (std::size_t w = 0; w < out_w; ++w) o[h * out_w + w] = plane[(h / s) * W + w / s];
  });
  return autograd::record<T>("upsample_nearest", out_shape, std::move(out), {input},
                             [input, s, out_h, out_w](std::span<const T> gy, std::span<const T>) mutable {
                               const Shape xs = input.shape();
                               const std::size_t H = xs.h(), W = xs.w();
                               auto gx = input.grad_buffer();
                               parallel_for(xs.n() * xs.c(), [&](std::size_t nc) {
                                 const T* g = gy.data() + nc * out_h * out_w;
                                 T* gi = gx.data() + nc * H * W;
                                 for (std::size_t h = 0; h < H; ++h) {
                                   for (std::size_t w = 0; w < W; ++w) {
                                     double acc = 0.0;
                                     for (std::size_t dh = h * s; dh < std::min(h * s + s, out_h); ++dh)
                                       for (std::size_t dw = w * s; dw < std::min(w * s + s, out_w); ++dw)
                                         acc += g[dh * out_w + dw];
                                     gi[h * W + w] += static_cast<T>(acc);
                                   }
                                 }
                               });
                             });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& input, std::size_t s) {
  if (s == 0) throw UsageError("upsample_nearest: factor must be positive");
  return upsample_nearest_to(input, s, input.shape().h() * s, input.shape().w() * s);
}

namespace {

struct BilinearTap {
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<BilinearTap> bilinear_taps(std::size_t in, std::size_t s) {
  std::vector<BilinearTap> taps(in * s);
  for (std::size_t o = 0; o < in * s; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(s) - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double l1 = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - l1, l1};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, std::size_t s) {
  const Shape xs = input.shape();
  require_rank_positive(xs, "upsample_bilinear");
  if (s == 0) throw UsageError("upsample_bilinear: factor must be positive");
  const std::size_t H = xs.h(), W = xs.w(), OH = H * s, OW = W * s;
  const Shape out_shape{xs.n(), xs.c(), OH, OW};
  const auto rows = bilinear_taps(H, s);
  const auto cols = bilinear_taps(W, s);
  std::vector<T> out(out_shape.numel());
  const T* x = input.data().data();
  parallel_for(xs.n() * xs.c(), [&](std::size_t nc) {
    const T* plane = x + nc * H * W;
    T* o = out.data() + nc * OH * OW;
    for (std::size_t oh = 0; oh < OH; ++oh) {
      const BilinearTap& r = rows[oh];
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const BilinearTap& c = cols[ow];
        const double v = r.w0 * (c.w0 * plane[r.i0 * W + c.i0] + c.w1 * plane[r.i0 * W + c.i1]) +
                         r.w1 * (c.w0 * plane[r.i1 * W + c.i0] + c.w1 * plane[r.i1 * W + c.i1]);
        o[oh * OW + ow] = static_cast<T>(v);
      }
    }
  });
  return autograd::record<T>("upsample_bilinear", out_shape, std::move(out), {input},
                             [input, rows, cols](std::span<const T> gy, std::span<const T>) mutable {
                               const Shape xs = input.shape();
                               const std::size_t H = xs.h(), W = xs.w();
                               const std::size_t OH = rows.size(), OW = cols.size();
                               auto gx = input.grad_buffer();
                               parallel_for(xs.n() * xs.c(), [&](std::size_t nc) {
                                 std::vector<double> acc(H * W, 0.0);
                                 const T* g = gy.data() + nc * OH * OW;
                                 for (std::size_t oh = 0; oh < OH; ++oh) {
                                   const BilinearTap& r = rows[oh];
                                   for (std::size_t ow = 0; ow < OW; ++ow) {
                                     const BilinearTap& c = cols[ow];
                                     const double v = g[oh * OW + ow];
                                     acc[r.i0 * W + c.i0] += v * r.w0 * c.w0;
                                     acc[r.i0 * W + c.i1] += v * r.w0 * c.w1;
                                     acc[r.i1 * W + c.i0] += v * r.w1 * c.w0;
                                     acc[r.i1 * W + c.i1] += v * r.w1 * c.w1;
                                   }
                                 }
                                 T* gi = gx.data() + nc * H * W;
                                 for (std::size_t i = 0; i < H * W; ++i) gi[i] += static_cast<T>(acc[i]);
                               });
                             });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape out_shape = broadcast_shape({a.shape(), b.shape()}, "add");
  const Operand ma(a.shape(), out_shape), mb(b.shape(), out_shape);
  std::vector<T> out(out_shape.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[ma.map(i)] + bd[mb.map(i)];
  return autograd::record<T>("add", out_shape, std::move(out), {a, b},
                             [a, b, out_shape](std::span<const T> gy, std::span<const T>) mutable {
                               accumulate_operand(a, out_shape, [&](std::size_t i) { return gy[i]; });
                               accumulate_operand(b, out_shape, [&](std::size_t i) { return gy[i]; });
                             });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape out_shape = broadcast_shape({a.shape(), b.shape()}, "mul");
  const Operand ma(a.shape(), out_shape), mb(b.shape(), out_shape);
  std::vector<T> out(out_shape.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[ma.map(i)] * bd[mb.map(i)];
  return autograd::record<T>("mul", out_shape, std::move(out), {a, b},
                             [a, b, out_shape, ma, mb](std::span<const T> gy, std::span<const T>) mutable {
                               const auto ad = a.data();
                               const auto bd = b.data();
                               accumulate_operand(a, out_shape, [&](std::size_t i) {
                                 return static_cast<double>(gy[i]) * bd[mb.map(i)];
                               });
                               accumulate_operand(b, out_shape, [&](std::size_t i) {
                                 return static_cast<double>(gy[i]) * ad[ma.map(i)];
                               });
                             });
}

template <typename T>
Tensor<T> scale_shift(const Tensor<T>& x, const Tensor<T>& alpha, const Tensor<T>& beta) {
  const Shape out_shape = broadcast_shape({x.shape(), alpha.shape(), beta.shape()}, "scale_shift");
  const Operand mx(x.shape(), out_shape), ma(alpha.shape(), out_shape), mb(beta.shape(), out_shape);
  std::vector<T> out(out_shape.numel());
  const auto xd = x.data();
  const auto ad = alpha.data();
  const auto bd = beta.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[mx.map(i)] * ad[ma.map(i)] + bd[mb.map(i)];
  return autograd::record<T>(
      "scale_shift", out_shape, std::move(out), {x, alpha, beta},
      [x, alpha, beta, out_shape, mx, ma](std::span<const T> gy, std::span<const T>) mutable {
        const auto xd = x.data();
        const auto ad = alpha.data();
        accumulate_operand(x, out_shape, [&](std::size_t i) { return static_cast<double>(gy[i]) * ad[ma.map(i)]; });
        accumulate_operand(alpha, out_shape, [&](std::size_t i) { return static_cast<double>(gy[i]) * xd[mx.map(i)]; });
        accumulate_operand(beta, out_shape, [&](std::size_t i) { return gy[i]; });
      });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const Shape xs = x.shape();
  if (bias.shape() != Shape::channels(xs.c())) {
    throw DimensionError("add_bias: bias " + bias.shape().str() + " does not match input " + xs.str());
  }
  std::vector<T> out(xs.numel());
  const auto xd = x.data();
  const auto bd = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + bd[(i / xs.plane()) % xs.c()];
  return autograd::record<T>("add_bias", xs, std::move(out), {x, bias},
                             [x, bias](std::span<const T> gy, std::span<const T>) mutable {
                               const Shape xs = x.shape();
                               if (x.requires_grad()) {
                                 auto gx = x.grad_buffer();
                                 for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
                               }
                               if (bias.requires_grad()) {
                                 auto gb = bias.grad_buffer();
                                 for (std::size_t c = 0; c < xs.c(); ++c) {
                                   double acc = 0.0;
                                   for (std::size_t n = 0; n < xs.n(); ++n) {
                                     const T* g = gy.data() + (n * xs.c() + c) * xs.plane();
                                     for (std::size_t p = 0; p < xs.plane(); ++p) acc += g[p];
                                   }
                                   gb[c] += static_cast<T>(acc);
                                 }
                               }
                             });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xd[i];
    out[i] = static_cast<T>(v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)));
  }
  return autograd::record<T>("sigmoid", x.shape(), std::move(out), {x},
                             [x](std::span<const T> gy, std::span<const T> y) mutable {
                               auto gx = x.grad_buffer();
                               for (std::size_t i = 0; i < gy.size(); ++i) {
                                 const double s = y[i];
                                 gx[i] += static_cast<T>(gy[i] * s * (1.0 - s));
                               }
                             });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
  return autograd::record<T>("relu", x.shape(), std::move(out), {x},
                             [x](std::span<const T> gy, std::span<const T> y) mutable {
                               auto gx = x.grad_buffer();
                               for (std::size_t i = 0; i < gy.size(); ++i)
                                 if (y[i] > T(0)) gx[i] += gy[i];
                             });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_channels: no inputs");
  const Shape first = parts.front().shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.n() != first.n() || s.h() != first.h() || s.w() != first.w()) {
      throw DimensionError("concat_channels: " + s.str() + " is incompatible with " + first.str());
    }
    channels += s.c();
  }
  const Shape out_shape{first.n(), channels, first.h(), first.w()};
  const std::size_t plane = first.plane();
  std::vector<T> out(out_shape.numel());
  for (std::size_t n = 0; n < first.n(); ++n) {
    std::size_t c0 = 0;
    for (const auto& p : parts) {
      const std::size_t pc = p.shape().c();
      const auto src = p.data().subspan(n * pc * plane, pc * plane);
      std::copy(src.begin(), src.end(), out.begin() + static_cast<isize>((n * channels + c0) * plane));
      c0 += pc;
    }
  }
  return autograd::record<T>("concat_channels", out_shape, std::move(out), parts,
                             [parts, channels, plane](std::span<const T> gy, std::span<const T>) mutable {
                               std::size_t c0 = 0;
                               const std::size_t N = parts.front().shape().n();
                               for (auto& p : parts) {
                                 const std::size_t pc = p.shape().c();
                                 if (p.requires_grad()) {
                                   auto g = p.grad_buffer();
                                   for (std::size_t n = 0; n < N; ++n)
                                     for (std::size_t i = 0; i < pc * plane; ++i)
                                       g[n * pc * plane + i] += gy[(n * channels + c0) * plane + i];
                                 }
                                 c0 += pc;
                               }
                             });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const Shape xs = x.shape();
  if (count == 0 || begin + count > xs.c()) {
    throw DimensionError("slice_channels: [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") outside " + std::to_string(xs.c()) + " channels");
  }
  const Shape out_shape{xs.n(), count, xs.h(), xs.w()};
  const std::size_t plane = xs.plane();
  std::vector<T> out(out_shape.numel());
  const auto xd = x.data();
  for (std::size_t n = 0; n < xs.n(); ++n) {
    const auto src = xd.subspan((n * xs.c() + begin) * plane, count * plane);
    std::copy(src.begin(), src.end(), out.begin() + static_cast<isize>(n * count * plane));
  }
  return autograd::record<T>("slice_channels", out_shape, std::move(out), {x},
                             [x, begin, count, plane](std::span<const T> gy, std::span<const T>) mutable {
                               const Shape xs = x.shape();
                               auto g = x.grad_buffer();
                               for (std::size_t n = 0; n < xs.n(); ++n)
                                 for (std::size_t i = 0; i < count * plane; ++i)
                                   g[(n * xs.c() + begin) * plane + i] += gy[n * count * plane + i];
                             });
}

template <typename T>
Tensor<T> channel_inner_product(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape s = a.shape();
  if (b.shape() != s) {
    throw DimensionError("channel_inner_product: shapes " + s.str() + " and " + b.shape().str() + " differ");
  }
  require_rank_positive(s, "channel_inner_product");
  const Shape out_shape{s.n(), 1, s.h(), s.w()};
  const std::size_t plane = s.plane(), C = s.c();
  const double inv_c = 1.0 / static_cast<double>(C);
  std::vector<T> out(out_shape.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  parallel_for(s.n(), [&](std::size_t n) {
    for (std::size_t p = 0; p < plane; ++p) {
      double acc = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t i = (n * C + c) * plane + p;
        acc += static_cast<double>(ad[i]) * static_cast<double>(bd[i]);
      }
      out[n * plane + p] = static_cast<T>(acc * inv_c);
    }
  });
  return autograd::record<T>("channel_inner_product", out_shape, std::move(out), {a, b},
                             [a, b, inv_c](std::span<const T> gy, std::span<const T>) mutable {
                               const Shape s = a.shape();
                               const std::size_t plane = s.plane(), C = s.c();
                               auto grad_into = [&](const Tensor<T>& target, std::span<const T> other) {
                                 if (!target.requires_grad()) return;
                                 auto g = target.grad_buffer();
                                 for (std::size_t n = 0; n < s.n(); ++n)
                                   for (std::size_t c = 0; c < C; ++c)
                                     for (std::size_t p = 0; p < plane; ++p) {
                                       const std::size_t i = (n * C + c) * plane + p;
                                       g[i] += static_cast<T>(static_cast<double>(gy[n * plane + p]) * other[i] * inv_c);
                                     }
                               };
                               grad_into(a, b.data());
                               grad_into(b, a.data());
                             });
}

template <typename T>
Tensor<T> channel_max(const Tensor<T>& x) {
  const Shape s = x.shape();
  require_rank_positive(s, "channel_max");
  const Shape out_shape{s.n(), 1, s.h(), s.w()};
  const std::size_t plane = s.plane(), C = s.c();
  std::vector<T> out(out_shape.numel());
  std::vector<std::uint32_t> argmax(out_shape.numel());
  const auto xd = x.data();
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      T v = xd[n * C * plane + p];
      for (std::size_t c = 1; c < C; ++c) {
        const T candidate = xd[(n * C + c) * plane + p];
        if (candidate > v) {
          v = candidate;
          best = c;
        }
      }
      out[n * plane + p] = v;
      argmax[n * plane + p] = static_cast<std::uint32_t>(best);
    }
  }
  return autograd::record<T>("channel_max", out_shape, std::move(out), {x},
                             [x, argmax](std::span<const T> gy, std::span<const T>) mutable {
                               const Shape s = x.shape();
                               const std::size_t plane = s.plane(), C = s.c();
                               auto g = x.grad_buffer();
                               for (std::size_t n = 0; n < s.n(); ++n)
                                 for (std::size_t p = 0; p < plane; ++p)
                                   g[(n * C + argmax[n * plane + p]) * plane + p] += gy[n * plane + p];
                             });
}

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  const Shape s = x.shape();
  require_rank_positive(s, "channel_mean");
  const Shape out_shape{s.n(), 1, s.h(), s.w()};
  const std::size_t plane = s.plane(), C = s.c();
  std::vector<T> out(out_shape.numel());
  const auto xd = x.data();
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      double acc = 0.0;
      for (std::size_t c = 0; c < C; ++c) acc += xd[(n * C + c) * plane + p];
      out[n * plane + p] = static_cast<T>(acc / static_cast<double>(C));
    }
  }
  return autograd::record<T>("channel_mean", out_shape, std::move(out), {x},
                             [x](std::span<const T> gy, std::span<const T>) mutable {
                               const Shape s = x.shape();
                               const std::size_t plane = s.plane(), C = s.c();
                               auto g = x.grad_buffer();
                               for (std::size_t n = 0; n < s.n(); ++n)
                                 for (std::size_t c = 0; c < C; ++c)
                                   for (std::size_t p = 0; p < plane; ++p)
                                     g[(n * C + c) * plane + p] +=
                                         static_cast<T>(static_cast<double>(gy[n * plane + p]) / static_cast<double>(C));
                             });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormSpec& spec) {
  const Shape s = x.shape();
  require_rank_positive(s, "batch_norm");
  const Shape ch = Shape::channels(s.c());
  if (gamma.shape() != ch || beta.shape() != ch || running_mean.shape() != ch || running_var.shape() != ch) {
    throw DimensionError("batch_norm: parameters do not match " + std::to_string(s.c()) + " channels");
  }
  const std::size_t C = s.c(), plane = s.plane(), N = s.n();
  const std::size_t m = N * plane;
  const bool batch_stats = spec.training && N > 1;

  std::vector<double> mu(C), invstd(C);
  const auto xd = x.data();
  if (batch_stats) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < plane; ++p) acc += xd[(n * C + c) * plane + p];
      const double mean_c = acc / static_cast<double>(m);
      double sq = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = xd[(n * C + c) * plane + p] - mean_c;
          sq += d * d;
        }
      const double var = sq / static_cast<double>(m);
      mu[c] = mean_c;
      invstd[c] = 1.0 / std::sqrt(var + spec.eps);
      const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
      rm[c] = static_cast<T>((1.0 - spec.momentum) * rm[c] + spec.momentum * mean_c);
      rv[c] = static_cast<T>((1.0 - spec.momentum) * rv[c] + spec.momentum * unbiased);
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = rm[c];
      invstd[c] = 1.0 / std::sqrt(static_cast<double>(rv[c]) + spec.eps);
    }
  }

  std::vector<T> out(s.numel());
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double scale = gd[c] * invstd[c];
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (n * C + c) * plane + p;
        out[i] = static_cast<T>((xd[i] - mu[c]) * scale + bd[c]);
      }
    }

  return autograd::record<T>(
      "batch_norm", s, std::move(out), {x, gamma, beta},
      [x, gamma, beta, mu, invstd, batch_stats](std::span<const T> gy, std::span<const T>) mutable {
        const Shape s = x.shape();
        const std::size_t C = s.c(), plane = s.plane(), N = s.n();
        const double m = static_cast<double>(N * plane);
        const auto xd = x.data();
        const auto gd = gamma.data();
        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t i = (n * C + c) * plane + p;
              const double xhat = (xd[i] - mu[c]) * invstd[c];
              sum_g[c] += gy[i];
              sum_gx[c] += gy[i] * xhat;
            }
        if (gamma.requires_grad()) {
          auto g = gamma.grad_buffer();
          for (std::size_t c = 0; c < C; ++c) g[c] += static_cast<T>(sum_gx[c]);
        }
        if (beta.requires_grad()) {
          auto g = beta.grad_buffer();
          for (std::size_t c = 0; c < C; ++c) g[c] += static_cast<T>(sum_g[c]);
        }
        if (x.requires_grad()) {
          auto g = x.grad_buffer();
          for (std::size_t c = 0; c < C; ++c) {
            const double scale = gd[c] * invstd[c];
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = (n * C + c) * plane + p;
                if (batch_stats) {
                  const double xhat = (xd[i] - mu[c]) * invstd[c];
                  g[i] += static_cast<T>(scale * (gy[i] - sum_g[c] / m - xhat * sum_gx[c] / m));
                } else {
                  g[i] += static_cast<T>(scale * gy[i]);
                }
              }
          }
        }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  return autograd::record<T>("sum", Shape::scalar(), {static_cast<T>(acc)}, {x},
                             [x](std::span<const T> gy, std::span<const T>) mutable {
                               auto g = x.grad_buffer();
                               for (auto& v : g) v += gy[0];
                             });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  const double count = static_cast<double>(x.numel());
  return autograd::record<T>("mean", Shape::scalar(), {static_cast<T>(acc / count)}, {x},
                             [x, count](std::span<const T> gy, std::span<const T>) mutable {
                               auto g = x.grad_buffer();
                               const T share = static_cast<T>(static_cast<double>(gy[0]) / count);
                               for (auto& v : g) v += share;
                             });
}

#define FPNET_INSTANTIATE_OPS(T)                                                                        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvSpec&);    \
  template Tensor<T> avg_pool2(const Tensor<T>&, std::size_t, PoolEdge);                               \
  template Tensor<T> upsample_nearest(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> upsample_nearest_to(const Tensor<T>&, std::size_t, std::size_t, std::size_t);     \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> scale_shift(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                        \
  template Tensor<T> relu(const Tensor<T>&);                                                           \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                                   \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> channel_inner_product(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> channel_max(const Tensor<T>&);                                                    \
  template Tensor<T> channel_mean(const Tensor<T>&);                                                   \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,      \
                                Tensor<T>&, const BatchNormSpec&);                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                            \
  template Tensor<T> mean(const Tensor<T>&);

FPNET_INSTANTIATE_OPS(float)
FPNET_INSTANTIATE_OPS(double)

#undef FPNET_INSTANTIATE_OPS

}  // namespace fpnet::ops
