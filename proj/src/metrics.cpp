#include "fpnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>

#include "fpnet/errors.hpp"
#include "fpnet/image_io.hpp"
#include "fpnet/parallel.hpp"

namespace fpnet {

namespace {

constexpr double kEps = 2.220446049250313e-16;

void check_inputs(const Map2D& pred, const Map2D& gt, const char* metric) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError(std::string(metric) + ": prediction " + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " does not match ground truth " + std::to_string(gt.height) +
                         "x" + std::to_string(gt.width));
  }
  if (gt.size() == 0) throw DimensionError(std::string(metric) + ": empty map");
  for (double g : gt.values) {
    if (g != 0.0 && g != 1.0) throw DataError(std::string(metric) + ": ground truth must be binary");
  }
  for (double p : pred.values) {
    if (!(p >= 0.0 && p <= 1.0)) throw DataError(std::string(metric) + ": prediction values must lie in [0,1]");
  }
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Foreground similarity 2x / (x^2 + 1 + sigma_x) over the pixels where mask holds.
double object_score(const Map2D& values, const Map2D& mask, double mask_value) {
  std::vector<double> sel;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (mask.values[i] == mask_value) sel.push_back(values.values[i]);
  if (sel.empty()) return 0.0;
  const double x = mean_of(sel);
  double var = 0;
  for (double v : sel) var += (v - x) * (v - x);
  const double sigma = sel.size() > 1 ? std::sqrt(var / static_cast<double>(sel.size() - 1)) : 0.0;
  return 2.0 * x / (x * x + 1.0 + sigma + kEps);
}

double s_object(const Map2D& pred, const Map2D& gt) {
  Map2D fg(pred.height, pred.width), bg(pred.height, pred.width);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    fg.values[i] = gt.values[i] == 1.0 ? pred.values[i] : 0.0;
    bg.values[i] = gt.values[i] == 0.0 ? 1.0 - pred.values[i] : 0.0;
  }
  const double u = mean_of(gt.values);
  return u * object_score(fg, gt, 1.0) + (1.0 - u) * object_score(bg, gt, 0.0);
}

// SSIM-style similarity of one block [r0,r1) x [c0,c1).
double block_ssim(const Map2D& pred, const Map2D& gt, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  const std::size_t n = (r1 - r0) * (c1 - c0);
  if (n == 0) return 0.0;
  double x = 0, y = 0;
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) {
      x += pred(r, c);
      y += gt(r, c);
    }
  x /= static_cast<double>(n);
  y /= static_cast<double>(n);
  double sx = 0, sy = 0, sxy = 0;
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) {
      const double dx = pred(r, c) - x, dy = gt(r, c) - y;
      sx += dx * dx;
      sy += dy * dy;
      sxy += dx * dy;
    }
  const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
  sx /= denom;
  sy /= denom;
  sxy /= denom;
  const double alpha = 4.0 * x * y * sxy;
  const double beta = (x * x + y * y) * (sx + sy);
  if (alpha != 0.0) return alpha / (beta + kEps);
  if (beta == 0.0) return 1.0;
  return 0.0;
}

// Split index along one axis: the pixel edge nearest the foreground
// centroid of pixel centers, (2S + n) / 2n for S the sum of 0-based
// coordinates. Ties go to the edge nearer the middle of the axis, which
// keeps the split mirror symmetric.
std::size_t centroid_split(std::uint64_t coord_sum, std::uint64_t count, std::size_t extent) {
  const std::uint64_t num = 2 * coord_sum + count, den = 2 * count;
  const std::uint64_t lo = num / den, twice_rem = 2 * (num % den);
  if (twice_rem < den) return lo;
  if (twice_rem > den) return lo + 1;
  const auto off_center = [&](std::uint64_t b) {
    const long long d = 2 * static_cast<long long>(b) - static_cast<long long>(extent);
    return d < 0 ? -d : d;
  };
  return off_center(lo + 1) < off_center(lo) ? lo + 1 : lo;
}

double s_region(const Map2D& pred, const Map2D& gt) {
  const std::size_t H = gt.height, W = gt.width;
  std::uint64_t count = 0, sr = 0, sc = 0;
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      if (gt(r, c) != 1.0) continue;
      ++count;
      sr += r;
      sc += c;
    }
  const std::size_t X = centroid_split(sc, count, W);
  const std::size_t Y = centroid_split(sr, count, H);
  const double area = static_cast<double>(H * W);
  const double w1 = static_cast<double>(X * Y) / area;
  const double w2 = static_cast<double>((W - X) * Y) / area;
  const double w3 = static_cast<double>(X * (H - Y)) / area;
  const double w4 = 1.0 - w1 - w2 - w3;
  return w1 * block_ssim(pred, gt, 0, Y, 0, X) + w2 * block_ssim(pred, gt, 0, Y, X, W) +
         w3 * block_ssim(pred, gt, Y, H, 0, X) + w4 * block_ssim(pred, gt, Y, H, X, W);
}

// Distance to the nearest foreground pixel and, for background pixels, the
// error at that pixel. Among equidistant nearest pixels the largest error is
// taken. Scans columns using the nearest foreground rows per column.
void nearest_foreground(const Map2D& gt, const Map2D& err, std::vector<double>& dist, Map2D& transferred) {
  const std::size_t H = gt.height, W = gt.width;
  constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  // up[r*W+c]: nearest fg row <= r in column c; down: nearest fg row >= r.
  std::vector<std::size_t> up(H * W, none), down(H * W, none);
  for (std::size_t c = 0; c < W; ++c) {
    std::size_t last = none;
    for (std::size_t r = 0; r < H; ++r) {
      if (gt(r, c) == 1.0) last = r;
      up[r * W + c] = last;
    }
    last = none;
    for (std::size_t r = H; r-- > 0;) {
      if (gt(r, c) == 1.0) last = r;
      down[r * W + c] = last;
    }
  }
  dist.assign(H * W, 0.0);
  transferred = err;
  parallel_for(H, [&](std::size_t r) {
    for (std::size_t c = 0; c < W; ++c) {
      std::size_t best_d = none;
      double best_e = 0;
      auto offer = [&](std::size_t row, std::size_t q) {
        const std::size_t dr = row > r ? row - r : r - row, dc = q > c ? q - c : c - q;
        const std::size_t d2 = dr * dr + dc * dc;
        const double e = err(row, q);
        if (d2 < best_d || (d2 == best_d && e > best_e)) {
          best_d = d2;
          best_e = e;
        }
      };
      for (std::size_t q = 0; q < W; ++q) {
        if (up[r * W + q] != none) offer(up[r * W + q], q);
        if (down[r * W + q] != none) offer(down[r * W + q], q);
      }
      dist[r * W + c] = std::sqrt(static_cast<double>(best_d));
      if (gt(r, c) == 0.0) transferred(r, c) = best_e;
    }
  });
}

// Separable zero-padded Gaussian correlation (window odd, normalized to sum 1).
Map2D gaussian_filter(const Map2D& in, std::size_t window, double sigma) {
  const long radius = static_cast<long>(window / 2);
  std::vector<double> k(window);
  double total = 0;
  for (long i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  for (double& v : k) v /= total;
  const long H = static_cast<long>(in.height), W = static_cast<long>(in.width);
  Map2D tmp(in.height, in.width), out(in.height, in.width);
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c) {
      double s = 0;
      for (long d = -radius; d <= radius; ++d) {
        const long q = c + d;
        if (q >= 0 && q < W) s += k[d + radius] * in(r, q);
      }
      tmp(r, c) = s;
    }
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c) {
      double s = 0;
      for (long d = -radius; d <= radius; ++d) {
        const long q = r + d;
        if (q >= 0 && q < H) s += k[d + radius] * tmp(q, c);
      }
      out(r, c) = s;
    }
  return out;
}

std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

Map2D::Map2D(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
  if (values.size() != h * w) throw DimensionError("map values do not match " + std::to_string(h) + "x" + std::to_string(w));
}

double mae(const Map2D& pred, const Map2D& gt) {
  check_inputs(pred, gt, "mae");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred.values[i] - gt.values[i]);
  return s / static_cast<double>(pred.size());
}

double s_measure(const Map2D& pred, const Map2D& gt, const MetricConstants& k) {
  check_inputs(pred, gt, "s_measure");
  const double y = mean_of(gt.values);
  if (y == 0.0) return 1.0 - mean_of(pred.values);
  if (y == 1.0) return mean_of(pred.values);
  const double q = k.s_alpha * s_object(pred, gt) + (1.0 - k.s_alpha) * s_region(pred, gt);
  return std::clamp(q, 0.0, 1.0);
}

double e_measure_mean(const Map2D& pred, const Map2D& gt, const MetricConstants& k) {
  check_inputs(pred, gt, "e_measure_mean");
  const double N = static_cast<double>(pred.size());
  const double y = mean_of(gt.values);
  if (y == 0.0) return 1.0 - mean_of(pred.values);
  if (y == 1.0) return mean_of(pred.values);

  const std::size_t T = k.e_thresholds;
  const double tn = static_cast<double>(T);
  // passed[i]: number of thresholds k/T (k = 1..T) with k/T <= pred[i].
  // fg_counts[j]: pixels passing exactly j thresholds, split by gt.
  std::vector<double> hist_fg(T + 1, 0.0), hist_bg(T + 1, 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred.values[i];
    auto j = static_cast<std::size_t>(std::floor(p * tn));
    j = std::min(j, T);
    while (j > 0 && static_cast<double>(j) / tn > p) --j;
    while (j < T && static_cast<double>(j + 1) / tn <= p) ++j;
    (gt.values[i] == 1.0 ? hist_fg : hist_bg)[j] += 1.0;
  }
  const double n_fg = y * N;
  double above_fg = 0, above_bg = 0;  // pixels passing at least k thresholds
  for (std::size_t j = T + 1; j-- > 1;) {
    above_fg += hist_fg[j];
    above_bg += hist_bg[j];
  }
  // Walk thresholds from k = 1 upward; above_* start as counts passing >= 1.
  double total = 0;
  for (std::size_t t = 1; t <= T; ++t) {
    const double tp = above_fg, fp = above_bg;
    const double fn = n_fg - tp, tn_count = (N - n_fg) - fp;
    const double mp = (tp + fp) / N;
    // demeaned pred value a, demeaned gt value g per combination
    auto score = [&](double a, double g) {
      const double align = 2.0 * a * g / (a * a + g * g + kEps);
      return (align + 1.0) * (align + 1.0) / 4.0;
    };
    const double s = tp * score(1.0 - mp, 1.0 - y) + fp * score(1.0 - mp, -y) + fn * score(-mp, 1.0 - y) +
                     tn_count * score(-mp, -y);
    total += s / N;
    above_fg -= hist_fg[t];
    above_bg -= hist_bg[t];
  }
  return total / tn;
}

double weighted_f_beta(const Map2D& pred, const Map2D& gt, const MetricConstants& k) {
  check_inputs(pred, gt, "weighted_f_beta");
  double fg_count = 0;
  for (double g : gt.values) fg_count += g;
  if (fg_count == 0.0) return 0.0;

  const std::size_t n = pred.size();
  Map2D e(pred.height, pred.width);
  for (std::size_t i = 0; i < n; ++i) e.values[i] = std::abs(pred.values[i] - gt.values[i]);
  std::vector<double> dist;
  Map2D et;
  nearest_foreground(gt, e, dist, et);
  const Map2D ea = gaussian_filter(et, k.f_window, k.f_sigma);

  double err_fg = 0, err_bg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = e.values[i];
    if (gt.values[i] == 1.0 && ea.values[i] < m) m = ea.values[i];
    if (gt.values[i] == 1.0) {
      err_fg += m;
    } else {
      const double b = 2.0 - std::exp(std::log(0.5) / k.f_decay * dist[i]);
      err_bg += m * b;
    }
  }
  const double tpw = fg_count - err_fg;
  const double fpw = err_bg;
  const double recall = 1.0 - err_fg / fg_count;
  const double precision = tpw / (kEps + tpw + fpw);
  const double q = (1.0 + k.f_beta2) * recall * precision / (kEps + recall + k.f_beta2 * precision);
  if (!std::isfinite(q)) return 0.0;
  return std::clamp(q, 0.0, 1.0);
}

MetricReport evaluate(const Map2D& pred, const Map2D& gt, const MetricConstants& k) {
  MetricReport r;
  r.s_alpha = s_measure(pred, gt, k);
  r.e_mean = e_measure_mean(pred, gt, k);
  r.f_beta_omega = weighted_f_beta(pred, gt, k);
  r.mae = mae(pred, gt);
  r.count = 1;
  return r;
}

Map2D normalize_prediction(const Map2D& pred) {
  if (pred.size() == 0) return pred;
  const auto [lo_it, hi_it] = std::minmax_element(pred.values.begin(), pred.values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!std::isfinite(lo) || !std::isfinite(hi)) throw DataError("prediction contains non-finite values");
  Map2D out = pred;
  if (lo >= -1e-6 && hi <= 1.0 + 1e-6) {
    for (double& v : out.values) v = std::clamp(v, 0.0, 1.0);
    return out;
  }
  if (hi == lo) throw DataError("prediction is a constant map outside [0,1]; pass probabilities, not logits");
  for (double& v : out.values) v = (v - lo) / (hi - lo);
  return out;
}

MetricReport mean_report(const std::vector<MetricReport>& reports) {
  MetricReport m;
  for (const auto& r : reports) {
    m.s_alpha += r.s_alpha;
    m.e_mean += r.e_mean;
    m.f_beta_omega += r.f_beta_omega;
    m.mae += r.mae;
  }
  m.count = reports.size();
  if (m.count > 0) {
    const double n = static_cast<double>(m.count);
    m.s_alpha /= n;
    m.e_mean /= n;
    m.f_beta_omega /= n;
    m.mae /= n;
  }
  return m;
}

MetricReport evaluate_dataset(const std::string& pred_dir, const std::string& gt_dir, const MetricConstants& k) {
  namespace fs = std::filesystem;
  auto list = [](const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: '" + dir + "'");
    std::map<std::string, std::string> by_stem;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".png") by_stem[e.path().stem().string()] = e.path().string();
    }
    return by_stem;
  };
  const auto preds = list(pred_dir), gts = list(gt_dir);
  std::vector<std::string> missing;
  for (const auto& [stem, path] : gts)
    if (!preds.count(stem)) missing.push_back(stem + " (no prediction)");
  for (const auto& [stem, path] : preds)
    if (!gts.count(stem)) missing.push_back(stem + " (no ground truth)");
  if (!missing.empty()) {
    std::string msg = "unpaired files:";
    for (const auto& m : missing) msg += " " + m;
    throw DataError(msg);
  }
  if (gts.empty()) throw DataError("no png pairs found in '" + pred_dir + "' and '" + gt_dir + "'");

  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& [stem, path] : gts) pairs.emplace_back(preds.at(stem), path);
  std::vector<std::pair<Map2D, Map2D>> maps;
  for (const auto& [pred_path, gt_path] : pairs) {
    const Image8 p = read_png(pred_path, 1);
    const Image8 g = read_png(gt_path, 1);
    if (p.height != g.height || p.width != g.width) {
      throw DataError("size mismatch between '" + pred_path + "' and '" + gt_path + "'");
    }
    Map2D pm(p.height, p.width), gm(g.height, g.width);
    for (std::size_t j = 0; j < pm.size(); ++j) {
      pm.values[j] = p.pixels[j] / 255.0;
      gm.values[j] = g.pixels[j] >= 128 ? 1.0 : 0.0;
    }
    maps.emplace_back(std::move(pm), std::move(gm));
  }
  std::vector<MetricReport> reports(maps.size());
  parallel_for(maps.size(), [&](std::size_t i) { reports[i] = evaluate(maps[i].first, maps[i].second, k); });
  return mean_report(reports);
}

std::string report_json(const MetricReport& r, const MetricConstants& k) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"s_alpha\": %.10f, \"e_mean\": %.10f, \"f_beta_omega\": %.10f, \"mae\": %.10f, \"count\": %zu, "
                "\"constants\": {\"s_alpha_weight\": %g, \"e_thresholds\": %zu, \"f_beta2\": %g, \"f_window\": %zu, "
                "\"f_sigma\": %g, \"f_decay\": %g}}",
                r.s_alpha, r.e_mean, r.f_beta_omega, r.mae, r.count, k.s_alpha, k.e_thresholds, k.f_beta2,
                k.f_window, k.f_sigma, k.f_decay);
  return buf;
}

std::string report_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::size_t width = 5;
  for (const auto& [name, r] : rows) width = std::max(width, name.size());
  std::ostringstream o;
  auto pad = [&](const std::string& s) { return s + std::string(width - s.size(), ' '); };
  o << pad("name") << "  S_alpha  E_mean   F_w      MAE      count\n";
  for (const auto& [name, r] : rows) {
    o << pad(name) << "  " << format_metric(r.s_alpha) << "   " << format_metric(r.e_mean) << "   "
      << format_metric(r.f_beta_omega) << "   " << format_metric(r.mae) << "   " << r.count << "\n";
  }
  return o.str();
}

}  // namespace fpnet
