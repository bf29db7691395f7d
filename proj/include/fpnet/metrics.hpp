#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace fpnet {

// Row-major single-channel map.
struct Map2D {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Map2D() = default;
  Map2D(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
  Map2D(std::size_t h, std::size_t w, std::vector<double> v);

  std::size_t size() const { return values.size(); }
  double& operator()(std::size_t r, std::size_t c) { return values[r * width + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

struct MetricConstants {
  double s_alpha = 0.5;
  std::size_t e_thresholds = 256;  // t_k = k / n, k = 1..n
  double f_beta2 = 1.0;
  std::size_t f_window = 7;
  double f_sigma = 5.0;
  double f_decay = 5.0;  // B = 2 - exp(ln(0.5) / decay * dist)
};

struct MetricReport {
  double s_alpha = 0.0;
  double e_mean = 0.0;
  double f_beta_omega = 0.0;
  double mae = 0.0;
  std::size_t count = 0;
};

// pred must lie in [0,1] (see normalize_prediction); gt must be binary {0,1}.
double mae(const Map2D& pred, const Map2D& gt);
double s_measure(const Map2D& pred, const Map2D& gt, const MetricConstants& k = {});
double e_measure_mean(const Map2D& pred, const Map2D& gt, const MetricConstants& k = {});
double weighted_f_beta(const Map2D& pred, const Map2D& gt, const MetricConstants& k = {});

MetricReport evaluate(const Map2D& pred, const Map2D& gt, const MetricConstants& k = {});

// Values within 1e-6 of [0,1] are clamped; wider ranges are min-max
// normalized. A constant map outside [0,1] is rejected as a DataError.
Map2D normalize_prediction(const Map2D& pred);

// 8-bit grayscale PNG pairs matched by filename stem; gt binarized at 128.
// Reports are averaged in stem order.
MetricReport evaluate_dataset(const std::string& pred_dir, const std::string& gt_dir,
                              const MetricConstants& k = {});

MetricReport mean_report(const std::vector<MetricReport>& reports);

std::string report_json(const MetricReport& r, const MetricConstants& k = {});
std::string report_table(const std::vector<std::pair<std::string, MetricReport>>& rows);

}  // namespace fpnet
