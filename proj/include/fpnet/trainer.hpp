#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fpnet/checkpoint.hpp"
#include "fpnet/image_io.hpp"
#include "fpnet/loss.hpp"
#include "fpnet/metrics.hpp"
#include "fpnet/model.hpp"

namespace fpnet {

inline constexpr const char* kVersion = "0.1.0";

struct Sample {
  std::string stem;
  Tensor32 image;  // (1,3,S,S) in [0,1]
  Tensor32 mask;   // (1,1,S,S) in {0,1}
};

struct Dataset {
  std::string root;
  std::vector<Sample> samples;
};

Tensor32 image_to_tensor(const Image8& rgb);
Tensor32 mask_to_tensor(const Image8& mask);
Image8 probability_to_image(const Tensor32& prob);
Map2D tensor_to_map(const Tensor32& t, std::size_t index = 0);

// Reads <dir>/images/*.png with matching <dir>/masks/*.png. Images must be
// square with extent `size`.
Dataset load_dataset(const std::string& dir, std::size_t size);
// <root>/<split> when it exists, otherwise <root> itself.
std::string split_dir(const std::string& root, const std::string& split);

struct Batch {
  Tensor32 images;
  Tensor32 masks;
  std::vector<std::size_t> indices;
};

std::size_t steps_per_epoch(const FPNetConfig& cfg, std::size_t samples);
std::size_t total_steps(const FPNetConfig& cfg, std::size_t samples);
// Batch for a global step: a per-epoch permutation and per-sample
// augmentation, both derived from (seed, step) only.
Batch make_batch(const FPNetConfig& cfg, const Dataset& data, std::size_t step);

struct LossRecord {
  std::size_t step = 0;
  float l1 = 0, l2 = 0, l_output = 0, total = 0;
};

std::string provenance_header(const FPNetConfig& cfg);
std::string provenance_json(const FPNetConfig& cfg, const std::string& extra_key = {},
                            const std::string& extra_value = {});
std::string format_loss_row(const LossRecord& r);

struct TrainOptions {
  std::string out_dir;
  std::string resume_from;  // checkpoint to continue from
  std::string loss_csv;     // default <out>/loss.csv
  std::string checkpoint;   // default <out>/checkpoint.fpnt
  std::function<void(const LossRecord&)> on_step;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  std::string loss_csv;
  std::string checkpoint;
  std::vector<std::string> warnings;
};

TrainResult train(const FPNetConfig& cfg, const Dataset& data, const TrainOptions& options);

// Sigmoid of S_output for every sample, evaluated in inference mode.
std::vector<Tensor32> predict(const FPNet<float>& model, const Dataset& data);

struct InferResult {
  std::vector<std::string> written;
  std::vector<std::string> warnings;
};

InferResult infer(const FPNetConfig& cfg, const std::string& checkpoint, const Dataset& data,
                  const std::string& out_dir);

MetricReport evaluate_predictions(const std::vector<Tensor32>& probs, const Dataset& data);

struct AblationRow {
  std::string table;  // "ablation" or "frequency"
  std::string name;
  FPNetConfig cfg;
  MetricReport report;
  bool cached = false;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  double full_f = 0.0;
  std::string table;
};

// Four component rows (baseline, +FPM, +FPM+HRP, +FPM+HRP+CFM) and three
// frequency rows (low, high, high+low), each trained on `train` and
// evaluated on `test`.
AblationResult ablate(const FPNetConfig& base, const Dataset& train, const Dataset& test, const std::string& out_dir);

}  // namespace fpnet
