#include "fpnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace fpnet {

namespace fs = std::filesystem;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<std::string> png_stems(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) throw DataError("missing directory '" + dir.string() + "'");
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path().stem().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Random crop (side in [0.8, 1] of the image) resized back, plus a
// horizontal flip, applied identically to image and mask.
struct Augment {
  bool flip = false;
  double side = 1.0;  // crop side in pixels
  double oy = 0, ox = 0;
};

Augment draw_augment(std::mt19937_64& rng, std::size_t size) {
  Augment a;
  const double s = static_cast<double>(size);
  a.flip = std::bernoulli_distribution(0.5)(rng);
  a.side = std::round(s * std::uniform_real_distribution<double>(0.8, 1.0)(rng));
  a.oy = std::floor(std::uniform_real_distribution<double>(0.0, s - a.side + 1.0)(rng));
  a.ox = std::floor(std::uniform_real_distribution<double>(0.0, s - a.side + 1.0)(rng));
  a.oy = std::min(a.oy, s - a.side);
  a.ox = std::min(a.ox, s - a.side);
  return a;
}

void copy_augmented(const Tensor32& src, const Augment& a, bool nearest, float* dst) {
  const Shape s = src.shape();
  const std::size_t S = s.h();
  const auto in = src.data();
  const double scale = a.side / static_cast<double>(S);
  auto clampi = [&](double v) { return std::clamp(v, 0.0, static_cast<double>(S - 1)); };
  for (std::size_t c = 0; c < s.c(); ++c)
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < S; ++j) {
        const std::size_t jj = a.flip ? S - 1 - j : j;
        float v;
        if (nearest) {
          const auto r = static_cast<std::size_t>(clampi(a.oy + std::floor((static_cast<double>(i) + 0.5) * scale)));
          const auto q = static_cast<std::size_t>(clampi(a.ox + std::floor((static_cast<double>(jj) + 0.5) * scale)));
          v = in[(c * S + r) * S + q];
        } else {
          const double y = clampi(a.oy + (static_cast<double>(i) + 0.5) * scale - 0.5);
          const double x = clampi(a.ox + (static_cast<double>(jj) + 0.5) * scale - 0.5);
          const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
          const std::size_t y1 = std::min(y0 + 1, S - 1), x1 = std::min(x0 + 1, S - 1);
          const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
          const double top = (1 - fx) * in[(c * S + y0) * S + x0] + fx * in[(c * S + y0) * S + x1];
          const double bot = (1 - fx) * in[(c * S + y1) * S + x0] + fx * in[(c * S + y1) * S + x1];
          v = static_cast<float>((1 - fy) * top + fy * bot);
        }
        dst[(c * S + i) * S + j] = v;
      }
}

std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

}  // namespace

Tensor32 image_to_tensor(const Image8& rgb) {
  if (rgb.channels != 3) throw DataError("expected an RGB image");
  const std::size_t H = rgb.height, W = rgb.width;
  std::vector<float> v(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < H * W; ++i) v[c * H * W + i] = static_cast<float>(rgb.pixels[i * 3 + c]) / 255.0f;
  return Tensor32::from({1, 3, H, W}, std::move(v));
}

Tensor32 mask_to_tensor(const Image8& mask) {
  if (mask.channels != 1) throw DataError("expected a grayscale mask");
  std::vector<float> v(mask.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask.pixels[i] >= 128 ? 1.0f : 0.0f;
  return Tensor32::from({1, 1, mask.height, mask.width}, std::move(v));
}

Image8 probability_to_image(const Tensor32& prob) {
  const Shape s = prob.shape();
  if (s.n() != 1 || s.c() != 1) throw DimensionError("probability map must be (1,1,H,W), got " + s.str());
  Image8 img{s.h(), s.w(), 1, std::vector<std::uint8_t>(s.plane())};
  for (std::size_t i = 0; i < s.plane(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(static_cast<double>(prob.data()[i]), 0.0, 1.0) * 255.0));
  }
  return img;
}

Map2D tensor_to_map(const Tensor32& t, std::size_t index) {
  const Shape s = t.shape();
  if (s.c() != 1 || index >= s.n()) throw DimensionError("tensor_to_map expects single-channel maps, got " + s.str());
  Map2D m(s.h(), s.w());
  for (std::size_t i = 0; i < s.plane(); ++i) m.values[i] = t.data()[index * s.plane() + i];
  return m;
}

std::string split_dir(const std::string& root, const std::string& split) {
  const fs::path p = fs::path(root) / split;
  return fs::is_directory(p / "images") ? p.string() : root;
}

Dataset load_dataset(const std::string& dir, std::size_t size) {
  const fs::path root(dir);
  const auto image_stems = png_stems(root / "images");
  const auto mask_stems = png_stems(root / "masks");
  if (image_stems != mask_stems) throw DataError("images/ and masks/ in '" + dir + "' do not list the same stems");
  if (image_stems.empty()) throw DataError("no images found in '" + dir + "'");
  Dataset data;
  data.root = dir;
  for (const auto& stem : image_stems) {
    const Image8 rgb = read_png((root / "images" / (stem + ".png")).string(), 3);
    const Image8 mask = read_png((root / "masks" / (stem + ".png")).string(), 1);
    if (rgb.height != size || rgb.width != size || mask.height != size || mask.width != size) {
      throw DataError("sample '" + stem + "' is " + std::to_string(rgb.width) + "x" + std::to_string(rgb.height) +
                      ", the model expects " + std::to_string(size) + "x" + std::to_string(size));
    }
    data.samples.push_back({stem, image_to_tensor(rgb), mask_to_tensor(mask)});
  }
  return data;
}

std::size_t steps_per_epoch(const FPNetConfig& cfg, std::size_t samples) {
  return (samples + cfg.batch - 1) / cfg.batch;
}

std::size_t total_steps(const FPNetConfig& cfg, std::size_t samples) {
  return cfg.steps > 0 ? cfg.steps : cfg.epochs * steps_per_epoch(cfg, samples);
}

Batch make_batch(const FPNetConfig& cfg, const Dataset& data, std::size_t step) {
  const std::size_t n = data.samples.size();
  if (n == 0) throw DataError("empty dataset");
  const std::size_t spe = steps_per_epoch(cfg, n);
  const std::size_t epoch = step / spe, slot = step % spe;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 order(mix(cfg.seed, epoch));
  std::shuffle(perm.begin(), perm.end(), order);

  Batch b;
  for (std::size_t k = slot * cfg.batch; k < std::min(n, (slot + 1) * cfg.batch); ++k) b.indices.push_back(perm[k]);
  const Shape is = data.samples.front().image.shape(), ms = data.samples.front().mask.shape();
  const std::size_t B = b.indices.size();
  std::vector<float> images(B * is.numel()), masks(B * ms.numel());
  for (std::size_t k = 0; k < B; ++k) {
    const Sample& s = data.samples[b.indices[k]];
    if (cfg.augment) {
      std::mt19937_64 rng(mix(mix(cfg.seed ^ 0xa5a5a5a5ULL, step), k));
      const Augment a = draw_augment(rng, is.h());
      copy_augmented(s.image, a, false, images.data() + k * is.numel());
      copy_augmented(s.mask, a, true, masks.data() + k * ms.numel());
    } else {
      std::copy(s.image.data().begin(), s.image.data().end(), images.begin() + static_cast<long>(k * is.numel()));
      std::copy(s.mask.data().begin(), s.mask.data().end(), masks.begin() + static_cast<long>(k * ms.numel()));
    }
  }
  b.images = Tensor32::from({B, is.c(), is.h(), is.w()}, std::move(images));
  b.masks = Tensor32::from({B, 1, ms.h(), ms.w()}, std::move(masks));
  return b;
}

std::string provenance_header(const FPNetConfig& cfg) {
  std::ostringstream o;
  o << "# fpnet " << kVersion << "\n# config_hash " << cfg.hash_hex() << "\n# seed " << cfg.seed << "\n";
  return o.str();
}

std::string provenance_json(const FPNetConfig& cfg, const std::string& extra_key, const std::string& extra_value) {
  nlohmann::ordered_json j;
  j["tool"] = "fpnet";
  j["version"] = kVersion;
  j["config_hash"] = cfg.hash_hex();
  j["seed"] = cfg.seed;
  j["config"] = cfg.canonical();
  if (!extra_key.empty()) j[extra_key] = extra_value;
  return j.dump(2) + "\n";
}

std::string format_loss_row(const LossRecord& r) {
  return std::to_string(r.step) + "," + format_float(r.l1) + "," + format_float(r.l2) + "," +
         format_float(r.l_output) + "," + format_float(r.total);
}

TrainResult train(const FPNetConfig& cfg, const Dataset& data, const TrainOptions& options) {
  cfg.validate();
  if (data.samples.empty()) throw DataError("training set is empty");
  TrainResult result;
  fs::create_directories(options.out_dir.empty() ? "." : options.out_dir);
  const fs::path out = options.out_dir.empty() ? fs::path(".") : fs::path(options.out_dir);
  result.loss_csv = options.loss_csv.empty() ? (out / "loss.csv").string() : options.loss_csv;
  result.checkpoint = options.checkpoint.empty() ? (out / "checkpoint.fpnt").string() : options.checkpoint;

  FPNet<float> model(cfg);
  std::size_t start = 0;
  if (!options.resume_from.empty()) {
    result.warnings = load_checkpoint(options.resume_from, model.params(), model.buffers(), LoadMode::resume);
    start = model.params().step_count();
  }
  const std::size_t end = total_steps(cfg, data.samples.size());

  const bool append = !options.resume_from.empty() && fs::exists(result.loss_csv);
  std::ofstream csv(result.loss_csv, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw DataError("cannot write loss trace '" + result.loss_csv + "'");
  if (!append) csv << provenance_header(cfg) << "step,l1,l2,l_output,total\n";

  const AdamOptions adam{cfg.lr, cfg.weight_decay};
  const nn::Context ctx{true};
  for (std::size_t step = start; step < end; ++step) {
    const Batch batch = make_batch(cfg, data, step);
    const PredictionTriplet<float> preds = model.forward(batch.images, ctx);
    LossBreakdown<float> loss = total_loss(preds, batch.masks);
    LossRecord rec{step, loss.l1(), loss.l2(), loss.l_output(), loss.value()};
    loss.total.backward();
    adam_step(model.params(), adam);
    csv << format_loss_row(rec) << "\n";
    csv.flush();
    result.trace.push_back(rec);
    if (options.on_step) options.on_step(rec);
  }
  save_checkpoint(result.checkpoint, model.params(), model.buffers(), true);
  return result;
}

std::vector<Tensor32> predict(const FPNet<float>& model, const Dataset& data) {
  NoGradGuard guard;
  const nn::Context ctx{false};
  std::vector<Tensor32> out;
  for (const Sample& s : data.samples) out.push_back(ops::sigmoid(model.forward(s.image, ctx).s_output));
  return out;
}

InferResult infer(const FPNetConfig& cfg, const std::string& checkpoint, const Dataset& data,
                  const std::string& out_dir) {
  FPNet<float> model(cfg);
  InferResult result;
  result.warnings = load_checkpoint(checkpoint, model.params(), model.buffers(), LoadMode::inference);
  fs::create_directories(out_dir);
  const std::vector<Tensor32> probs = predict(model, data);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const std::string path = (fs::path(out_dir) / (data.samples[i].stem + ".png")).string();
    write_png(path, probability_to_image(probs[i]));
    result.written.push_back(path);
  }
  std::ofstream prov(fs::path(out_dir) / "provenance.json", std::ios::trunc);
  prov << provenance_json(cfg, "checkpoint", checkpoint);
  return result;
}

MetricReport evaluate_predictions(const std::vector<Tensor32>& probs, const Dataset& data) {
  std::vector<MetricReport> reports;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    // quantize like a written 8-bit mask so file and in-memory evaluation agree
    const Image8 img = probability_to_image(probs[i]);
    Map2D p(img.height, img.width);
    for (std::size_t j = 0; j < p.size(); ++j) p.values[j] = img.pixels[j] / 255.0;
    reports.push_back(evaluate(p, tensor_to_map(data.samples[i].mask)));
  }
  return mean_report(reports);
}

AblationResult ablate(const FPNetConfig& base, const Dataset& train_set, const Dataset& test_set,
                      const std::string& out_dir) {
  struct Variant {
    const char* table;
    const char* name;
    bool fpm, hrp, cfm;
    nn::FreqBranches freq;
  };
  const Variant variants[] = {
      {"ablation", "baseline", false, false, false, nn::FreqBranches::both},
      {"ablation", "+FPM", true, false, false, nn::FreqBranches::both},
      {"ablation", "+FPM+HRP", true, true, false, nn::FreqBranches::both},
      {"ablation", "+FPM+HRP+CFM", true, true, true, nn::FreqBranches::both},
      {"frequency", "low", true, true, true, nn::FreqBranches::low},
      {"frequency", "high", true, true, true, nn::FreqBranches::high},
      {"frequency", "high+low", true, true, true, nn::FreqBranches::both},
  };
  AblationResult result;
  std::map<std::uint64_t, MetricReport> cache;
  for (const Variant& v : variants) {
    AblationRow row;
    row.table = v.table;
    row.name = v.name;
    row.cfg = base;
    row.cfg.use_fpm = v.fpm;
    row.cfg.use_hrp = v.hrp;
    row.cfg.use_cfm = v.cfm;
    row.cfg.freq_mode = v.freq;
    const std::uint64_t key = row.cfg.hash();
    if (auto it = cache.find(key); it != cache.end()) {
      row.report = it->second;
      row.cached = true;
    } else {
      const fs::path dir = fs::path(out_dir) / row.cfg.hash_hex();
      TrainOptions opts;
      opts.out_dir = dir.string();
      train(row.cfg, train_set, opts);
      FPNet<float> model(row.cfg);
      load_checkpoint((dir / "checkpoint.fpnt").string(), model.params(), model.buffers(), LoadMode::inference);
      row.report = evaluate_predictions(predict(model, test_set), test_set);
      cache.emplace(key, row.report);
    }
    result.rows.push_back(row);
  }
  for (const auto& r : result.rows)
    if (r.name == "+FPM+HRP+CFM") result.full_f = r.report.f_beta_omega;

  std::ostringstream t;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %-14s %8s %8s %8s %8s %8s %8s\n", "table", "config", "S_alpha", "E_mean",
                "F_w", "MAE", "F_full", "dF");
  t << line;
  for (const auto& r : result.rows) {
    std::snprintf(line, sizeof line, "%-10s %-14s %8.4f %8.4f %8.4f %8.4f %8.4f %+8.4f\n", r.table.c_str(),
                  r.name.c_str(), r.report.s_alpha, r.report.e_mean, r.report.f_beta_omega, r.report.mae, result.full_f,
                  r.report.f_beta_omega - result.full_f);
    t << line;
  }
  result.table = t.str();

  nlohmann::ordered_json j;
  j["provenance"] = nlohmann::ordered_json::parse(provenance_json(base));
  j["full_f_beta_omega"] = result.full_f;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : result.rows) {
    j["rows"].push_back({{"table", r.table},
                         {"config", r.name},
                         {"config_hash", r.cfg.hash_hex()},
                         {"s_alpha", r.report.s_alpha},
                         {"e_mean", r.report.e_mean},
                         {"f_beta_omega", r.report.f_beta_omega},
                         {"mae", r.report.mae},
                         {"count", r.report.count},
                         {"reused", r.cached}});
  }
  fs::create_directories(out_dir);
  std::ofstream(fs::path(out_dir) / "ablation.json", std::ios::trunc) << j.dump(2) << "\n";
  std::ofstream(fs::path(out_dir) / "ablation.txt", std::ios::trunc) << provenance_header(base) << result.table;
  return result;
}

}  // namespace fpnet
