#include "fpnet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "fpnet/errors.hpp"
#include "fpnet/parallel.hpp"
#include "json.hpp"

namespace fpnet {

namespace {

// Lattice value noise with smoothstep interpolation.
class ValueNoise {
 public:
  ValueNoise(std::mt19937_64& rng, std::size_t cells) : cells_(cells), lattice_((cells + 1) * (cells + 1)) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : lattice_) v = u(rng);
  }

  // (x, y) in [0,1)
  double at(double x, double y) const {
    const double gx = x * static_cast<double>(cells_), gy = y * static_cast<double>(cells_);
    const auto ix = std::min(static_cast<std::size_t>(gx), cells_ - 1);
    const auto iy = std::min(static_cast<std::size_t>(gy), cells_ - 1);
    const double fx = smooth(gx - static_cast<double>(ix)), fy = smooth(gy - static_cast<double>(iy));
    const std::size_t s = cells_ + 1;
    const double a = lattice_[iy * s + ix], b = lattice_[iy * s + ix + 1];
    const double c = lattice_[(iy + 1) * s + ix], d = lattice_[(iy + 1) * s + ix + 1];
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d);
  }

 private:
  static double smooth(double t) { return t * t * (3 - 2 * t); }

  std::size_t cells_;
  std::vector<double> lattice_;
};

// Multi-octave sum in [0,1], persistence 0.5, base lattice of 4 cells.
class Fbm {
 public:
  Fbm(std::mt19937_64& rng, std::size_t octaves) {
    std::size_t cells = 4;
    for (std::size_t o = 0; o < octaves; ++o, cells *= 2) layers_.emplace_back(rng, cells);
  }
  double at(double x, double y) const {
    double sum = 0, amp = 1, norm = 0;
    for (const auto& l : layers_) {
      sum += amp * l.at(x, y);
      norm += amp;
      amp *= 0.5;
    }
    return sum / norm;
  }

 private:
  std::vector<ValueNoise> layers_;
};

struct Texture {
  Fbm noise;
  double lo, hi;
  double tint[3];

  Texture(std::mt19937_64& rng, std::size_t octaves, bool bright) : noise(rng, octaves) {
    lo = bright ? 0.70 : 0.10;
    hi = bright ? 0.90 : 0.35;
    std::uniform_real_distribution<double> t(-0.04, 0.04);
    tint[0] = t(rng);
    tint[1] = t(rng);
    tint[2] = -tint[0] - tint[1];
  }
  double at(double x, double y, std::size_t ch) const {
    return std::clamp(lo + (hi - lo) * noise.at(x, y) + tint[ch], 0.0, 1.0);
  }
};

std::string stem_for(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return buf;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void SynthSpec::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("camouflage strength lambda must lie in [0,1]");
  if (size == 0 || size % 32 != 0) throw UsageError("image size must be a positive multiple of 32");
  if (min_objects == 0 || min_objects > max_objects) throw UsageError("object count range must satisfy 1 <= min <= max");
  if (octaves == 0) throw UsageError("texture needs at least one octave");
}

std::uint64_t sample_stream_seed(std::uint64_t seed, std::size_t index) {
  // splitmix64 finalizer of seed xor index
  std::uint64_t z = seed ^ (static_cast<std::uint64_t>(index) * 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SamplePair generate_sample(const SynthSpec& spec, std::size_t index) {
  spec.validate();
  SamplePair out;
  out.meta.stem = stem_for(index);
  out.meta.stream_seed = sample_stream_seed(spec.seed, index);
  out.meta.lambda = spec.lambda;
  std::mt19937_64 rng(out.meta.stream_seed);

  const bool bright = std::bernoulli_distribution(0.5)(rng);
  out.meta.bright_background = bright;
  const Texture background(rng, spec.octaves, bright);
  const Texture contrast(rng, spec.octaves, !bright);
  out.meta.objects = std::uniform_int_distribution<std::size_t>(spec.min_objects, spec.max_objects)(rng);

  struct Blob {
    double cx, cy, r;
    Fbm shape;
  };
  std::vector<Blob> blobs;
  std::uniform_real_distribution<double> centre(0.2, 0.8), radius(0.12, 0.25);
  for (std::size_t k = 0; k < out.meta.objects; ++k) {
    const double cx = centre(rng), cy = centre(rng), r = radius(rng);
    blobs.push_back({cx, cy, r, Fbm(rng, 2)});
  }

  const std::size_t N = spec.size;
  out.rgb = {N, N, 3, std::vector<std::uint8_t>(N * N * 3)};
  out.mask = {N, N, 1, std::vector<std::uint8_t>(N * N)};
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(N);
      const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(N);
      bool inside = false;
      for (const Blob& b : blobs) {
        const double d = std::hypot(x - b.cx, y - b.cy) / b.r;
        if (d + 0.5 * (b.shape.at(x, y) - 0.5) < 1.0) inside = true;
      }
      out.mask.pixels[i * N + j] = inside ? 255 : 0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double bg = background.at(x, y, ch);
        const double v = inside ? spec.lambda * bg + (1.0 - spec.lambda) * contrast.at(x, y, ch) : bg;
        out.rgb.pixels[(i * N + j) * 3 + ch] = to_byte(v);
      }
    }
  return out;
}

std::string gen_dataset(const SynthSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  spec.validate();
  const std::size_t total = spec.train_count + spec.test_count;
  std::vector<SamplePair> samples(total);
  parallel_for(total, [&](std::size_t i) { samples[i] = generate_sample(spec, i); });

  nlohmann::ordered_json manifest;
  manifest["generator"] = "fpnet-synth";
  manifest["version"] = 1;
  manifest["spec"] = {{"size", spec.size},          {"train_count", spec.train_count},
                      {"test_count", spec.test_count}, {"lambda", spec.lambda},
                      {"octaves", spec.octaves},    {"min_objects", spec.min_objects},
                      {"max_objects", spec.max_objects}, {"seed", spec.seed}};
  manifest["samples"] = nlohmann::ordered_json::array();
  try {
    for (const char* split : {"train", "test"})
      for (const char* kind : {"images", "masks"}) fs::create_directories(fs::path(out_dir) / split / kind);
  } catch (const fs::filesystem_error& e) {
    throw DataError(std::string("cannot create dataset directories: ") + e.what());
  }
  for (std::size_t i = 0; i < total; ++i) {
    const SamplePair& s = samples[i];
    const std::string split = i < spec.train_count ? "train" : "test";
    const fs::path base = fs::path(out_dir) / split;
    write_png((base / "images" / (s.meta.stem + ".png")).string(), s.rgb);
    write_png((base / "masks" / (s.meta.stem + ".png")).string(), s.mask);
    std::size_t fg = 0;
    for (auto p : s.mask.pixels) fg += p != 0;
    manifest["samples"].push_back({{"stem", s.meta.stem},
                                   {"split", split},
                                   {"stream_seed", s.meta.stream_seed},
                                   {"lambda", s.meta.lambda},
                                   {"objects", s.meta.objects},
                                   {"bright_background", s.meta.bright_background},
                                   {"foreground_pixels", fg}});
  }
  const std::string text = manifest.dump(2) + "\n";
  std::ofstream mf(fs::path(out_dir) / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!mf) throw DataError("cannot write manifest in '" + out_dir + "'");
  mf << text;
  return text;
}

}  // namespace fpnet
