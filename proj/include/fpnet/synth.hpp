#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpnet/image_io.hpp"

namespace fpnet {

struct SynthSpec {
  std::size_t size = 64;
  std::size_t train_count = 8;
  std::size_t test_count = 4;
  double lambda = 0.6;  // 0: high contrast, 1: object texture equals background
  std::size_t octaves = 4;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SampleMeta {
  std::string stem;
  std::uint64_t stream_seed = 0;
  double lambda = 0.0;
  std::size_t objects = 0;
  bool bright_background = false;
};

struct SamplePair {
  Image8 rgb;   // 3 channels
  Image8 mask;  // 1 channel, {0,255}
  SampleMeta meta;
};

// Per-image generator stream: every image derives its own seed from the
// dataset seed and its global index.
std::uint64_t sample_stream_seed(std::uint64_t seed, std::size_t index);

SamplePair generate_sample(const SynthSpec& spec, std::size_t index);

// Writes <out>/{train,test}/{images,masks}/<stem>.png and <out>/manifest.json;
// returns the manifest text.
std::string gen_dataset(const SynthSpec& spec, const std::string& out_dir);

}  // namespace fpnet
