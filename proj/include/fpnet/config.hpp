#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fpnet/nn.hpp"

namespace fpnet {

// Model, optimizer and ablation settings. Loaded from flat key=value text.
struct FPNetConfig {
  std::size_t input_size = 512;
  std::vector<std::size_t> channels{32, 64, 160, 256};
  std::size_t ncd_width = 32;
  std::size_t cfm_width = 64;
  std::size_t bottleneck_width = 16;
  double alpha_oct = 0.5;

  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::size_t batch = 4;
  std::size_t epochs = 1;
  std::size_t steps = 0;  // when positive, overrides epochs
  std::uint64_t seed = 0;
  bool augment = true;

  bool use_fpm = true;
  bool use_hrp = true;
  bool use_cfm = true;
  nn::FreqBranches freq_mode = nn::FreqBranches::both;

  // Stage two (reduction, correction fusion, refinement head) is present
  // when either of its switches is on.
  bool has_stage_two() const { return use_hrp || use_cfm; }

  void validate() const;
  void set(std::string_view key, std::string_view value);

  // One key=value per line in a fixed key order; the hash covers this text.
  std::string canonical() const;
  std::uint64_t hash() const;
  std::string hash_hex() const;

  static FPNetConfig parse(std::string_view text);
  static FPNetConfig load(const std::string& path);
};

std::string to_string(nn::FreqBranches mode);
nn::FreqBranches parse_freq_mode(std::string_view text);

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace fpnet
