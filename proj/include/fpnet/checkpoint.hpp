#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpnet/param_store.hpp"

namespace fpnet {

// Little-endian container:
//   "FPNT" | u32 version=1 | u32 count |
//   count x (u16 name_len | name | u8 rank | rank x u32 extent | f32 data)
struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> extents;
  std::vector<float> data;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint_file(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint_file(const std::string& path);

enum class LoadMode {
  inference,  // parameters and buffers; optimizer entries ignored
  resume,     // also restores Adam moments and the step counter
};

// Saves parameters and buffers, plus "adam.m/<name>", "adam.v/<name>" and
// "adam.t" when with_optimizer is set.
template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params, const TensorDict<T>& buffers,
                     bool with_optimizer = true);

// Loads into an already constructed model. Missing or mis-shaped entries
// raise a FormatError naming the entry; entries the model does not know
// are skipped and returned so the caller can warn.
template <typename T>
std::vector<std::string> load_checkpoint(const std::string& path, ParamStore<T>& params, TensorDict<T>& buffers,
                                         LoadMode mode);

}  // namespace fpnet
