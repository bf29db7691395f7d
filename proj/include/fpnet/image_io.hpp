#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace fpnet {

// 8-bit interleaved image (channels 1 or 3).
struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t r, std::size_t c, std::size_t ch = 0) const {
    return pixels[(r * width + c) * channels + ch];
  }
};

// PNG read converting to the requested channel count (1 = gray, 3 = RGB).
Image8 read_png(const std::string& path, std::size_t channels);
void write_png(const std::string& path, const Image8& image);

}  // namespace fpnet
