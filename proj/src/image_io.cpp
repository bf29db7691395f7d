#include "fpnet/image_io.hpp"

#include <png.h>

#include <cstring>

#include "fpnet/errors.hpp"

namespace fpnet {

namespace {

png_uint_32 format_for(std::size_t channels) {
  if (channels == 1) return PNG_FORMAT_GRAY;
  if (channels == 3) return PNG_FORMAT_RGB;
  throw UsageError("png images must have 1 or 3 channels");
}

}  // namespace

Image8 read_png(const std::string& path, std::size_t channels) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError("cannot read png '" + path + "': " + img.message);
  }
  img.format = format_for(channels);
  Image8 out;
  out.height = img.height;
  out.width = img.width;
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("cannot decode png '" + path + "': " + msg);
  }
  return out;
}

void write_png(const std::string& path, const Image8& image) {
  if (image.pixels.size() != image.height * image.width * image.channels) {
    throw UsageError("write_png: pixel buffer does not match " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + "x" + std::to_string(image.channels));
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = format_for(image.channels);
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw DataError("cannot write png '" + path + "': " + img.message);
  }
}

}  // namespace fpnet
