#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "priorfuse/core/error.hpp"
#include "priorfuse/core/image.hpp"

namespace priorfuse {

namespace detail {

inline ImageBuffer from_png_image(png_image& img, const std::string& what, int want_channels) {
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int file_channels = gray ? 1 : 3;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(img));
  if (png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr) == 0) {
    std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG " + what + ": " + msg);
  }
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  std::vector<float> values(buffer.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) values[i] = static_cast<float>(buffer[i]) / 255.0f;
  ImageBuffer out(h, w, file_channels, std::move(values));
  if (want_channels == 3 && file_channels == 1) return to_three_channels(out);
  return out;
}

inline std::vector<std::uint8_t> to_bytes(const ImageBuffer& image) {
  std::vector<std::uint8_t> bytes(image.size());
  auto values = image.data();
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const float v = std::clamp(values[i], 0.0f, 1.0f);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return bytes;
}

inline png_image make_header(const ImageBuffer& image) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = image.channels() == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  return img;
}

}  // namespace detail

// Loads an 8-bit PNG as v/255. want_channels = 3 promotes grayscale files;
// 0 keeps the file's channel count. Alpha is dropped.
inline ImageBuffer load_png(const std::filesystem::path& path, int want_channels = 3) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&img, path.string().c_str()) == 0) {
    throw IoError("cannot open PNG " + path.string() + ": " + img.message);
  }
  return detail::from_png_image(img, path.string(), want_channels);
}

inline ImageBuffer decode_png(const std::vector<std::uint8_t>& bytes, int want_channels = 3) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (bytes.empty() || png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()) == 0) {
    throw IoError(std::string("cannot decode PNG bytes: ") + (bytes.empty() ? "empty payload" : img.message));
  }
  return detail::from_png_image(img, "<memory>", want_channels);
}

// Saves as round(v*255).
inline void save_png(const ImageBuffer& image, const std::filesystem::path& path) {
  auto bytes = detail::to_bytes(image);
  png_image img = detail::make_header(image);
  if (png_image_write_to_file(&img, path.string().c_str(), 0, bytes.data(), 0, nullptr) == 0) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

inline std::vector<std::uint8_t> encode_png(const ImageBuffer& image) {
  auto bytes = detail::to_bytes(image);
  png_image img = detail::make_header(image);
  png_alloc_size_t size = 0;
  if (png_image_write_get_memory_size(img, size, 0, bytes.data(), 0, nullptr) == 0) {
    throw IoError(std::string("cannot size PNG encoding: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (png_image_write_to_memory(&img, out.data(), &size, 0, bytes.data(), 0, nullptr) == 0) {
    throw IoError(std::string("cannot encode PNG: ") + img.message);
  }
  out.resize(size);
  return out;
}

// Snaps values onto the 8-bit grid, i.e. what a save/load round trip yields.
inline ImageBuffer quantize8(const ImageBuffer& image) {
  ImageBuffer out = image;
  for (auto& v : out.data()) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
  return out;
}

}  // namespace priorfuse
