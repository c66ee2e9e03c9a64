#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "priorfuse/core/error.hpp"

namespace priorfuse {

inline constexpr int kMinImageSide = 8;

// H x W x C image, row-major with interleaved channels. Pixel values live in
// [0,1]; producers in this library guarantee that range, and `is_unit_range`
// lets consumers check externally built buffers.
class ImageBuffer {
 public:
  ImageBuffer() = default;

  ImageBuffer(int height, int width, int channels, float fill = 0.0f)
      : height_(height), width_(width), channels_(channels) {
    validate_shape(height, width, channels);
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
  }

  ImageBuffer(int height, int width, int channels, std::vector<float> data)
      : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    validate_shape(height, width, channels);
    if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
      throw DimensionMismatch("image data size " + std::to_string(data_.size()) +
                              " does not match " + std::to_string(height) + "x" +
                              std::to_string(width) + "x" + std::to_string(channels));
    }
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  float at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  bool same_shape(const ImageBuffer& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
  }

  bool is_unit_range() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
  }

  std::string shape_string() const {
    return std::to_string(height_) + "x" + std::to_string(width_) + "x" + std::to_string(channels_);
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

  static void validate_shape(int height, int width, int channels) {
    if (height < kMinImageSide || width < kMinImageSide) {
      throw InvalidArgument("image dims " + std::to_string(height) + "x" + std::to_string(width) +
                            " below minimum side " + std::to_string(kMinImageSide));
    }
    if (channels != 1 && channels != 3) {
      throw InvalidArgument("image channels must be 1 or 3, got " + std::to_string(channels));
    }
  }

 private:
  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int height_{0};
  int width_{0};
  int channels_{0};
  std::vector<float> data_;
};

inline void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, std::string_view what) {
  if (!a.same_shape(b)) {
    throw DimensionMismatch(std::string(what) + ": shape " + a.shape_string() + " vs " +
                            b.shape_string());
  }
}

// ---------------------------------------------------------------------------
// Degradation taxonomy

enum class DegradationType {
  haze,
  rain,
  low_light,
  raindrop,
  reflection,
  underwater,
  snow,
  motion_blur,
  defocus_blur,
  noise,
};

inline constexpr std::array kAllDegradations = {
    DegradationType::haze,       DegradationType::rain,        DegradationType::low_light,
    DegradationType::raindrop,   DegradationType::reflection,  DegradationType::underwater,
    DegradationType::snow,       DegradationType::motion_blur, DegradationType::defocus_blur,
    DegradationType::noise,
};

inline std::string_view to_string(DegradationType d) {
  switch (d) {
    case DegradationType::haze: return "haze";
    case DegradationType::rain: return "rain";
    case DegradationType::low_light: return "low_light";
    case DegradationType::raindrop: return "raindrop";
    case DegradationType::reflection: return "reflection";
    case DegradationType::underwater: return "underwater";
    case DegradationType::snow: return "snow";
    case DegradationType::motion_blur: return "motion_blur";
    case DegradationType::defocus_blur: return "defocus_blur";
    case DegradationType::noise: return "noise";
  }
  return "unknown";
}

// Phrase substituted into the restoration prompt.
inline std::string_view display_name(DegradationType d) {
  switch (d) {
    case DegradationType::haze: return "haze";
    case DegradationType::rain: return "rain";
    case DegradationType::low_light: return "low-light degradation";
    case DegradationType::raindrop: return "raindrops";
    case DegradationType::reflection: return "reflection";
    case DegradationType::underwater: return "underwater color cast";
    case DegradationType::snow: return "snow";
    case DegradationType::motion_blur: return "motion blur";
    case DegradationType::defocus_blur: return "defocus blur";
    case DegradationType::noise: return "noise";
  }
  return "degradation";
}

inline DegradationType parse_degradation(std::string_view name) {
  for (auto d : kAllDegradations) {
    if (to_string(d) == name) return d;
  }
  throw InvalidArgument("unknown degradation type '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Pixel operations

inline ImageBuffer clamp_to_unit(const ImageBuffer& image) {
  ImageBuffer out = image;
  auto values = out.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NonFiniteValue("non-finite pixel value at flat index " + std::to_string(i), i);
    }
    values[i] = std::clamp(values[i], 0.0f, 1.0f);
  }
  return out;
}

namespace detail {

struct Tap {
  int lo;
  int hi;
  double frac;
};

// Half-pixel-centre source coordinate, edge-replicated.
inline Tap bilinear_tap(int dst, int in_size, int out_size) {
  const double scale = static_cast<double>(in_size) / out_size;
  double src = (dst + 0.5) * scale - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
  const int lo = static_cast<int>(std::floor(src));
  const int hi = std::min(lo + 1, in_size - 1);
  return {lo, hi, src - lo};
}

}  // namespace detail

inline ImageBuffer resize_bilinear(const ImageBuffer& image, int out_h, int out_w) {
  if (out_h < kMinImageSide || out_w < kMinImageSide) {
    throw InvalidArgument("degenerate resize target " + std::to_string(out_h) + "x" +
                          std::to_string(out_w));
  }
  if (out_h == image.height() && out_w == image.width()) return image;

  const int c = image.channels();
  ImageBuffer out(out_h, out_w, c);
  std::vector<detail::Tap> xs(out_w);
  for (int x = 0; x < out_w; ++x) xs[x] = detail::bilinear_tap(x, image.width(), out_w);
  for (int y = 0; y < out_h; ++y) {
    const auto ty = detail::bilinear_tap(y, image.height(), out_h);
    for (int x = 0; x < out_w; ++x) {
      const auto& tx = xs[x];
      for (int ch = 0; ch < c; ++ch) {
        const double top = (1.0 - tx.frac) * image.at(ty.lo, tx.lo, ch) + tx.frac * image.at(ty.lo, tx.hi, ch);
        const double bot = (1.0 - tx.frac) * image.at(ty.hi, tx.lo, ch) + tx.frac * image.at(ty.hi, tx.hi, ch);
        const double v = (1.0 - ty.frac) * top + ty.frac * bot;
        out.at(y, x, ch) = std::clamp(static_cast<float>(v), 0.0f, 1.0f);
      }
    }
  }
  return out;
}

inline ImageBuffer to_three_channels(const ImageBuffer& image) {
  if (image.channels() == 3) return image;
  ImageBuffer out(image.height(), image.width(), 3);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(y, x, 0);
  return out;
}

// ITU-R BT.601 luma.
inline std::vector<double> to_gray(const ImageBuffer& image) {
  std::vector<double> gray(static_cast<std::size_t>(image.height()) * image.width());
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      double v;
      if (image.channels() == 1) {
        v = image.at(y, x, 0);
      } else {
        v = 0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) + 0.114 * image.at(y, x, 2);
      }
      gray[static_cast<std::size_t>(y) * image.width() + x] = v;
    }
  }
  return gray;
}

inline ImageBuffer crop(const ImageBuffer& image, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || top + h > image.height() || left + w > image.width()) {
    throw InvalidArgument("crop window out of bounds");
  }
  ImageBuffer out(h, w, image.channels());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = image.at(top + y, left + x, c);
  return out;
}

inline ImageBuffer flip_horizontal(const ImageBuffer& image) {
  ImageBuffer out(image.height(), image.width(), image.channels());
  const int w = image.width();
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = image.at(y, w - 1 - x, c);
  return out;
}

// Counter-clockwise rotation by quarter_turns * 90 degrees.
inline ImageBuffer rotate90(const ImageBuffer& image, int quarter_turns) {
  quarter_turns = ((quarter_turns % 4) + 4) % 4;
  if (quarter_turns == 0) return image;
  const int h = image.height(), w = image.width(), ch = image.channels();
  const bool swap = quarter_turns % 2 == 1;
  ImageBuffer out(swap ? w : h, swap ? h : w, ch);
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      int sy = 0, sx = 0;
      switch (quarter_turns) {
        case 1: sy = x; sx = w - 1 - y; break;
        case 2: sy = h - 1 - y; sx = w - 1 - x; break;
        case 3: sy = h - 1 - x; sx = y; break;
      }
      for (int c = 0; c < ch; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

}  // namespace priorfuse
