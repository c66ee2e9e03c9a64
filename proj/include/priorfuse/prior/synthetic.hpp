#pragma once

#include <cmath>

#include "priorfuse/core/image.hpp"
#include "priorfuse/core/rng.hpp"

namespace priorfuse::prior {

struct SyntheticPriorConfig {
  double max_translation{8.0};
  double max_scale_delta{0.03};
  double color_jitter{0.05};
  RandomSeed seed{0};

  void validate() const {
    if (max_translation < 0 || max_scale_delta < 0 || color_jitter < 0) {
      throw InvalidArgument("synthetic prior magnitudes must be non-negative");
    }
    if (max_scale_delta >= 0.5) throw InvalidArgument("synthetic prior scale delta must be below 0.5");
  }
};

struct SimilarityDraw {
  double dy{0}, dx{0}, scale{1};
  double gain[3]{1, 1, 1};
};

inline SimilarityDraw draw_similarity(const SyntheticPriorConfig& cfg, std::uint64_t index) {
  cfg.validate();
  Rng rng(cfg.seed, "synthetic-prior", index);
  SimilarityDraw d;
  d.dy = rng.uniform(-1, 1) * cfg.max_translation;
  d.dx = rng.uniform(-1, 1) * cfg.max_translation;
  d.scale = 1.0 + rng.uniform(-1, 1) * cfg.max_scale_delta;
  for (double& g : d.gain) g = 1.0 + rng.uniform(-1, 1) * cfg.color_jitter;
  return d;
}

namespace detail {

// Reflect-101 on a continuous coordinate.
inline double reflect_coord(double v, int n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * (n - 1);
  v = std::fmod(std::abs(v), period);
  return v > n - 1 ? period - v : v;
}

}  // namespace detail

// Content moves by (dy, dx) and scales by `scale` about the image centre:
// out(p) = image(c + (p - c - d) / scale), bilinear, reflected borders.
inline ImageBuffer warp_similarity(const ImageBuffer& image, double dy, double dx, double scale) {
  if (!(scale > 0)) throw InvalidArgument("warp scale must be positive");
  const int h = image.height(), w = image.width(), ch = image.channels();
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  ImageBuffer out(h, w, ch);
  for (int y = 0; y < h; ++y) {
    const double sy = detail::reflect_coord(cy + (y - cy - dy) / scale, h);
    const int y0 = std::min(static_cast<int>(sy), h - 1), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < w; ++x) {
      const double sx = detail::reflect_coord(cx + (x - cx - dx) / scale, w);
      const int x0 = std::min(static_cast<int>(sx), w - 1), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      for (int c = 0; c < ch; ++c) {
        const double v = (1 - fy) * ((1 - fx) * image.at(y0, x0, c) + fx * image.at(y0, x1, c)) +
                         fy * ((1 - fx) * image.at(y1, x0, c) + fx * image.at(y1, x1, c));
        out.at(y, x, c) = static_cast<float>(v);
      }
    }
  }
  return out;
}

// Offline stand-in for a generative prior: clean content with mild geometric
// drift and a colour cast. `index` selects an independent draw per image.
inline ImageBuffer synthesize_offline_prior(const ImageBuffer& gt, const SyntheticPriorConfig& cfg, std::uint64_t index = 0) {
  const auto d = draw_similarity(cfg, index);
  auto out = warp_similarity(gt, d.dy, d.dx, d.scale);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      for (int c = 0; c < out.channels(); ++c) out.at(y, x, c) = static_cast<float>(out.at(y, x, c) * d.gain[c]);
  return clamp_to_unit(out);
}

}  // namespace priorfuse::prior
