#pragma once

#include <numeric>
#include <vector>

#include "priorfuse/core/rng.hpp"
#include "priorfuse/dataset/triplet.hpp"

namespace priorfuse::dataset {

struct AugmentationConfig {
  int crop{256};
  double hflip_prob{0.5};
  std::vector<int> rotation_set{0, 90, 180, 270};
  RandomSeed seed{0};

  void validate() const {
    if (crop < kMinImageSide) throw InvalidArgument("augmentation: crop below minimum image side");
    if (hflip_prob < 0.0 || hflip_prob > 1.0) throw InvalidArgument("augmentation: hflip_prob outside [0,1]");
    if (rotation_set.empty()) throw InvalidArgument("augmentation: empty rotation set");
    for (int r : rotation_set)
      if (r != 0 && r != 90 && r != 180 && r != 270) throw InvalidArgument("augmentation: rotations must be multiples of 90 in [0,270]");
  }
};

struct PatchTransform {
  int top{0};
  int left{0};
  int size{0};
  bool flip{false};
  int quarter_turns{0};  // counter-clockwise, applied after the flip
};

// Pure function of (seed, draw_index, dims).
inline PatchTransform draw_transform(int height, int width, const AugmentationConfig& cfg, std::uint64_t draw_index) {
  cfg.validate();
  if (height < cfg.crop || width < cfg.crop) {
    throw InvalidArgument("image " + std::to_string(height) + "x" + std::to_string(width) + " smaller than crop " +
                          std::to_string(cfg.crop));
  }
  Rng rng(cfg.seed, "patch", draw_index);
  PatchTransform t;
  t.size = cfg.crop;
  t.top = static_cast<int>(rng.below(static_cast<std::uint64_t>(height - cfg.crop + 1)));
  t.left = static_cast<int>(rng.below(static_cast<std::uint64_t>(width - cfg.crop + 1)));
  t.flip = rng.bernoulli(cfg.hflip_prob);
  t.quarter_turns = cfg.rotation_set[rng.below(cfg.rotation_set.size())] / 90;
  return t;
}

inline ImageBuffer apply_transform(const ImageBuffer& img, const PatchTransform& t) {
  auto out = crop(img, t.top, t.left, t.size, t.size);
  if (t.flip) out = flip_horizontal(out);
  return rotate90(out, t.quarter_turns);
}

inline SampleTriplet sample_patch(const SampleTriplet& triplet, const AugmentationConfig& cfg, std::uint64_t draw_index) {
  triplet.validate();
  const auto t = draw_transform(triplet.height(), triplet.width(), cfg, draw_index);
  SampleTriplet out;
  out.id = triplet.id;
  out.degraded = apply_transform(triplet.degraded, t);
  if (triplet.prior) out.prior = apply_transform(*triplet.prior, t);
  if (triplet.gt) out.gt = apply_transform(*triplet.gt, t);
  return out;
}

// Fisher-Yates over [0, n) seeded by (seed, epoch).
inline std::vector<std::size_t> epoch_permutation(std::size_t n, RandomSeed seed, std::uint64_t epoch) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  Rng rng(seed, "epoch", epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

// Sample index for the flat draw counter, walking epochs in order.
inline std::size_t sample_for_draw(std::size_t n, RandomSeed seed, std::uint64_t draw) {
  if (n == 0) throw InvalidArgument("empty dataset");
  return epoch_permutation(n, seed, draw / n)[draw % n];
}

}  // namespace priorfuse::dataset
