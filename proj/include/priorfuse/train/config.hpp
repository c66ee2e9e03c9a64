#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <string>

#include <json.hpp>

#include "priorfuse/align/align.hpp"
#include "priorfuse/backbone/backbone.hpp"
#include "priorfuse/dataset/augment.hpp"

namespace priorfuse::train {

enum class FusionMode { baseline, concat, aligned };

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::baseline: return "baseline";
    case FusionMode::concat: return "concat";
    case FusionMode::aligned: return "aligned";
  }
  return "baseline";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "baseline") return FusionMode::baseline;
  if (s == "concat") return FusionMode::concat;
  if (s == "aligned") return FusionMode::aligned;
  throw InvalidArgument("unknown fusion mode '" + s + "' (baseline|concat|aligned)");
}

struct TrainConfig {
  double lr_init{2e-4};
  double lr_min{1e-6};
  int batch_size{2};
  long long iterations{150000};
  double charbonnier_eps{1e-3};
  FusionMode fusion_mode{FusionMode::aligned};
  RandomSeed seed{0};
  long long checkpoint_every{5000};
  dataset::AugmentationConfig augmentation{};
  backbone::BackboneSpec backbone{};
  align::AlignConfig align{};
  // Validation images are cropped to this square (top-left) when set; full
  // images otherwise.
  std::optional<int> val_crop;
  // Stop (with a checkpoint) once this many iterations are done; simulates an
  // interruption for resume tests.
  std::optional<long long> stop_after;

  void validate() const {
    if (!(lr_init > lr_min && lr_min > 0)) throw InvalidArgument("train: need lr_init > lr_min > 0");
    if (batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
    if (iterations < 0) throw InvalidArgument("train: iterations must be >= 0");
    if (!(charbonnier_eps > 0)) throw InvalidArgument("train: charbonnier_eps must be positive");
    if (checkpoint_every < 1) throw InvalidArgument("train: checkpoint_every must be >= 1");
    augmentation.validate();
    align.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"lr_init", lr_init},
                     {"lr_min", lr_min},
                     {"batch_size", batch_size},
                     {"iterations", iterations},
                     {"charbonnier_eps", charbonnier_eps},
                     {"fusion_mode", to_string(fusion_mode)},
                     {"seed", seed.value},
                     {"checkpoint_every", checkpoint_every},
                     {"augmentation",
                      {{"crop", augmentation.crop},
                       {"hflip_prob", augmentation.hflip_prob},
                       {"rotation_set", augmentation.rotation_set}}},
                     {"backbone", backbone.to_json()},
                     {"align",
                      {{"feat_channels", align.feat_channels},
                       {"taps", align.taps},
                       {"max_offset", align.max_offset},
                       {"use_modulation", align.use_modulation},
                       {"offset_dilation", align.offset_dilation}}}};
    if (val_crop) j["val_crop"] = *val_crop;
    return j;
  }

  // Missing keys keep their defaults, so a config file may be partial.
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr_init = j.value("lr_init", c.lr_init);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.iterations = j.value("iterations", c.iterations);
    c.charbonnier_eps = j.value("charbonnier_eps", c.charbonnier_eps);
    if (j.contains("fusion_mode")) c.fusion_mode = parse_fusion_mode(j["fusion_mode"]);
    c.seed.value = j.value("seed", c.seed.value);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (j.contains("augmentation")) {
      const auto& a = j["augmentation"];
      c.augmentation.crop = a.value("crop", c.augmentation.crop);
      c.augmentation.hflip_prob = a.value("hflip_prob", c.augmentation.hflip_prob);
      c.augmentation.rotation_set = a.value("rotation_set", c.augmentation.rotation_set);
    }
    if (j.contains("backbone")) {
      auto b = c.backbone.to_json();
      b.update(j["backbone"]);
      c.backbone = backbone::BackboneSpec::from_json(b);
    }
    if (j.contains("align")) {
      const auto& a = j["align"];
      c.align.feat_channels = a.value("feat_channels", c.align.feat_channels);
      c.align.taps = a.value("taps", c.align.taps);
      c.align.max_offset = a.value("max_offset", c.align.max_offset);
      c.align.use_modulation = a.value("use_modulation", c.align.use_modulation);
      c.align.offset_dilation = a.value("offset_dilation", c.align.offset_dilation);
    }
    if (j.contains("val_crop")) c.val_crop = j["val_crop"].get<int>();
    c.augmentation.seed = c.seed;
    c.validate();
    return c;
  }
};

// Cosine annealing from lr_init (iteration 0) to lr_min (iteration == iterations).
inline double lr_at(long long iteration, const TrainConfig& cfg) {
  if (iteration < 0 || iteration > cfg.iterations) {
    throw InvalidArgument("lr_at: iteration " + std::to_string(iteration) + " outside [0, " +
                          std::to_string(cfg.iterations) + "]");
  }
  if (cfg.iterations == 0) return cfg.lr_init;
  const double t = static_cast<double>(iteration) / static_cast<double>(cfg.iterations);
  return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

// Mean of sqrt((pred - target)^2 + eps^2) over all elements.
inline double charbonnier_loss(const ImageBuffer& pred, const ImageBuffer& target, double eps) {
  require_same_shape(pred, target, "charbonnier_loss");
  if (!(eps > 0)) throw InvalidArgument("charbonnier_loss: eps must be positive");
  auto a = pred.data();
  auto b = target.data();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += std::sqrt(d * d + eps * eps);
  }
  return s / static_cast<double>(a.size());
}

}  // namespace priorfuse::train
