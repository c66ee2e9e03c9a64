#pragma once

#include <memory>
#include <optional>

#include "priorfuse/nn/archive.hpp"
#include "priorfuse/train/config.hpp"

namespace priorfuse::train {

// Backbone spec implied by a fusion mode: concat feeds the raw prior image,
// aligned feeds the aligned prior features.
inline backbone::BackboneSpec spec_for_mode(backbone::BackboneSpec spec, FusionMode mode, const align::AlignConfig& ac) {
  switch (mode) {
    case FusionMode::baseline:
      spec.fusion = backbone::Fusion::none;
      spec.prior_channels = 0;
      break;
    case FusionMode::concat:
      spec.fusion = backbone::Fusion::prior_concat;
      spec.prior_channels = spec.image_channels;
      break;
    case FusionMode::aligned:
      spec.fusion = backbone::Fusion::prior_concat;
      spec.prior_channels = ac.feat_channels;
      break;
  }
  return spec;
}

// Alignment module (aligned mode only) plus backbone, with one merged
// parameter store in a fixed order: align.* then backbone.*.
template <class T>
class Model {
 public:
  Model(FusionMode mode, const backbone::BackboneSpec& spec, const align::AlignConfig& ac, RandomSeed seed) : mode_(mode) {
    auto bspec = spec_for_mode(spec, mode, ac);
    if (mode == FusionMode::aligned) {
      auto cfg = ac;
      cfg.in_channels = bspec.image_channels;
      align_ = std::make_unique<align::AlignModule<T>>(cfg, seed);
      params_.merge(align_->params());
    }
    net_ = backbone::build_backbone<T>(bspec, seed);
    params_.merge(net_->params());
  }

  explicit Model(const TrainConfig& cfg) : Model(cfg.fusion_mode, cfg.backbone, cfg.align, cfg.seed) {}

  FusionMode mode() const { return mode_; }
  bool reads_prior() const { return mode_ != FusionMode::baseline; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  const backbone::RestorationNet<T>& net() const { return *net_; }
  const align::AlignModule<T>* aligner() const { return align_.get(); }

  // Raw (unclamped) restored tensor, any spatial size.
  nn::Var<T> forward(const nn::Var<T>& degraded, const nn::Var<T>* prior) const {
    if (reads_prior() && !(prior && *prior)) throw InvalidArgument("model in " + to_string(mode_) + " mode needs a prior");
    switch (mode_) {
      case FusionMode::baseline: return net_->forward_any_size(degraded, nullptr);
      case FusionMode::concat: return net_->forward_any_size(degraded, prior);
      case FusionMode::aligned: {
        auto aligned = align_->align_prior(degraded, *prior);
        return net_->forward_any_size(degraded, &aligned);
      }
    }
    return {};
  }

  ImageBuffer restore(const ImageBuffer& degraded, const ImageBuffer* prior) const {
    nn::NoGradGuard guard;
    std::optional<nn::Var<T>> p;
    if (reads_prior()) {
      if (!prior) throw InvalidArgument("model in " + to_string(mode_) + " mode needs a prior");
      require_same_shape(degraded, *prior, "restore");
      p = nn::to_tensor<T>(*prior);
    }
    auto out = forward(nn::to_tensor<T>(degraded), p ? &*p : nullptr);
    return nn::to_image(out, true);
  }

  // Offsets predicted for a (degraded, prior) pair; aligned mode only.
  align::AlignmentField<T> alignment_field(const ImageBuffer& degraded, const ImageBuffer& prior) const {
    if (!align_) throw InvalidArgument("alignment field requested from a model without an alignment module");
    nn::NoGradGuard guard;
    return align_->align(nn::to_tensor<T>(degraded), nn::to_tensor<T>(prior)).field;
  }

 private:
  FusionMode mode_;
  std::unique_ptr<align::AlignModule<T>> align_;
  std::unique_ptr<backbone::RestorationNet<T>> net_;
  nn::ParamStore<T> params_;
};

}  // namespace priorfuse::train
