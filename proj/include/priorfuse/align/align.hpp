#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "priorfuse/core/error.hpp"
#include "priorfuse/core/image.hpp"
#include "priorfuse/core/rng.hpp"
#include "priorfuse/nn/image_tensor.hpp"
#include "priorfuse/nn/ops.hpp"
#include "priorfuse/nn/params.hpp"

namespace priorfuse::align {

// [C,H,W] feature tensor.
template <class T>
using FeatureMap = nn::Var<T>;

struct AlignConfig {
  int in_channels{3};
  int feat_channels{32};
  int taps{9};
  double max_offset{16.0};
  bool use_modulation{true};
  // Dilation of the two offset-head convolutions; widens the displacement the
  // head can observe without adding layers.
  int offset_dilation{2};

  void validate() const {
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(taps))));
    if (taps < 1 || side * side != taps) throw InvalidArgument("align: taps must be a perfect square");
    if (!(max_offset >= 1.0)) throw InvalidArgument("align: max_offset must be >= 1");
    if (feat_channels < 1) throw InvalidArgument("align: feat_channels must be positive");
    if (offset_dilation < 1) throw InvalidArgument("align: offset_dilation must be positive");
    if (in_channels != 1 && in_channels != 3) throw InvalidArgument("align: in_channels must be 1 or 3");
  }
};

// Per-position, per-tap sampling offsets (cells) and optional modulation.
template <class T>
struct AlignmentField {
  nn::Var<T> offsets;     // [2K,H,W], channel 2k = dy, 2k+1 = dx
  nn::Var<T> modulation;  // [K,H,W] in [0,1], empty when disabled
  int taps{9};

  int height() const { return offsets.dim(1); }
  int width() const { return offsets.dim(2); }

  double max_abs_offset() const {
    double m = 0.0;
    for (T v : offsets.value()) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
  }

  // Mean (dy, dx) over all positions and taps.
  std::pair<double, double> mean_offset() const {
    const std::size_t n = static_cast<std::size_t>(height()) * width();
    auto v = offsets.value();
    double sy = 0.0, sx = 0.0;
    for (int k = 0; k < taps; ++k)
      for (std::size_t p = 0; p < n; ++p) {
        sy += v[(2 * k) * n + p];
        sx += v[(2 * k + 1) * n + p];
      }
    const double cnt = static_cast<double>(n) * taps;
    return {sy / cnt, sx / cnt};
  }
};

// Deformable alignment: a shared shallow encoder embeds both images, an
// offset head reads their concatenation, and a modulated deformable layer
// resamples the prior features onto the degraded frame.
//
// Parameters: align.encoder.{conv1,conv2}.{weight,bias},
//             align.offset_head.{conv1,conv2}.{weight,bias},
//             align.mix.{weight,bias}
template <class T>
class AlignModule {
 public:
  AlignModule(AlignConfig cfg, RandomSeed seed) : cfg_(cfg) {
    cfg_.validate();
    const int f = cfg_.feat_channels, k = cfg_.taps, c = cfg_.in_channels;
    params_.add_uniform("align.encoder.conv1.weight", {f, c, 3, 3}, c * 9, seed);
    params_.add_uniform("align.encoder.conv1.bias", {f}, c * 9, seed);
    params_.add_uniform("align.encoder.conv2.weight", {f, f, 3, 3}, f * 9, seed);
    params_.add_uniform("align.encoder.conv2.bias", {f}, f * 9, seed);
    params_.add_uniform("align.offset_head.conv1.weight", {f, 2 * f, 3, 3}, 2 * f * 9, seed);
    params_.add_uniform("align.offset_head.conv1.bias", {f}, 2 * f * 9, seed);
    // Zero-initialised so training starts from the undeformed grid.
    params_.add_constant("align.offset_head.conv2.weight", {head_channels(), f, 3, 3}, T(0));
    params_.add_constant("align.offset_head.conv2.bias", {head_channels()}, T(0));
    params_.add_uniform("align.mix.weight", {f, f * k, 1, 1}, f * k, seed);
    params_.add_uniform("align.mix.bias", {f}, f * k, seed);
  }

  const AlignConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  int head_channels() const { return (cfg_.use_modulation ? 3 : 2) * cfg_.taps; }

  FeatureMap<T> extract_features(const nn::Var<T>& image) const {
    auto h = nn::conv2d(image, p("align.encoder.conv1.weight"), &p("align.encoder.conv1.bias"));
    h = nn::leaky_relu(h);
    return nn::conv2d(h, p("align.encoder.conv2.weight"), &p("align.encoder.conv2.bias"));
  }

  FeatureMap<T> extract_features(const ImageBuffer& image) const { return extract_features(nn::to_tensor<T>(image)); }

  AlignmentField<T> predict_offsets(const FeatureMap<T>& deg_feat, const FeatureMap<T>& prior_feat) const {
    if (deg_feat.shape() != prior_feat.shape()) {
      throw DimensionMismatch("predict_offsets: degraded features " + nn::shape_string(deg_feat.shape()) +
                              " vs prior features " + nn::shape_string(prior_feat.shape()));
    }
    const int d = cfg_.offset_dilation;
    auto joint = nn::concat_channels<T>({deg_feat, prior_feat});
    auto h = nn::leaky_relu(nn::conv2d(joint, p("align.offset_head.conv1.weight"), &p("align.offset_head.conv1.bias"), d));
    auto raw = nn::conv2d(h, p("align.offset_head.conv2.weight"), &p("align.offset_head.conv2.bias"), d);
    return field_from_raw(raw);
  }

  // Bounded maps applied to the raw head output.
  AlignmentField<T> field_from_raw(const nn::Var<T>& raw) const {
    const int k = cfg_.taps;
    AlignmentField<T> field;
    field.taps = k;
    field.offsets = nn::scale(nn::tanh(nn::slice_channels(raw, 0, 2 * k)), static_cast<T>(cfg_.max_offset));
    if (cfg_.use_modulation) field.modulation = nn::sigmoid(nn::slice_channels(raw, 2 * k, k));
    return field;
  }

  FeatureMap<T> deformable_sample(const FeatureMap<T>& prior_feat, const AlignmentField<T>& field) const {
    if (field.height() != prior_feat.dim(1) || field.width() != prior_feat.dim(2)) {
      throw DimensionMismatch("deformable_sample: field resolution does not match features");
    }
    const nn::Var<T>* mod = field.modulation ? &field.modulation : nullptr;
    auto cols = nn::deform_gather(prior_feat, field.offsets, mod, field.taps);
    return nn::conv2d_valid(cols, p("align.mix.weight"), &p("align.mix.bias"));
  }

  struct Result {
    FeatureMap<T> aligned;
    AlignmentField<T> field;
  };

  Result align(const nn::Var<T>& degraded, const nn::Var<T>& prior) const {
    if (degraded.shape() != prior.shape()) {
      throw DimensionMismatch("align_prior: degraded " + nn::shape_string(degraded.shape()) + " vs prior " +
                              nn::shape_string(prior.shape()));
    }
    auto deg_feat = extract_features(degraded);
    auto prior_feat = extract_features(prior);
    auto field = predict_offsets(deg_feat, prior_feat);
    auto aligned = deformable_sample(prior_feat, field);
    return {std::move(aligned), std::move(field)};
  }

  FeatureMap<T> align_prior(const nn::Var<T>& degraded, const nn::Var<T>& prior) const {
    return align(degraded, prior).aligned;
  }

  FeatureMap<T> align_prior(const ImageBuffer& degraded, const ImageBuffer& prior) const {
    require_same_shape(degraded, prior, "align_prior");
    return align_prior(nn::to_tensor<T>(degraded), nn::to_tensor<T>(prior));
  }

  // Mixing weights that pass the centre tap of each channel straight through.
  void set_identity_mix() {
    const int f = cfg_.feat_channels, k = cfg_.taps;
    auto w = params_.get_mutable("align.mix.weight").mutable_value();
    std::fill(w.begin(), w.end(), T(0));
    for (int o = 0; o < f; ++o) w[static_cast<std::size_t>(o) * f * k + o * k + k / 2] = T(1);
    auto b = params_.get_mutable("align.mix.bias").mutable_value();
    std::fill(b.begin(), b.end(), T(0));
  }

 private:
  const nn::Var<T>& p(const std::string& name) const { return params_.get(name); }

  AlignConfig cfg_;
  nn::ParamStore<T> params_;
};

}  // namespace priorfuse::align
