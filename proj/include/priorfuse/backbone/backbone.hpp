#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "priorfuse/core/error.hpp"
#include "priorfuse/core/image.hpp"
#include "priorfuse/core/rng.hpp"
#include "priorfuse/nn/image_tensor.hpp"
#include "priorfuse/nn/ops.hpp"
#include "priorfuse/nn/params.hpp"

namespace priorfuse::backbone {

enum class BackboneKind { restormer_tiny, resnet_tiny };
enum class Fusion { none, prior_concat };

inline std::string to_string(BackboneKind k) { return k == BackboneKind::restormer_tiny ? "restormer_tiny" : "resnet_tiny"; }
inline std::string to_string(Fusion f) { return f == Fusion::none ? "none" : "prior_concat"; }

inline BackboneKind parse_kind(const std::string& s) {
  if (s == "restormer_tiny") return BackboneKind::restormer_tiny;
  if (s == "resnet_tiny") return BackboneKind::resnet_tiny;
  throw InvalidArgument("unknown backbone kind '" + s + "'");
}

inline Fusion parse_fusion(const std::string& s) {
  if (s == "none") return Fusion::none;
  if (s == "prior_concat") return Fusion::prior_concat;
  throw InvalidArgument("unknown fusion '" + s + "'");
}

struct BackboneSpec {
  BackboneKind kind{BackboneKind::restormer_tiny};
  int width{16};
  // restormer_tiny: blocks at levels 1..4 (decoder mirrors 1..3, refinement uses level 1).
  // resnet_tiny: total residual blocks = sum(depth).
  std::vector<int> depth{1, 1, 1, 1};
  int downsample_factor{8};
  Fusion fusion{Fusion::none};
  int prior_channels{0};
  int image_channels{3};
  bool residual_mode{true};
  bool zero_init_output{true};
  double ffn_expansion{2.66};

  int levels() const { return static_cast<int>(depth.size()); }

  void validate() const {
    if (width < 8) throw InvalidArgument("backbone: width must be >= 8");
    if (depth.empty()) throw InvalidArgument("backbone: depth list is empty");
    for (int d : depth)
      if (d < 1) throw InvalidArgument("backbone: every stage needs at least one block");
    if (downsample_factor < 1 || (downsample_factor & (downsample_factor - 1)) != 0)
      throw InvalidArgument("backbone: downsample_factor must be a power of two");
    if (image_channels != 1 && image_channels != 3) throw InvalidArgument("backbone: image_channels must be 1 or 3");
    if (fusion == Fusion::prior_concat && prior_channels < 1)
      throw InvalidArgument("backbone: prior_concat fusion needs prior_channels >= 1");
    if (kind == BackboneKind::restormer_tiny) {
      if (width % 2 != 0) throw InvalidArgument("backbone: restormer width must be even");
      if (downsample_factor != (1 << (levels() - 1)))
        throw InvalidArgument("backbone: restormer downsample_factor must equal 2^(levels-1)");
    } else if (downsample_factor != 1) {
      throw InvalidArgument("backbone: resnet_tiny runs at full resolution (downsample_factor 1)");
    }
    if (!(ffn_expansion > 0.0)) throw InvalidArgument("backbone: ffn_expansion must be positive");
  }

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)},
            {"width", width},
            {"depth", depth},
            {"downsample_factor", downsample_factor},
            {"fusion", to_string(fusion)},
            {"prior_channels", prior_channels},
            {"image_channels", image_channels},
            {"residual_mode", residual_mode},
            {"zero_init_output", zero_init_output},
            {"ffn_expansion", ffn_expansion}};
  }

  static BackboneSpec from_json(const nlohmann::json& j) {
    BackboneSpec s;
    s.kind = parse_kind(j.value("kind", std::string("restormer_tiny")));
    s.width = j.value("width", s.width);
    s.depth = j.value("depth", s.depth);
    s.downsample_factor = j.value("downsample_factor", s.downsample_factor);
    s.fusion = parse_fusion(j.value("fusion", std::string("none")));
    s.prior_channels = j.value("prior_channels", s.prior_channels);
    s.image_channels = j.value("image_channels", s.image_channels);
    s.residual_mode = j.value("residual_mode", s.residual_mode);
    s.zero_init_output = j.value("zero_init_output", s.zero_init_output);
    s.ffn_expansion = j.value("ffn_expansion", s.ffn_expansion);
    s.validate();
    return s;
  }
};

template <class T>
struct RestorationOutput {
  ImageBuffer restored;
  bool residual_mode{true};
};

// Restoration network interface. `forward` maps a [C,H,W] degraded tensor
// (dims divisible by downsample_factor) plus optional [P,H,W] prior features
// to the restored tensor, unclamped, so losses see the raw prediction.
template <class T>
class RestorationNet {
 public:
  explicit RestorationNet(BackboneSpec spec) : spec_(std::move(spec)) { spec_.validate(); }
  virtual ~RestorationNet() = default;

  const BackboneSpec& spec() const { return spec_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  std::size_t parameter_count() const { return params_.parameter_count(); }

  nn::Var<T> forward(const nn::Var<T>& degraded, const nn::Var<T>* prior) const {
    if (spec_.fusion == Fusion::prior_concat) {
      if (!prior || !*prior) throw InvalidArgument("restore: backbone fuses a prior but none was given");
      if (prior->dim(1) != degraded.dim(1) || prior->dim(2) != degraded.dim(2))
        throw DimensionMismatch("restore: prior features " + nn::shape_string(prior->shape()) +
                                " vs degraded " + nn::shape_string(degraded.shape()));
      if (prior->dim(0) != spec_.prior_channels)
        throw DimensionMismatch("restore: prior has " + std::to_string(prior->dim(0)) + " channels, spec expects " +
                                std::to_string(spec_.prior_channels));
    }
    if (degraded.dim(0) != spec_.image_channels) throw DimensionMismatch("restore: image channel count");
    const int f = spec_.downsample_factor;
    if (degraded.dim(1) % f != 0 || degraded.dim(2) % f != 0)
      throw DimensionMismatch("restore: forward input must be a multiple of downsample_factor");
    auto out = body(degraded, spec_.fusion == Fusion::prior_concat ? prior : nullptr);
    return spec_.residual_mode ? nn::add(degraded, out) : out;
  }

  // Pads to the downsample multiple (reflect, bottom/right), runs forward,
  // crops back. Gradients flow through the crop.
  nn::Var<T> forward_any_size(const nn::Var<T>& degraded, const nn::Var<T>* prior) const {
    const int f = spec_.downsample_factor;
    const int h = degraded.dim(1), w = degraded.dim(2);
    const int ph = (f - h % f) % f, pw = (f - w % f) % f;
    if (ph == 0 && pw == 0) return forward(degraded, prior);
    auto deg_p = nn::pad_reflect(degraded, 0, ph, 0, pw);
    nn::Var<T> prior_p;
    if (prior && *prior) prior_p = nn::pad_reflect(*prior, 0, ph, 0, pw);
    auto out = forward(deg_p, prior_p ? &prior_p : nullptr);
    return nn::crop_spatial(out, h, w);
  }

  RestorationOutput<T> restore(const ImageBuffer& degraded, const nn::Var<T>* prior) const {
    nn::NoGradGuard guard;
    auto out = forward_any_size(nn::to_tensor<T>(degraded), prior);
    return {nn::to_image(out, true), spec_.residual_mode};
  }

 protected:
  virtual nn::Var<T> body(const nn::Var<T>& degraded, const nn::Var<T>* prior) const = 0;

  const nn::Var<T>& p(const std::string& name) const { return params_.get(name); }

  // Shallow embedding plus optional prior fusion, shared by both backbones:
  // embed (3x3) -> [concat proj(prior) (1x1)] -> fuse (1x1).
  void add_stem(RandomSeed seed, bool bias) {
    const int w = spec_.width, c = spec_.image_channels;
    params_.add_uniform("backbone.embed.weight", {w, c, 3, 3}, c * 9, seed);
    if (bias) params_.add_uniform("backbone.embed.bias", {w}, c * 9, seed);
    int fuse_in = w;
    if (spec_.fusion == Fusion::prior_concat) {
      params_.add_uniform("backbone.prior_proj.weight", {w, spec_.prior_channels, 1, 1}, spec_.prior_channels, seed);
      params_.add_uniform("backbone.prior_proj.bias", {w}, spec_.prior_channels, seed);
      fuse_in = 2 * w;
    }
    params_.add_uniform("backbone.fuse.weight", {w, fuse_in, 1, 1}, fuse_in, seed);
    if (bias) params_.add_uniform("backbone.fuse.bias", {w}, fuse_in, seed);
  }

  nn::Var<T> stem(const nn::Var<T>& degraded, const nn::Var<T>* prior, bool bias) const {
    auto x = nn::conv2d(degraded, p("backbone.embed.weight"), bias ? &p("backbone.embed.bias") : nullptr);
    if (prior) {
      auto pp = nn::conv2d_valid(*prior, p("backbone.prior_proj.weight"), &p("backbone.prior_proj.bias"));
      x = nn::concat_channels<T>({x, pp});
    }
    return nn::conv2d_valid(x, p("backbone.fuse.weight"), bias ? &p("backbone.fuse.bias") : nullptr);
  }

  void add_output(int in_channels, RandomSeed seed, bool bias) {
    const int c = spec_.image_channels;
    if (spec_.zero_init_output) {
      params_.add_constant("backbone.output.weight", {c, in_channels, 3, 3}, T(0));
      if (bias) params_.add_constant("backbone.output.bias", {c}, T(0));
    } else {
      params_.add_uniform("backbone.output.weight", {c, in_channels, 3, 3}, in_channels * 9, seed);
      if (bias) params_.add_uniform("backbone.output.bias", {c}, in_channels * 9, seed);
    }
  }

  BackboneSpec spec_;
  nn::ParamStore<T> params_;
};

// Four-stage U-shaped transformer in the Restormer layout: multi-Dconv
// transposed attention and gated Dconv feed-forward blocks, pixel-unshuffle
// downsampling, skip concatenation with 1x1 channel reduction, and a
// refinement stage at twice the base width.
template <class T>
class RestormerTiny final : public RestorationNet<T> {
  using Base = RestorationNet<T>;
  using Base::p;
  using Base::params_;
  using Base::spec_;

 public:
  RestormerTiny(BackboneSpec spec, RandomSeed seed) : Base(std::move(spec)) {
    const int w = spec_.width, levels = spec_.levels();
    this->add_stem(seed, false);
    for (int l = 0; l < levels; ++l) {
      const int c = w << l;
      add_blocks("backbone.enc" + std::to_string(l + 1), spec_.depth[l], c, heads_at(l), seed);
      if (l + 1 < levels) {
        params_.add_uniform("backbone.down" + std::to_string(l + 1) + ".weight", {c / 2, c, 3, 3}, c * 9, seed);
      }
    }
    for (int l = levels - 2; l >= 0; --l) {
      const int c = w << l;
      const int below = w << (l + 1);
      params_.add_uniform("backbone.up" + std::to_string(l + 1) + ".weight", {2 * below, below, 3, 3}, below * 9, seed);
      if (l > 0) {
        params_.add_uniform("backbone.reduce" + std::to_string(l + 1) + ".weight", {c, 2 * c, 1, 1}, 2 * c, seed);
        add_blocks("backbone.dec" + std::to_string(l + 1), spec_.depth[l], c, heads_at(l), seed);
      } else {
        add_blocks("backbone.dec1", spec_.depth[0], 2 * c, heads_at(0), seed);
      }
    }
    add_blocks("backbone.refine", spec_.depth[0], levels > 1 ? 2 * w : w, heads_at(0), seed);
    this->add_output(levels > 1 ? 2 * w : w, seed, false);
  }

  static int heads_at(int level) { return 1 << level; }

  static int ffn_hidden(int channels, double expansion) { return static_cast<int>(channels * expansion); }

 protected:
  nn::Var<T> body(const nn::Var<T>& degraded, const nn::Var<T>* prior) const override {
    const int levels = spec_.levels();
    auto x = this->stem(degraded, prior, false);
    std::vector<nn::Var<T>> skips;
    for (int l = 0; l < levels; ++l) {
      x = run_blocks("backbone.enc" + std::to_string(l + 1), spec_.depth[l], x, heads_at(l));
      if (l + 1 < levels) {
        skips.push_back(x);
        x = nn::pixel_unshuffle(nn::conv2d(x, p("backbone.down" + std::to_string(l + 1) + ".weight")), 2);
      }
    }
    for (int l = levels - 2; l >= 0; --l) {
      x = nn::pixel_shuffle(nn::conv2d(x, p("backbone.up" + std::to_string(l + 1) + ".weight")), 2);
      x = nn::concat_channels<T>({x, skips[l]});
      if (l > 0) {
        x = nn::conv2d_valid(x, p("backbone.reduce" + std::to_string(l + 1) + ".weight"), nullptr);
        x = run_blocks("backbone.dec" + std::to_string(l + 1), spec_.depth[l], x, heads_at(l));
      } else {
        x = run_blocks("backbone.dec1", spec_.depth[0], x, heads_at(0));
      }
    }
    x = run_blocks("backbone.refine", spec_.depth[0], x, heads_at(0));
    return nn::conv2d(x, p("backbone.output.weight"));
  }

 private:
  void add_blocks(const std::string& prefix, int count, int c, int heads, RandomSeed seed) {
    const int hidden = ffn_hidden(c, spec_.ffn_expansion);
    for (int b = 0; b < count; ++b) {
      const std::string s = prefix + "." + std::to_string(b);
      params_.add_constant(s + ".norm1.weight", {c}, T(1));
      params_.add_constant(s + ".norm1.bias", {c}, T(0));
      params_.add_uniform(s + ".attn.qkv.weight", {3 * c, c, 1, 1}, c, seed);
      params_.add_uniform(s + ".attn.qkv_dw.weight", {3 * c, 1, 3, 3}, 9, seed);
      params_.add_constant(s + ".attn.temperature", {heads}, T(1));
      params_.add_uniform(s + ".attn.proj.weight", {c, c, 1, 1}, c, seed);
      params_.add_constant(s + ".norm2.weight", {c}, T(1));
      params_.add_constant(s + ".norm2.bias", {c}, T(0));
      params_.add_uniform(s + ".ffn.project_in.weight", {2 * hidden, c, 1, 1}, c, seed);
      params_.add_uniform(s + ".ffn.dw.weight", {2 * hidden, 1, 3, 3}, 9, seed);
      params_.add_uniform(s + ".ffn.project_out.weight", {c, hidden, 1, 1}, hidden, seed);
    }
  }

  nn::Var<T> run_blocks(const std::string& prefix, int count, nn::Var<T> x, int heads) const {
    for (int b = 0; b < count; ++b) x = block(prefix + "." + std::to_string(b), x, heads);
    return x;
  }

  nn::Var<T> block(const std::string& s, const nn::Var<T>& x, int heads) const {
    const int c = x.dim(0);
    auto h = nn::layer_norm_channels(x, p(s + ".norm1.weight"), p(s + ".norm1.bias"));
    auto qkv = nn::depthwise_conv2d(nn::conv2d_valid(h, p(s + ".attn.qkv.weight"), nullptr), p(s + ".attn.qkv_dw.weight"));
    auto attn = nn::channel_attention(nn::slice_channels(qkv, 0, c), nn::slice_channels(qkv, c, c),
                                      nn::slice_channels(qkv, 2 * c, c), p(s + ".attn.temperature"), heads);
    auto y = nn::add(x, nn::conv2d_valid(attn, p(s + ".attn.proj.weight"), nullptr));

    auto g = nn::layer_norm_channels(y, p(s + ".norm2.weight"), p(s + ".norm2.bias"));
    auto in = nn::depthwise_conv2d(nn::conv2d_valid(g, p(s + ".ffn.project_in.weight"), nullptr), p(s + ".ffn.dw.weight"));
    const int hidden = in.dim(0) / 2;
    auto gated = nn::mul(nn::gelu(nn::slice_channels(in, 0, hidden)), nn::slice_channels(in, hidden, hidden));
    return nn::add(y, nn::conv2d_valid(gated, p(s + ".ffn.project_out.weight"), nullptr));
  }
};

// Plain full-resolution residual CNN.
template <class T>
class ResNetTiny final : public RestorationNet<T> {
  using Base = RestorationNet<T>;
  using Base::p;
  using Base::params_;
  using Base::spec_;

 public:
  ResNetTiny(BackboneSpec spec, RandomSeed seed) : Base(std::move(spec)) {
    const int w = spec_.width;
    this->add_stem(seed, true);
    for (int b = 0; b < blocks(); ++b) {
      const std::string s = "backbone.res." + std::to_string(b);
      params_.add_uniform(s + ".conv1.weight", {w, w, 3, 3}, w * 9, seed);
      params_.add_uniform(s + ".conv1.bias", {w}, w * 9, seed);
      params_.add_uniform(s + ".conv2.weight", {w, w, 3, 3}, w * 9, seed);
      params_.add_uniform(s + ".conv2.bias", {w}, w * 9, seed);
    }
    this->add_output(w, seed, true);
  }

  int blocks() const {
    int n = 0;
    for (int d : spec_.depth) n += d;
    return n;
  }

 protected:
  nn::Var<T> body(const nn::Var<T>& degraded, const nn::Var<T>* prior) const override {
    auto x = this->stem(degraded, prior, true);
    for (int b = 0; b < blocks(); ++b) {
      const std::string s = "backbone.res." + std::to_string(b);
      auto h = nn::leaky_relu(nn::conv2d(x, p(s + ".conv1.weight"), &p(s + ".conv1.bias")));
      x = nn::add(x, nn::conv2d(h, p(s + ".conv2.weight"), &p(s + ".conv2.bias")));
    }
    return nn::conv2d(x, p("backbone.output.weight"), &p("backbone.output.bias"));
  }
};

template <class T>
std::unique_ptr<RestorationNet<T>> build_backbone(const BackboneSpec& spec, RandomSeed seed) {
  spec.validate();
  if (spec.kind == BackboneKind::restormer_tiny) return std::make_unique<RestormerTiny<T>>(spec, seed);
  return std::make_unique<ResNetTiny<T>>(spec, seed);
}

}  // namespace priorfuse::backbone
