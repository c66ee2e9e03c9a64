#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "priorfuse/core/error.hpp"
#include "priorfuse/core/hash.hpp"
#include "priorfuse/core/image.hpp"

namespace priorfuse::metrics {

struct MetricConfig {
  double max_value{1.0};
  double psnr_cap{100.0};
  int ssim_window{11};
  double ssim_sigma{1.5};
  double ssim_k1{0.01};
  double ssim_k2{0.03};

  void validate() const {
    if (!(max_value > 0.0)) throw InvalidArgument("metrics: max_value must be positive");
    if (ssim_window < 3 || ssim_window % 2 == 0) throw InvalidArgument("metrics: ssim window must be odd and >= 3");
    if (!(ssim_sigma > 0.0)) throw InvalidArgument("metrics: ssim sigma must be positive");
  }
};

inline double mse(const ImageBuffer& pred, const ImageBuffer& ref) {
  require_same_shape(pred, ref, "mse");
  auto a = pred.data();
  auto b = ref.data();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

// Single MSE across all channels; psnr_cap when the images are identical.
inline double psnr(const ImageBuffer& pred, const ImageBuffer& ref, const MetricConfig& cfg = {}) {
  cfg.validate();
  const double m = mse(pred, ref);
  if (m == 0.0) return cfg.psnr_cap;
  return std::min(cfg.psnr_cap, 10.0 * std::log10(cfg.max_value * cfg.max_value / m));
}

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  const int r = size / 2;
  double s = 0.0;
  for (int i = 0; i < size; ++i) {
    g[i] = std::exp(-static_cast<double>((i - r) * (i - r)) / (2.0 * sigma * sigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

namespace detail {

// Separable "valid" filtering of one channel.
inline std::vector<double> filter_valid(const std::vector<double>& src, int h, int w, const std::vector<double>& g) {
  const int k = static_cast<int>(g.size());
  const int oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += g[i] * src[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += g[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

}  // namespace detail

// Mean local SSIM over every position where the Gaussian window fits,
// computed per channel and averaged across channels.
inline double ssim(const ImageBuffer& pred, const ImageBuffer& ref, const MetricConfig& cfg = {}) {
  cfg.validate();
  require_same_shape(pred, ref, "ssim");
  const int h = pred.height(), w = pred.width(), k = cfg.ssim_window;
  if (h < k || w < k) {
    throw InvalidArgument("ssim: image " + pred.shape_string() + " smaller than window " + std::to_string(k));
  }
  const auto g = gaussian_window(k, cfg.ssim_sigma);
  const double c1 = (cfg.ssim_k1 * cfg.max_value) * (cfg.ssim_k1 * cfg.max_value);
  const double c2 = (cfg.ssim_k2 * cfg.max_value) * (cfg.ssim_k2 * cfg.max_value);
  const std::size_t n = static_cast<std::size_t>(h) * w;
  double total = 0.0;
  for (int c = 0; c < pred.channels(); ++c) {
    std::vector<double> a(n), b(n), aa(n), bb(n), ab(n);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        a[i] = pred.at(y, x, c);
        b[i] = ref.at(y, x, c);
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
      }
    const auto mu_a = detail::filter_valid(a, h, w, g);
    const auto mu_b = detail::filter_valid(b, h, w, g);
    const auto e_aa = detail::filter_valid(aa, h, w, g);
    const auto e_bb = detail::filter_valid(bb, h, w, g);
    const auto e_ab = detail::filter_valid(ab, h, w, g);
    double s = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double va = e_aa[i] - mu_a[i] * mu_a[i];
      const double vb = e_bb[i] - mu_b[i] * mu_b[i];
      const double cov = e_ab[i] - mu_a[i] * mu_b[i];
      s += ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2)) /
           ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
    }
    total += s / static_cast<double>(mu_a.size());
  }
  return total / pred.channels();
}

// ---------------------------------------------------------------------------
// Perceptual quality through an external scorer.

class ProviderUnavailable : public Error {
 public:
  using Error::Error;
};

class IqaProvider {
 public:
  virtual ~IqaProvider() = default;
  virtual std::string name() const = 0;
  virtual std::string version() const { return "1"; }
  // Score in [0,1]; throws ProviderUnavailable when the backend cannot answer.
  virtual double score(const ImageBuffer& image) = 0;
};

class ConstantIqaProvider final : public IqaProvider {
 public:
  explicit ConstantIqaProvider(double value) : value_(value) {
    if (value < 0.0 || value > 1.0) throw InvalidArgument("constant IQA value must be in [0,1]");
  }
  std::string name() const override { return "constant"; }
  double score(const ImageBuffer&) override { return value_; }

 private:
  double value_;
};

class UnavailableIqaProvider final : public IqaProvider {
 public:
  std::string name() const override { return "unavailable"; }
  double score(const ImageBuffer&) override { throw ProviderUnavailable("no IQA backend configured"); }
};

// Memoises scores by (provider, version, image hash). Thread-safe.
class IqaScorer {
 public:
  explicit IqaScorer(std::shared_ptr<IqaProvider> provider) : provider_(std::move(provider)) {}

  // nullopt when the provider is unavailable; never a fabricated value.
  std::optional<double> operator()(const ImageBuffer& image) {
    if (!provider_) return std::nullopt;
    const std::string key = provider_->name() + "/" + provider_->version() + "/" + image_hash(image);
    {
      std::lock_guard lock(mu_);
      if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    double s;
    try {
      s = provider_->score(image);
    } catch (const ProviderUnavailable&) {
      return std::nullopt;
    }
    if (!(s >= 0.0 && s <= 1.0)) throw Error("IQA provider '" + provider_->name() + "' returned out-of-range score");
    std::lock_guard lock(mu_);
    cache_.emplace(key, s);
    ++computed_;
    return s;
  }

  std::size_t computed() const { return computed_; }

 private:
  std::shared_ptr<IqaProvider> provider_;
  std::mutex mu_;
  std::map<std::string, double> cache_;
  std::size_t computed_{0};
};

inline std::optional<double> iqa_score(const ImageBuffer& image, IqaScorer& scorer) { return scorer(image); }

}  // namespace priorfuse::metrics
