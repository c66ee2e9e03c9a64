#pragma once

#include <atomic>
#include <map>
#include <mutex>
#include <optional>
#include <string>

#include "priorfuse/core/png_io.hpp"
#include "priorfuse/dataset/manifest.hpp"

namespace priorfuse::dataset {

struct SampleTriplet {
  std::string id;
  ImageBuffer degraded;
  std::optional<ImageBuffer> prior;
  std::optional<ImageBuffer> gt;

  int height() const { return degraded.height(); }
  int width() const { return degraded.width(); }

  void validate() const {
    if (prior) require_same_shape(degraded, *prior, "triplet '" + id + "' prior");
    if (gt) require_same_shape(degraded, *gt, "triplet '" + id + "' gt");
  }
};

struct LoadOptions {
  bool load_prior{true};
  bool load_gt{true};
  int channels{3};
  bool cache{true};
};

// Reads triplets from disk and keeps them in memory. Counts file reads so
// tests can assert which images a consumer actually touched.
class TripletLoader {
 public:
  TripletLoader(DatasetManifest manifest, LoadOptions opts = {}) : manifest_(std::move(manifest)), opts_(opts) {}

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.size(); }

  const SampleTriplet& get(std::size_t i) {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(i); it != cache_.end()) return it->second;
    auto t = read(i);
    if (!opts_.cache) cache_.clear();
    return cache_.emplace(i, std::move(t)).first->second;
  }

  std::size_t prior_reads() const { return prior_reads_; }
  std::size_t gt_reads() const { return gt_reads_; }
  std::size_t degraded_reads() const { return degraded_reads_; }

 private:
  SampleTriplet read(std::size_t i) {
    const auto& e = manifest_.entries.at(i);
    SampleTriplet t;
    t.id = e.id;
    t.degraded = load_png(e.degraded, opts_.channels);
    ++degraded_reads_;
    if (opts_.load_gt && e.gt) {
      t.gt = load_png(*e.gt, opts_.channels);
      ++gt_reads_;
    }
    if (opts_.load_prior) {
      if (!e.prior) throw InvalidArgument("entry '" + e.id + "' has no prior; run acquire first");
      t.prior = load_png(*e.prior, opts_.channels);
      ++prior_reads_;
    }
    t.validate();
    return t;
  }

  DatasetManifest manifest_;
  LoadOptions opts_;
  std::mutex mu_;
  std::map<std::size_t, SampleTriplet> cache_;
  std::atomic<std::size_t> prior_reads_{0}, gt_reads_{0}, degraded_reads_{0};
};

}  // namespace priorfuse::dataset
