#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "priorfuse/core/png_io.hpp"
#include "priorfuse/core/rng.hpp"
#include "priorfuse/dataset/manifest.hpp"
#include "priorfuse/prior/synthetic.hpp"

namespace priorfuse::dataset {

// Small fully synthetic restoration task used for desk-scale experiments:
// textured clean images, a gamma-darken + noise degradation, and offline
// priors that are clean but geometrically drifted.
struct DeskTaskConfig {
  int count{24};
  int train_count{18};
  int size{96};
  double gamma{2.2};
  double noise_sigma{0.04};
  prior::SyntheticPriorConfig prior{6.0, 0.03, 0.05, RandomSeed{0}};
  RandomSeed seed{0};
};

inline ImageBuffer desk_ground_truth(int size, RandomSeed seed, std::uint64_t index) {
  Rng rng(seed, "desk-gt", index);
  ImageBuffer img(size, size, 3);
  double base[3];
  for (double& b : base) b = rng.uniform(0.3, 0.7);
  struct Rect {
    double y0, x0, y1, x1, col[3];
  };
  struct Blob {
    double y, x, r, col[3];
  };
  std::vector<Rect> rects(5);
  for (auto& r : rects) {
    r.y0 = rng.uniform(-0.2, 0.9) * size;
    r.x0 = rng.uniform(-0.2, 0.9) * size;
    r.y1 = r.y0 + rng.uniform(0.1, 0.5) * size;
    r.x1 = r.x0 + rng.uniform(0.1, 0.5) * size;
    for (double& c : r.col) c = rng.uniform(-0.3, 0.3);
  }
  std::vector<Blob> blobs(4);
  for (auto& b : blobs) {
    b.y = rng.uniform(0, size);
    b.x = rng.uniform(0, size);
    b.r = rng.uniform(0.08, 0.25) * size;
    for (double& c : b.col) c = rng.uniform(-0.3, 0.3);
  }
  const double theta = rng.uniform(0, 3.14159265358979);
  const double freq = rng.uniform(0.3, 0.9);
  const double amp = rng.uniform(0.05, 0.15);
  const double ky = std::sin(theta) * freq, kx = std::cos(theta) * freq;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + amp * std::sin(ky * y + kx * x + c * 0.7);
        for (const auto& r : rects)
          if (y >= r.y0 && y < r.y1 && x >= r.x0 && x < r.x1) v += r.col[c];
        for (const auto& b : blobs) {
          const double d2 = ((y - b.y) * (y - b.y) + (x - b.x) * (x - b.x)) / (b.r * b.r);
          v += b.col[c] * std::exp(-d2);
        }
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return img;
}

// v -> v^gamma plus Gaussian noise, clamped.
inline ImageBuffer desk_degrade(const ImageBuffer& gt, double gamma, double sigma, RandomSeed seed, std::uint64_t index) {
  Rng rng(seed, "desk-noise", index);
  ImageBuffer out = gt;
  for (auto& v : out.data()) {
    const double d = std::pow(static_cast<double>(v), gamma) + sigma * rng.normal();
    v = static_cast<float>(std::clamp(d, 0.0, 1.0));
  }
  return out;
}

struct DeskTask {
  DatasetManifest train;
  DatasetManifest test;
};

// Writes gt/, degraded/, prior/ PNGs plus train.jsonl and test.jsonl manifests
// under `dir`. Images are quantised to 8 bits on disk.
inline DeskTask write_desk_task(const std::filesystem::path& dir, const DeskTaskConfig& cfg) {
  if (cfg.train_count < 1 || cfg.train_count >= cfg.count) throw InvalidArgument("desk task: need 1 <= train_count < count");
  namespace fs = std::filesystem;
  for (const char* sub : {"gt", "degraded", "prior"}) fs::create_directories(dir / sub);
  DeskTask task;
  for (auto* m : {&task.train, &task.test}) {
    m->name = "desk";
    m->degradation = DegradationType::low_light;
    m->base_dir = dir;
  }
  task.train.split = Split::train;
  task.test.split = Split::test;
  auto pcfg = cfg.prior;
  for (int i = 0; i < cfg.count; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "img%03d", i);
    const auto gt = desk_ground_truth(cfg.size, cfg.seed, i);
    const auto deg = desk_degrade(gt, cfg.gamma, cfg.noise_sigma, cfg.seed, i);
    const auto pri = prior::synthesize_offline_prior(gt, pcfg, i);
    ManifestEntry e{id, dir / "degraded" / (std::string(id) + ".png"), dir / "gt" / (std::string(id) + ".png"),
                    dir / "prior" / (std::string(id) + ".png")};
    save_png(gt, *e.gt);
    save_png(deg, e.degraded);
    save_png(pri, *e.prior);
    (i < cfg.train_count ? task.train : task.test).entries.push_back(e);
  }
  save_manifest(task.train, dir / "train.jsonl");
  save_manifest(task.test, dir / "test.jsonl");
  return task;
}

}  // namespace priorfuse::dataset
