#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "priorfuse/dataset/augment.hpp"
#include "priorfuse/dataset/manifest.hpp"
#include "priorfuse/dataset/triplet.hpp"
#include "priorfuse/metrics/metrics.hpp"
#include "priorfuse/nn/adam.hpp"
#include "priorfuse/nn/archive.hpp"
#include "priorfuse/nn/blas.hpp"
#include "priorfuse/train/model.hpp"

namespace priorfuse::train {

namespace fs = std::filesystem;

// Everything needed to continue a run. Batch composition is a pure function of
// (seed, iteration), so the iteration counter is the whole sampler state.
template <class T>
struct TrainState {
  explicit TrainState(const TrainConfig& c) : cfg(c), model(c), optimizer(model.params()) {}

  TrainConfig cfg;
  Model<T> model;
  nn::Adam<T> optimizer;
  long long iteration{0};
  double best_val_psnr{-std::numeric_limits<double>::infinity()};
  double elapsed_seconds{0.0};
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
double grad_norm(const nn::ParamStore<T>& params) {
  double s = 0.0;
  for (const auto& e : params.entries())
    for (T g : e.var.grad()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

// One Adam update on the mean Charbonnier loss of the batch. Samples are
// back-propagated one at a time with seed 1/B, which accumulates the batch-mean
// gradient without holding B graphs in memory. Returns the batch-mean loss.
template <class T>
double train_step(TrainState<T>& state, const std::vector<dataset::SampleTriplet>& batch,
                  std::optional<double> lr_override = std::nullopt) {
  const auto& cfg = state.cfg;
  if (static_cast<int>(batch.size()) != cfg.batch_size) {
    throw InvalidArgument("train_step: batch has " + std::to_string(batch.size()) + " samples, config says " +
                          std::to_string(cfg.batch_size));
  }
  auto& params = state.model.params();
  params.zero_grad();
  const T inv_b = T(1) / static_cast<T>(batch.size());
  double loss_sum = 0.0;
  for (const auto& s : batch) {
    if (!s.gt) throw InvalidArgument("train_step: sample '" + s.id + "' has no ground truth");
    auto deg = nn::to_tensor<T>(s.degraded);
    std::optional<nn::Var<T>> prior;
    if (state.model.reads_prior()) {
      if (!s.prior) throw InvalidArgument("train_step: sample '" + s.id + "' has no prior");
      prior = nn::to_tensor<T>(*s.prior);
    }
    auto pred = state.model.forward(deg, prior ? &*prior : nullptr);
    auto loss = nn::charbonnier(pred, nn::to_tensor<T>(*s.gt), static_cast<T>(cfg.charbonnier_eps));
    const double l = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(l)) {
      throw NonFiniteValue("non-finite loss at iteration " + std::to_string(state.iteration) + " (sample '" + s.id +
                               "', grad-norm so far " + format_double(grad_norm(params)) + ")",
                           static_cast<std::size_t>(state.iteration));
    }
    loss_sum += l;
    const T seed[1] = {inv_b};
    nn::backward(loss, std::span<const T>(seed, 1));
  }
  const double gn = grad_norm(params);
  if (!std::isfinite(gn)) {
    throw NonFiniteValue("non-finite gradient at iteration " + std::to_string(state.iteration) + " (grad-norm " +
                             format_double(gn) + ")",
                         static_cast<std::size_t>(state.iteration));
  }
  const double lr = lr_override ? *lr_override : lr_at(state.iteration, cfg);
  state.optimizer.step(params, lr);
  ++state.iteration;
  return loss_sum / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kLatestCheckpoint = "checkpoint_latest.pfa";
inline constexpr const char* kBestCheckpoint = "checkpoint_best.pfa";
inline constexpr const char* kFinalCheckpoint = "checkpoint_final.pfa";

template <class T>
void save_checkpoint(const TrainState<T>& state, const fs::path& path) {
  nn::Archive ar;
  state.model.params().save_to(ar);
  state.optimizer.save_to(ar, state.model.params());
  ar.meta["iteration"] = state.iteration;
  ar.meta["best_val_psnr"] = std::isfinite(state.best_val_psnr) ? nlohmann::json(state.best_val_psnr) : nlohmann::json();
  ar.meta["elapsed_seconds"] = state.elapsed_seconds;
  ar.meta["config"] = state.cfg.to_json();
  ar.meta["backbone_spec"] = state.model.net().spec().to_json();
  ar.meta["fusion_mode"] = to_string(state.cfg.fusion_mode);
  write_archive(ar, path);
}

template <class T>
TrainState<T> load_checkpoint(const fs::path& path) {
  const auto ar = nn::read_archive(path);
  if (!ar.meta.contains("config")) throw IoError("checkpoint " + path.string() + " has no config");
  TrainState<T> state(TrainConfig::from_json(ar.meta["config"]));
  state.model.params().load_from(ar);
  state.optimizer.load_from(ar, state.model.params());
  state.iteration = ar.meta.value("iteration", 0LL);
  const auto& b = ar.meta["best_val_psnr"];
  state.best_val_psnr = b.is_number() ? b.get<double>() : -std::numeric_limits<double>::infinity();
  state.elapsed_seconds = ar.meta.value("elapsed_seconds", 0.0);
  return state;
}

// Weights-only load for inference.
template <class T>
Model<T> load_model(const fs::path& path) {
  auto state = load_checkpoint<T>(path);
  return std::move(state.model);
}

// ---------------------------------------------------------------------------
// Validation

template <class T>
double validation_psnr(const Model<T>& model, dataset::TripletLoader& loader, std::optional<int> crop_side) {
  if (loader.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  for (std::size_t i = 0; i < loader.size(); ++i) {
    auto s = loader.get(i);
    if (!s.gt) throw InvalidArgument("validation: test entry '" + s.id + "' has no ground truth");
    if (crop_side) {
      const int side = std::min({*crop_side, s.height(), s.width()});
      s.degraded = crop(s.degraded, 0, 0, side, side);
      s.gt = crop(*s.gt, 0, 0, side, side);
      if (s.prior) s.prior = crop(*s.prior, 0, 0, side, side);
    }
    const auto out = model.restore(s.degraded, s.prior ? &*s.prior : nullptr);
    sum += metrics::psnr(out, *s.gt);
  }
  return sum / static_cast<double>(loader.size());
}

// ---------------------------------------------------------------------------
// Full run

struct RunOptions {
  bool resume{false};
  std::optional<dataset::DatasetManifest> validation;
  // Called after every iteration with (iteration just completed, loss).
  std::function<void(long long, double)> on_step;
  // Called at each validation with (iteration, val psnr).
  std::function<void(long long, double)> on_validate;
};

inline constexpr const char* kLossLog = "loss.csv";
inline constexpr const char* kValLog = "val.csv";

namespace detail {

// Keeps only rows with iteration < keep_below (header always kept).
inline void truncate_log(const fs::path& path, long long keep_below) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      kept += line + "\n";
      header = false;
      continue;
    }
    const long long it = std::stoll(line.substr(0, line.find(',')));
    if (it < keep_below) kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
}

inline void write_text(const fs::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << text;
  }
  fs::rename(tmp, path);
}

}  // namespace detail

// Trains on `train` (a train-split manifest) and validates on
// `opts.validation` when given. Output directory layout:
//   loss.csv                 iteration,lr,loss,wallclock (one row per step)
//   val.csv                  iteration,val_psnr
//   config.json, backbone_spec.json
//   checkpoint_latest.pfa    iteration 0, every checkpoint_every, end or stop
//   checkpoint_best.pfa      highest validation PSNR so far
//   checkpoint_final.pfa     once all iterations are done
template <class T>
TrainState<T> run_training(const dataset::DatasetManifest& train, TrainConfig cfg, const fs::path& out_dir,
                           const RunOptions& opts = {}) {
  cfg.augmentation.seed = cfg.seed;
  cfg.validate();
  if (train.split != dataset::Split::train) throw InvalidArgument("run_training: manifest '" + train.name + "' is not a train split");
  if (train.entries.empty() && cfg.iterations > 0) throw InvalidArgument("run_training: manifest has no entries");
  const bool need_prior = cfg.fusion_mode != FusionMode::baseline;
  if (need_prior) {
    for (const auto& e : train.entries)
      if (!e.prior) throw InvalidArgument("run_training: " + to_string(cfg.fusion_mode) + " mode needs priors; entry '" + e.id + "' has none");
  }
  dataset::LoadOptions lo;
  lo.load_prior = need_prior;
  dataset::TripletLoader train_loader(train, lo);
  std::optional<dataset::TripletLoader> val_loader;
  if (opts.validation) val_loader.emplace(*opts.validation, lo);

  nn::set_blas_threads(1);
  fs::create_directories(out_dir);
  const fs::path latest = out_dir / kLatestCheckpoint;
  const fs::path final_ckpt = out_dir / kFinalCheckpoint;
  const fs::path loss_log = out_dir / kLossLog;
  const fs::path val_log = out_dir / kValLog;

  const bool resuming = opts.resume && fs::exists(latest);
  std::optional<TrainState<T>> st;
  if (resuming) {
    st.emplace(load_checkpoint<T>(latest));
    if (st->cfg.to_json() != cfg.to_json()) {
      throw InvalidArgument("resume: configuration differs from the checkpoint in " + out_dir.string());
    }
    detail::truncate_log(loss_log, st->iteration);
    detail::truncate_log(val_log, st->iteration + 1);
  } else {
    st.emplace(cfg);
    fs::remove(final_ckpt);
    fs::remove(out_dir / kBestCheckpoint);
    detail::write_text(loss_log, "iteration,lr,loss,wallclock\n");
    detail::write_text(val_log, "iteration,val_psnr\n");
  }
  auto& state = *st;
  detail::write_text(out_dir / "config.json", cfg.to_json().dump(2) + "\n");
  detail::write_text(out_dir / "backbone_spec.json", state.model.net().spec().to_json().dump(2) + "\n");

  const auto t0 = std::chrono::steady_clock::now();
  const double elapsed0 = state.elapsed_seconds;
  auto now_elapsed = [&] {
    return elapsed0 + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  auto checkpoint = [&](bool validate) {
    state.elapsed_seconds = now_elapsed();
    if (validate && val_loader && val_loader->size() > 0) {
      const double v = validation_psnr(state.model, *val_loader, cfg.val_crop);
      std::ofstream(val_log, std::ios::app) << state.iteration << "," << format_double(v) << "\n";
      if (opts.on_validate) opts.on_validate(state.iteration, v);
      if (v > state.best_val_psnr) {
        state.best_val_psnr = v;
        save_checkpoint(state, out_dir / kBestCheckpoint);
      }
    }
    save_checkpoint(state, latest);
  };

  if (!resuming) checkpoint(cfg.iterations > 0);

  std::ofstream log(loss_log, std::ios::app);
  const std::size_t n = train_loader.size();
  const auto B = static_cast<std::uint64_t>(cfg.batch_size);
  bool stepped = false;
  while (state.iteration < cfg.iterations) {
    if (cfg.stop_after && state.iteration >= *cfg.stop_after) break;
    const long long k = state.iteration;
    std::vector<dataset::SampleTriplet> batch;
    batch.reserve(cfg.batch_size);
    for (std::uint64_t b = 0; b < B; ++b) {
      const std::uint64_t draw = static_cast<std::uint64_t>(k) * B + b;
      const auto idx = dataset::sample_for_draw(n, cfg.seed, draw);
      batch.push_back(dataset::sample_patch(train_loader.get(idx), cfg.augmentation, draw));
    }
    const double lr = lr_at(k, cfg);
    const double loss = train_step(state, batch);
    stepped = true;
    log << k << "," << format_double(lr) << "," << format_double(loss) << "," << format_double(now_elapsed()) << "\n";
    log.flush();
    if (opts.on_step) opts.on_step(k, loss);
    if (state.iteration < cfg.iterations && state.iteration % cfg.checkpoint_every == 0) checkpoint(true);
  }
  if (state.iteration < cfg.iterations) {
    checkpoint(false);  // interrupted via stop_after
  } else if (cfg.iterations > 0 && (stepped || !fs::exists(final_ckpt))) {
    checkpoint(true);
    fs::copy_file(latest, final_ckpt, fs::copy_options::overwrite_existing);
  }
  return std::move(state);
}

// Rows of a loss log, for audits and comparisons.
struct LossRow {
  long long iteration;
  double lr;
  double loss;
  double wallclock;
};

inline std::vector<LossRow> read_loss_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open loss log " + path.string());
  std::vector<LossRow> rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    LossRow r{};
    char c;
    ss >> r.iteration >> c >> r.lr >> c >> r.loss >> c >> r.wallclock;
    if (!ss) throw IoError("malformed loss log row: " + line);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace priorfuse::train
