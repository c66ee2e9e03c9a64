#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "priorfuse/core/png_io.hpp"
#include "priorfuse/dataset/manifest.hpp"
#include "priorfuse/fidelity/analyzer.hpp"
#include "priorfuse/metrics/metrics.hpp"
#include "priorfuse/report/report.hpp"

namespace priorfuse::report {

struct MethodSpec {
  std::string name;
  fs::path pred_dir;  // holds <id>.png for every manifest entry
};

struct BenchOptions {
  metrics::MetricConfig metric{};
  metrics::IqaScorer* iqa{nullptr};  // no IQA column values when null
  fidelity::Thresholds thresholds{};
};

struct BenchResult {
  EvalReport report;
  std::size_t missing_predictions{0};
  int exit_status() const { return missing_predictions == 0 ? 0 : 2; }
};

inline fs::path prediction_path(const fs::path& pred_dir, const std::string& id) { return pred_dir / (id + ".png"); }

// Evaluates every method on every manifest entry against its ground truth.
// Predictions whose size differs from the ground truth are resized to it for
// the metrics; the raw size still feeds the aspect-ratio column. A missing
// prediction yields a record with no metrics and makes the status nonzero.
inline BenchResult run_benchmark(const std::vector<dataset::DatasetManifest>& manifests, const std::vector<MethodSpec>& methods,
                                 const BenchOptions& opts = {}) {
  if (manifests.empty() || methods.empty()) throw InvalidArgument("run_benchmark: need at least one manifest and one method");
  BenchResult res;
  std::vector<PerImageRecord> recs;
  for (const auto& m : manifests) {
    struct Ref {
      ImageBuffer degraded, gt;
      double psnr_degraded;
      std::optional<double> iqa_degraded;
    };
    std::vector<Ref> refs;
    for (const auto& e : m.entries) {
      if (!e.gt) throw InvalidArgument("run_benchmark: entry '" + e.id + "' of '" + m.name + "' has no ground truth");
      Ref r{load_png(e.degraded, 3), load_png(*e.gt, 3), 0.0, std::nullopt};
      require_same_shape(r.degraded, r.gt, "run_benchmark '" + e.id + "'");
      r.psnr_degraded = metrics::psnr(r.degraded, r.gt, opts.metric);
      if (opts.iqa) r.iqa_degraded = (*opts.iqa)(r.degraded);
      refs.push_back(std::move(r));
    }
    for (const auto& method : methods) {
      for (std::size_t i = 0; i < m.entries.size(); ++i) {
        const auto& e = m.entries[i];
        const auto& ref = refs[i];
        PerImageRecord rec;
        rec.method = method.name;
        rec.dataset = m.name;
        rec.id = e.id;
        const auto path = prediction_path(method.pred_dir, e.id);
        if (!fs::exists(path)) {
          rec.prediction_found = false;
          rec.notes = "missing prediction";
          ++res.missing_predictions;
          recs.push_back(std::move(rec));
          continue;
        }
        const auto raw = load_png(path, 3);
        const auto pred = resize_bilinear(raw, ref.gt.height(), ref.gt.width());
        rec.psnr = metrics::psnr(pred, ref.gt, opts.metric);
        rec.ssim = metrics::ssim(pred, ref.gt, opts.metric);
        if (opts.iqa) rec.iqa = (*opts.iqa)(pred);

        fidelity::AnalysisInput in;
        in.input_dims = {ref.degraded.height(), ref.degraded.width()};
        in.raw_prior_dims = {raw.height(), raw.width()};
        in.reference = &ref.gt;
        in.prior = &pred;
        in.psnr_prior_vs_gt = rec.psnr;
        in.psnr_degraded_vs_gt = ref.psnr_degraded;
        in.iqa_prior = rec.iqa;
        in.iqa_degraded = ref.iqa_degraded;
        const auto fr = fidelity::analyze(in, opts.thresholds);
        rec.aspect_ratio_delta = fr.aspect_ratio_delta;
        rec.shift_dy = fr.translation.dy;
        rec.shift_dx = fr.translation.dx;
        rec.shift_confidence = fr.translation.confidence;
        if (rec.iqa && ref.iqa_degraded) rec.divergence_flag = fr.divergence_flag;
        rec.notes = fr.notes;
        if (raw.height() != ref.gt.height() || raw.width() != ref.gt.width()) {
          rec.notes += std::string(rec.notes.empty() ? "" : "; ") + "resized from " + std::to_string(raw.height()) + "x" +
                       std::to_string(raw.width());
        }
        recs.push_back(std::move(rec));
      }
    }
  }
  res.report = aggregate(recs);
  return res;
}

}  // namespace priorfuse::report
