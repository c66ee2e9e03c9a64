#pragma once

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "priorfuse/core/error.hpp"
#include "priorfuse/core/image.hpp"

namespace priorfuse::fidelity {

// (height, width)
using Dims = std::pair<int, int>;

struct Thresholds {
  double aspect_ratio_delta{0.02};
  double min_shift_confidence{0.1};
};

struct ShiftEstimate {
  int dy{0};
  int dx{0};
  double confidence{0.0};
};

struct FidelityReport {
  double aspect_ratio_delta{0.0};
  ShiftEstimate translation;
  bool divergence_flag{false};
  std::string notes;
};

// |r_in - r_prior| / r_in with r = width / height.
inline double aspect_ratio_drift(Dims input, Dims raw_prior) {
  if (input.first <= 0 || input.second <= 0 || raw_prior.first <= 0 || raw_prior.second <= 0) {
    throw InvalidArgument("aspect_ratio_drift: dims must be positive");
  }
  const double r_in = static_cast<double>(input.second) / input.first;
  const double r_p = static_cast<double>(raw_prior.second) / raw_prior.first;
  return std::abs(r_in - r_p) / r_in;
}

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex mu;
  return mu;
}

// In-place 2-D DFT of a row-major complex buffer.
inline void dft2d(std::vector<std::complex<double>>& data, int h, int w, int sign) {
  auto* buf = reinterpret_cast<fftw_complex*>(data.data());
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_2d(h, w, buf, buf, sign, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  std::lock_guard lock(fftw_planner_mutex());
  fftw_destroy_plan(plan);
}

}  // namespace detail

// Phase correlation. Returns the integer (dy, dx) with b(p) ~ a(p - d) and the
// correlation peak height; the normalised cross-power response has unit
// energy, so the peak doubles as a confidence in [0,1].
inline ShiftEstimate estimate_global_shift(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw DimensionMismatch("estimate_global_shift: " + a.shape_string() + " vs " + b.shape_string());
  }
  const int h = a.height(), w = a.width();
  const std::size_t n = static_cast<std::size_t>(h) * w;
  auto ga = to_gray(a);
  auto gb = to_gray(b);
  auto centre = [n](std::vector<double>& g) {
    double m = 0.0;
    for (double v : g) m += v;
    m /= static_cast<double>(n);
    double var = 0.0;
    for (double& v : g) {
      v -= m;
      var += v * v;
    }
    return var / static_cast<double>(n);
  };
  constexpr double kFlat = 1e-12;
  if (centre(ga) < kFlat || centre(gb) < kFlat) return {0, 0, 0.0};

  std::vector<std::complex<double>> fa(n), fb(n);
  for (std::size_t i = 0; i < n; ++i) {
    fa[i] = ga[i];
    fb[i] = gb[i];
  }
  detail::dft2d(fa, h, w, FFTW_FORWARD);
  detail::dft2d(fb, h, w, FFTW_FORWARD);
  std::vector<std::complex<double>> r(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto cross = fb[i] * std::conj(fa[i]);
    const double mag = std::abs(cross);
    if (mag > 1e-15) {
      r[i] = cross / mag;
    } else {
      r[i] = 0.0;
    }
  }
  detail::dft2d(r, h, w, FFTW_BACKWARD);
  double energy = 0.0;
  double best = -1e300;
  std::size_t best_i = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = r[i].real() / static_cast<double>(n);
    energy += v * v;
    if (v > best) {
      best = v;
      best_i = i;
    }
  }
  int dy = static_cast<int>(best_i / w);
  int dx = static_cast<int>(best_i % w);
  if (dy > h / 2) dy -= h;
  if (dx > w / 2) dx -= w;
  const double confidence = energy > 0.0 ? std::clamp(best / std::sqrt(energy), 0.0, 1.0) : 0.0;
  return {dy, dx, confidence};
}

// True iff the prior scores below the degraded input on fidelity while
// scoring above it perceptually.
inline bool divergence_flag(double psnr_prior_vs_gt, double psnr_degraded_vs_gt, double iqa_prior, double iqa_degraded) {
  return psnr_prior_vs_gt < psnr_degraded_vs_gt && iqa_prior > iqa_degraded;
}

struct AnalysisInput {
  Dims input_dims;
  Dims raw_prior_dims;
  const ImageBuffer* reference{nullptr};  // degraded input or ground truth, same frame as prior
  const ImageBuffer* prior{nullptr};      // prior normalised to the reference frame
  std::optional<double> psnr_prior_vs_gt;
  std::optional<double> psnr_degraded_vs_gt;
  std::optional<double> iqa_prior;
  std::optional<double> iqa_degraded;
};

inline FidelityReport analyze(const AnalysisInput& in, const Thresholds& th = {}) {
  FidelityReport rep;
  rep.aspect_ratio_delta = aspect_ratio_drift(in.input_dims, in.raw_prior_dims);
  std::string notes;
  auto note = [&notes](const std::string& s) { notes += (notes.empty() ? "" : "; ") + s; };
  if (rep.aspect_ratio_delta > th.aspect_ratio_delta) note("aspect ratio changed");
  if (in.reference && in.prior) {
    rep.translation = estimate_global_shift(*in.reference, *in.prior);
    if (rep.translation.confidence < th.min_shift_confidence) {
      note("low registration confidence (viewpoint/scale change or content drift)");
    } else if (rep.translation.dy != 0 || rep.translation.dx != 0) {
      note("global shift");
    }
  }
  if (in.psnr_prior_vs_gt && in.psnr_degraded_vs_gt && in.iqa_prior && in.iqa_degraded) {
    rep.divergence_flag = divergence_flag(*in.psnr_prior_vs_gt, *in.psnr_degraded_vs_gt, *in.iqa_prior, *in.iqa_degraded);
    if (rep.divergence_flag) note("fidelity/perception divergence");
  }
  rep.notes = notes;
  return rep;
}

}  // namespace priorfuse::fidelity
