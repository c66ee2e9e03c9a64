#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "priorfuse/core/rng.hpp"
#include "priorfuse/nn/ops.hpp"

namespace priorfuse::test_support {

struct GradCheckResult {
  double max_rel_error{0.0};
  double max_abs_error{0.0};
  std::size_t checked{0};
};

// Compares analytic gradients of scalar `loss()` w.r.t. each leaf against
// central finite differences. The relative error uses max(|a|, |n|, floor).
inline GradCheckResult grad_check(const std::function<nn::Var<double>()>& loss, std::vector<nn::Var<double>> leaves,
                                  double step = 1e-6, double floor = 1e-6, std::size_t max_per_leaf = 64,
                                  std::uint64_t pick_seed = 7) {
  for (auto& l : leaves) l.zero_grad();
  auto out = loss();
  nn::backward(out);
  GradCheckResult r;
  Rng pick(pick_seed);
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    if (analytic.empty()) analytic.assign(leaf.size(), 0.0);
    std::vector<std::size_t> idx(leaf.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > max_per_leaf) {
      for (std::size_t i = 0; i < max_per_leaf; ++i) std::swap(idx[i], idx[i + pick.below(idx.size() - i)]);
      idx.resize(max_per_leaf);
    }
    auto values = leaf.mutable_value();
    for (std::size_t i : idx) {
      const double orig = values[i];
      values[i] = orig + step;
      const double up = loss().value()[0];
      values[i] = orig - step;
      const double down = loss().value()[0];
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double abs_err = std::abs(numeric - analytic[i]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      r.max_rel_error = std::max(r.max_rel_error, abs_err / denom);
      ++r.checked;
    }
  }
  return r;
}

inline nn::Var<double> random_leaf(nn::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(nn::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return nn::Var<double>::parameter(std::move(shape), std::move(v));
}

// Weighted sum with fixed random weights, so every output element matters.
inline nn::Var<double> probe_loss(const nn::Var<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(y.size());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  auto wv = nn::Var<double>::constant(y.shape(), std::move(w));
  return nn::mean(nn::mul(y, wv));
}

}  // namespace priorfuse::test_support
