#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "priorfuse/nn/archive.hpp"
#include "priorfuse/nn/params.hpp"

namespace priorfuse::nn {

struct AdamConfig {
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
};

// Adam with bias correction. Moments are kept in double regardless of the
// parameter type so that resumed runs continue bit-exactly.
template <class T>
class Adam {
 public:
  explicit Adam(const ParamStore<T>& params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (const auto& e : params.entries()) {
      m_.emplace_back(e.var.size(), 0.0);
      v_.emplace_back(e.var.size(), 0.0);
    }
  }

  long long steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }

  // Applies one update using the gradients currently stored on the leaves.
  void step(ParamStore<T>& params, double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& var = entries[i].var;
      if (!var.has_grad()) continue;
      auto g = var.grad();
      auto w = var.mutable_value();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double update = lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        w[j] = static_cast<T>(w[j] - update);
      }
    }
  }

  void save_to(Archive& archive, const ParamStore<T>& params) const {
    const auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      archive.put<double>("adam.m." + entries[i].name, entries[i].var.shape(), m_[i]);
      archive.put<double>("adam.v." + entries[i].name, entries[i].var.shape(), v_[i]);
    }
    archive.meta["adam_steps"] = steps_;
  }

  void load_from(const Archive& archive, const ParamStore<T>& params) {
    const auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      m_[i] = archive.get<double>("adam.m." + entries[i].name, entries[i].var.shape());
      v_[i] = archive.get<double>("adam.v." + entries[i].name, entries[i].var.shape());
    }
    steps_ = archive.meta.value("adam_steps", 0LL);
  }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long long steps_{0};
};

}  // namespace priorfuse::nn
