#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "priorfuse/core/rng.hpp"
#include "priorfuse/nn/archive.hpp"
#include "priorfuse/nn/tensor.hpp"

namespace priorfuse::nn {

// Named, ordered collection of trainable leaves.
template <class T>
class ParamStore {
 public:
  const Var<T>& add(const std::string& name, Shape shape, std::vector<T> values) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({name, Var<T>::parameter(std::move(shape), std::move(values))});
    return entries_.back().var;
  }

  // PyTorch-style default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), stream keyed by name.
  const Var<T>& add_uniform(const std::string& name, Shape shape, int fan_in, RandomSeed seed) {
    Rng rng(seed, name);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, std::move(shape), std::move(v));
  }

  const Var<T>& add_constant(const std::string& name, Shape shape, T value) {
    std::vector<T> v(numel(shape), value);
    return add(name, std::move(shape), std::move(v));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
    return entries_[it->second].var;
  }

  Var<T>& get_mutable(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
    return entries_[it->second].var;
  }

  std::size_t size() const { return entries_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.var.size();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  void merge(const ParamStore& other) {
    for (const auto& e : other.entries_) {
      if (index_.count(e.name)) throw InvalidArgument("duplicate parameter '" + e.name + "'");
      index_[e.name] = entries_.size();
      entries_.push_back(e);
    }
  }

  // Deep copy with fresh leaves.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& e : entries_) {
      out.add(e.name, e.var.shape(), std::vector<T>(e.var.value().begin(), e.var.value().end()));
    }
    return out;
  }

  void save_to(Archive& archive, const std::string& prefix = "") const {
    for (const auto& e : entries_) archive.put<T>(prefix + e.name, e.var.shape(), e.var.value());
  }

  void load_from(const Archive& archive, const std::string& prefix = "") {
    for (auto& e : entries_) {
      auto values = archive.get<T>(prefix + e.name, e.var.shape());
      auto dst = e.var.mutable_value();
      std::copy(values.begin(), values.end(), dst.begin());
    }
  }

  struct Entry {
    std::string name;
    Var<T> var;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace priorfuse::nn
