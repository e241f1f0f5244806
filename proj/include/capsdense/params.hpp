#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "capsdense/rng.hpp"
#include "capsdense/tensor.hpp"

namespace capsdense {

// Named trainable tensors in creation order. Iteration order is the
// serialization order, so it must be deterministic for a given model spec.
template <typename T>
class ParamStoreT {
 public:
  // Weight init: truncated normal, stddev 0.05 unless overridden.
  TensorT<T>& create(const std::string& name, Shape shape, Rng& rng, double stddev = 0.05) {
    TensorT<T>& t = emplace(name, std::move(shape));
    T* d = t.data();
    for (int64_t i = 0, n = t.numel(); i < n; ++i)
      d[i] = static_cast<T>(rng.truncated_normal(stddev));
    return t;
  }

  TensorT<T>& create_zeros(const std::string& name, Shape shape) {
    return emplace(name, std::move(shape));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  TensorT<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return items_[it->second].second;
  }
  const TensorT<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return items_[it->second].second;
  }

  const std::vector<std::pair<std::string, TensorT<T>>>& items() const { return items_; }
  std::vector<std::pair<std::string, TensorT<T>>>& items() { return items_; }
  size_t size() const { return items_.size(); }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

  template <typename U>
  ParamStoreT<U> cast() const {
    ParamStoreT<U> out;
    for (const auto& [name, t] : items_) {
      auto& dst = out.create_zeros(name, t.shape());
      for (int64_t i = 0; i < t.numel(); ++i) dst.data()[i] = static_cast<U>(t.data()[i]);
      dst.set_requires_grad(t.requires_grad());
    }
    return out;
  }

 private:
  TensorT<T>& emplace(const std::string& name, Shape shape) {
    if (contains(name)) throw ContractError("parameter '" + name + "' already exists");
    TensorT<T> t(std::move(shape));
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  std::vector<std::pair<std::string, TensorT<T>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

using ParamStore = ParamStoreT<float>;

}  // namespace capsdense
