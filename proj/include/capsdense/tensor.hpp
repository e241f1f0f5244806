#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "capsdense/error.hpp"

namespace capsdense {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
};

// Dense row-major tensor with shared storage. Copying a TensorT aliases the
// same buffer; clone() makes an independent one. A rank-0 shape {} is a
// scalar holding one element.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape shape, T fill = T(0)) {
    for (int64_t d : shape)
      if (d < 1) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    s_ = std::make_shared<TensorStorage<T>>();
    s_->data.assign(static_cast<size_t>(numel_of(shape)), fill);
    s_->shape = std::move(shape);
  }

  static TensorT from_data(Shape shape, std::vector<T> data) {
    TensorT t(shape);
    if (static_cast<int64_t>(data.size()) != t.numel())
      throw DimensionError("from_data: " + std::to_string(data.size()) + " values for shape " +
                           shape_str(shape));
    t.s_->data = std::move(data);
    return t;
  }

  static TensorT scalar(T v) { return from_data({}, {v}); }

  bool defined() const { return static_cast<bool>(s_); }

  const Shape& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  int64_t dim(int i) const { return s_->shape.at(static_cast<size_t>(i)); }
  int64_t numel() const { return static_cast<int64_t>(s_->data.size()); }

  T* data() { return s_->data.data(); }
  const T* data() const { return s_->data.data(); }

  T item() const {
    if (!defined() || numel() != 1) throw ContractError("item: tensor is not a scalar");
    return s_->data[0];
  }

  // Row-major element access, mainly for tests.
  T& at(std::initializer_list<int64_t> idx) {
    return s_->data[static_cast<size_t>(offset_of(idx))];
  }
  T at(std::initializer_list<int64_t> idx) const {
    return s_->data[static_cast<size_t>(offset_of(idx))];
  }

  bool requires_grad() const { return defined() && s_->requires_grad; }
  void set_requires_grad(bool v) { s_->requires_grad = v; }

  bool has_grad() const { return defined() && !s_->grad.empty(); }
  T* grad() { return s_->grad.empty() ? nullptr : s_->grad.data(); }
  const T* grad() const { return s_->grad.empty() ? nullptr : s_->grad.data(); }

  void ensure_grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
  }
  void zero_grad() { s_->grad.clear(); }

  std::shared_ptr<TensorStorage<T>> storage() const { return s_; }

  TensorT clone() const {
    TensorT t = from_data(s_->shape, s_->data);
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> v(s_->data.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(s_->data[i]);
    auto t = TensorT<U>::from_data(s_->shape, std::move(v));
    t.set_requires_grad(s_->requires_grad);
    return t;
  }

  bool all_finite() const {
    for (const T& v : s_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  int64_t offset_of(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      throw DimensionError("index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                           std::to_string(rank()));
    int64_t off = 0;
    int i = 0;
    for (int64_t v : idx) {
      const int64_t d = s_->shape[static_cast<size_t>(i)];
      if (v < 0 || v >= d)
        throw DimensionError("index " + std::to_string(v) + " out of range for axis " +
                             std::to_string(i) + " with extent " + std::to_string(d));
      off = off * d + v;
      ++i;
    }
    return off;
  }

  std::shared_ptr<TensorStorage<T>> s_;
};

using Tensor = TensorT<float>;

}  // namespace capsdense
