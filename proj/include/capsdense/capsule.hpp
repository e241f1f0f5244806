#pragma once

#include <cmath>
#include <vector>

#include "capsdense/ops.hpp"
#include "capsdense/parallel.hpp"

namespace capsdense {

struct MarginLossConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda_down = 0.5;  // down-weight for absent classes

  void validate() const {
    if (!(m_plus > m_minus) || !(m_minus > 0.0) || !(m_plus < 1.0))
      throw ConfigError("margin loss needs 0 < m_minus < m_plus < 1, got m_plus=" +
                        std::to_string(m_plus) + " m_minus=" + std::to_string(m_minus));
    if (lambda_down <= 0.0)
      throw ConfigError("margin loss down-weight must be positive, got " +
                        std::to_string(lambda_down));
  }
};

// v = (|s|^2 / (1 + |s|^2)) * (s / |s|) along the last axis. The norm is
// computed as sqrt(sum(s^2) + eps) — same stabilization as l2_norm — so
// the all-zero vector maps to (numerically) zero instead of NaN and the
// gradient stays finite at the origin; outputs always have norm < 1.
template <typename T>
TensorT<T> squash(const TensorT<T>& s, T eps = T(1e-9)) {
  if (s.rank() < 1) throw DimensionError("squash: needs at least one axis");
  const int64_t d = s.dim(s.rank() - 1);
  const int64_t rows = s.numel() / d;
  TensorT<T> y(s.shape());
  std::vector<T> norms(static_cast<size_t>(rows));
  const T* sd = s.data();
  T* yd = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    T acc = eps;
    const T* row = sd + r * d;
    for (int64_t t = 0; t < d; ++t) acc += row[t] * row[t];
    const T n = std::sqrt(acc);
    norms[static_cast<size_t>(r)] = n;
    const T f = n / (T(1) + n * n);
    T* out = yd + r * d;
    for (int64_t t = 0; t < d; ++t) out[t] = row[t] * f;
  }
  if (should_record<T>({&s})) {
    auto ss = s.storage(), ys = y.storage();
    record<T>("squash", y, [ss, ys, norms, rows, d] {
      // dv/ds = f(n) I + f'(n)/n * s s^T with f(n) = n / (1 + n^2).
      const T* g = ys->grad.data();
      const T* sd2 = ss->data.data();
      T* gs = acc_grad(ss);
      for (int64_t r = 0; r < rows; ++r) {
        const T n = norms[static_cast<size_t>(r)];
        const T denom = T(1) + n * n;
        const T f = n / denom;
        const T fp_over_n = (T(1) - n * n) / (denom * denom * n);
        const T* srow = sd2 + r * d;
        const T* grow = g + r * d;
        T dot = T(0);
        for (int64_t t = 0; t < d; ++t) dot += grow[t] * srow[t];
        T* out = gs + r * d;
        for (int64_t t = 0; t < d; ++t) out[t] += f * grow[t] + fp_over_n * dot * srow[t];
      }
    });
  }
  return y;
}

// Per-pair predictions u_hat[b,i,j,:] = u[b,i,:] * W[i,j,:,:].
// u is [B,I,din], W is [I,J,din,dout]; the result is [B,I,J,dout].
template <typename T>
TensorT<T> predict(const TensorT<T>& u, const TensorT<T>& w) {
  if (u.rank() != 3)
    throw DimensionError("predict: capsules must be [B,I,din], got " + shape_str(u.shape()));
  if (w.rank() != 4)
    throw DimensionError("predict: weights must be [I,J,din,dout], got " + shape_str(w.shape()));
  if (u.dim(1) != w.dim(0))
    throw DimensionError("predict: capsule count " + std::to_string(u.dim(1)) +
                         " vs weight rows " + std::to_string(w.dim(0)));
  if (u.dim(2) != w.dim(2))
    throw DimensionError("predict: capsule dim " + std::to_string(u.dim(2)) +
                         " vs weight input dim " + std::to_string(w.dim(2)));
  const int64_t B = u.dim(0), I = u.dim(1), din = u.dim(2), J = w.dim(1), dout = w.dim(3);
  TensorT<T> y({B, I, J, dout});
  {
    const T* ud = u.data();
    const T* wd = w.data();
    T* yd = y.data();
    par::parallel_for(I, [=](int64_t lo, int64_t hi) {
      for (int64_t i = lo; i < hi; ++i)
        for (int64_t b = 0; b < B; ++b) {
          const T* urow = ud + (b * I + i) * din;
          for (int64_t j = 0; j < J; ++j) {
            const T* wrow = wd + (i * J + j) * din * dout;
            T* out = yd + ((b * I + i) * J + j) * dout;
            for (int64_t e = 0; e < dout; ++e) out[e] = T(0);
            for (int64_t t = 0; t < din; ++t) {
              const T uv = urow[t];
              const T* wr = wrow + t * dout;
              for (int64_t e = 0; e < dout; ++e) out[e] += uv * wr[e];
            }
          }
        }
    });
  }
  if (should_record<T>({&u, &w})) {
    auto us = u.storage(), ws = w.storage(), ys = y.storage();
    record<T>("predict", y, [us, ws, ys, B, I, J, din, dout] {
      const T* g = ys->grad.data();
      const T* ud2 = us->data.data();
      const T* wd2 = ws->data.data();
      const bool need_u = us->requires_grad, need_w = ws->requires_grad;
      T* gu = need_u ? acc_grad(us) : nullptr;
      T* gw = need_w ? acc_grad(ws) : nullptr;
      par::parallel_for(I, [=](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i)
          for (int64_t b = 0; b < B; ++b) {
            const T* urow = ud2 + (b * I + i) * din;
            for (int64_t j = 0; j < J; ++j) {
              const T* wrow = wd2 + (i * J + j) * din * dout;
              const T* grow = g + ((b * I + i) * J + j) * dout;
              if (need_u) {
                T* gual = gu + (b * I + i) * din;
                for (int64_t t = 0; t < din; ++t) {
                  const T* wr = wrow + t * dout;
                  T acc = T(0);
                  for (int64_t e = 0; e < dout; ++e) acc += grow[e] * wr[e];
                  gual[t] += acc;
                }
              }
              if (need_w) {
                T* gwrow = gw + (i * J + j) * din * dout;
                for (int64_t t = 0; t < din; ++t) {
                  const T uv = urow[t];
                  T* gwr = gwrow + t * dout;
                  for (int64_t e = 0; e < dout; ++e) gwr[e] += uv * grow[e];
                }
              }
            }
          }
      });
    });
  }
  return y;
}

// s[b,j,:] = sum_i c[b,i,j] * u_hat[b,i,j,:].
template <typename T>
TensorT<T> route_weighted_sum(const TensorT<T>& c, const TensorT<T>& u_hat) {
  if (u_hat.rank() != 4)
    throw DimensionError("route_weighted_sum: predictions must be [B,I,J,d], got " +
                         shape_str(u_hat.shape()));
  if (c.rank() != 3 || c.dim(0) != u_hat.dim(0) || c.dim(1) != u_hat.dim(1) ||
      c.dim(2) != u_hat.dim(2))
    throw DimensionError("route_weighted_sum: couplings " + shape_str(c.shape()) +
                         " do not match predictions " + shape_str(u_hat.shape()));
  const int64_t B = u_hat.dim(0), I = u_hat.dim(1), J = u_hat.dim(2), d = u_hat.dim(3);
  TensorT<T> s({B, J, d});
  const T* cd = c.data();
  const T* ud = u_hat.data();
  T* sd = s.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < I; ++i)
      for (int64_t j = 0; j < J; ++j) {
        const T cf = cd[(b * I + i) * J + j];
        const T* urow = ud + ((b * I + i) * J + j) * d;
        T* srow = sd + (b * J + j) * d;
        for (int64_t t = 0; t < d; ++t) srow[t] += cf * urow[t];
      }
  if (should_record<T>({&c, &u_hat})) {
    auto cs = c.storage(), us = u_hat.storage(), ss = s.storage();
    record<T>("route_weighted_sum", s, [cs, us, ss, B, I, J, d] {
      const T* g = ss->grad.data();
      const T* cd2 = cs->data.data();
      const T* ud2 = us->data.data();
      if (us->requires_grad) {
        T* gu = acc_grad(us);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < I; ++i)
            for (int64_t j = 0; j < J; ++j) {
              const T cf = cd2[(b * I + i) * J + j];
              const T* grow = g + (b * J + j) * d;
              T* gurow = gu + ((b * I + i) * J + j) * d;
              for (int64_t t = 0; t < d; ++t) gurow[t] += cf * grow[t];
            }
      }
      if (cs->requires_grad) {
        T* gc = acc_grad(cs);
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < I; ++i)
            for (int64_t j = 0; j < J; ++j) {
              const T* grow = g + (b * J + j) * d;
              const T* urow = ud2 + ((b * I + i) * J + j) * d;
              T acc = T(0);
              for (int64_t t = 0; t < d; ++t) acc += grow[t] * urow[t];
              gc[(b * I + i) * J + j] += acc;
            }
      }
    });
  }
  return s;
}

template <typename T>
struct RoutingStateT {
  TensorT<T> logits;     // b[B,I,J] after the final update
  TensorT<T> couplings;  // c[B,I,J] used for the final weighted sum
};

using RoutingState = RoutingStateT<float>;

// Routing by agreement. Logits start at zero; each of iters-1 refinement
// rounds computes couplings, a candidate parent capsule, and adds the
// plain scalar agreement u_hat . v to the logits. All refinement rounds are
// bookkeeping (untaped); only the final weighted sum and squash carry
// gradient, so d(route)/d(u_hat) treats the final couplings as constants.
template <typename T>
std::pair<TensorT<T>, RoutingStateT<T>> route(const TensorT<T>& u_hat, int iters) {
  if (iters < 1) throw ContractError("route: iters must be >= 1, got " + std::to_string(iters));
  if (u_hat.rank() != 4)
    throw DimensionError("route: predictions must be [B,I,J,d], got " + shape_str(u_hat.shape()));
  const int64_t B = u_hat.dim(0), I = u_hat.dim(1), J = u_hat.dim(2), d = u_hat.dim(3);
  TensorT<T> logits({B, I, J}, T(0));
  TensorT<T> couplings;
  {
    typename TapeT<T>::NoGrad ng;
    for (int it = 0; it + 1 < iters; ++it) {
      auto c = softmax(logits, 2);
      auto v = squash(route_weighted_sum(c, u_hat));
      // b[b,i,j] += u_hat[b,i,j,:] . v[b,j,:]
      const T* ud = u_hat.data();
      const T* vd = v.data();
      T* bd = logits.data();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < I; ++i)
          for (int64_t j = 0; j < J; ++j) {
            const T* urow = ud + ((b * I + i) * J + j) * d;
            const T* vrow = vd + (b * J + j) * d;
            T acc = T(0);
            for (int64_t t = 0; t < d; ++t) acc += urow[t] * vrow[t];
            bd[(b * I + i) * J + j] += acc;
          }
    }
    couplings = softmax(logits, 2);
  }
  auto s = route_weighted_sum(couplings, u_hat);
  auto v = squash(s);
  return {v, RoutingStateT<T>{logits, couplings}};
}

// Class scores: capsule norms along the last axis. [B,K,d] -> [B,K].
template <typename T>
TensorT<T> capsule_logits(const TensorT<T>& v) {
  if (v.rank() != 3)
    throw DimensionError("capsule_logits: capsules must be [B,K,d], got " + shape_str(v.shape()));
  return l2_norm(v, 2);
}

// Argmax over class scores; ties resolve to the lowest class index.
template <typename T>
std::vector<int> predict_classes(const TensorT<T>& norms) {
  if (norms.rank() != 2)
    throw DimensionError("predict_classes: scores must be [B,K], got " + shape_str(norms.shape()));
  const int64_t B = norms.dim(0), K = norms.dim(1);
  std::vector<int> out(static_cast<size_t>(B));
  const T* nd = norms.data();
  for (int64_t b = 0; b < B; ++b) {
    int best = 0;
    T best_v = nd[b * K];
    for (int64_t k = 1; k < K; ++k)
      if (nd[b * K + k] > best_v) {
        best_v = nd[b * K + k];
        best = static_cast<int>(k);
      }
    out[static_cast<size_t>(b)] = best;
  }
  return out;
}

template <typename T>
TensorT<T> one_hot(const std::vector<int>& labels, int64_t num_classes) {
  TensorT<T> y({static_cast<int64_t>(labels.size()), num_classes}, T(0));
  T* yd = y.data();
  for (size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] < 0 || labels[b] >= num_classes)
      throw ContractError("one_hot: label " + std::to_string(labels[b]) +
                          " out of range for " + std::to_string(num_classes) + " classes");
    yd[b * static_cast<size_t>(num_classes) + static_cast<size_t>(labels[b])] = T(1);
  }
  return y;
}

// Margin loss, averaged over the batch:
//   L_k = T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2
// targets must be exactly one-hot rows.
template <typename T>
TensorT<T> margin_loss(const TensorT<T>& v_norms, const TensorT<T>& targets,
                       const MarginLossConfig& cfg = {}) {
  cfg.validate();
  if (v_norms.rank() != 2)
    throw DimensionError("margin_loss: scores must be [B,K], got " + shape_str(v_norms.shape()));
  check_same_shape("margin_loss", v_norms, targets);
  const int64_t B = targets.dim(0), K = targets.dim(1);
  const T* td = targets.data();
  for (int64_t b = 0; b < B; ++b) {
    int ones = 0;
    for (int64_t k = 0; k < K; ++k) {
      const T v = td[b * K + k];
      if (v == T(1))
        ++ones;
      else if (v != T(0))
        throw ContractError("margin_loss: targets row " + std::to_string(b) +
                            " is not one-hot (entry " + std::to_string(k) + " is " +
                            std::to_string(static_cast<double>(v)) + ")");
    }
    if (ones != 1)
      throw ContractError("margin_loss: targets row " + std::to_string(b) + " has " +
                          std::to_string(ones) + " ones, expected exactly 1");
  }
  auto present = relu(affine(v_norms, T(-1), static_cast<T>(cfg.m_plus)));
  auto absent = relu(affine(v_norms, T(1), static_cast<T>(-cfg.m_minus)));
  auto present_term = mul(mul(present, present), targets);
  auto inv_targets = affine(targets, T(-1), T(1));
  auto absent_term = scale(mul(mul(absent, absent), inv_targets), static_cast<T>(cfg.lambda_down));
  return scale(sum(add(present_term, absent_term)), T(1) / static_cast<T>(B));
}

}  // namespace capsdense
