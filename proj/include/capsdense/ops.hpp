#pragma once

#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <vector>

#include "capsdense/gemm.hpp"
#include "capsdense/tape.hpp"
#include "capsdense/tensor.hpp"

namespace capsdense {

namespace testhook {
// Deliberately skews the relu backward rule when set, so the gradient
// checker can prove it catches a wrong analytic gradient.
inline std::atomic<bool> corrupt_relu_backward{false};
}  // namespace testhook

enum class Pad { valid, same };

template <typename T>
inline bool should_record(std::initializer_list<const TensorT<T>*> inputs) {
  if (!TapeT<T>::active()) return false;
  for (const TensorT<T>* p : inputs)
    if (p->defined() && p->requires_grad()) return true;
  return false;
}

template <typename T>
inline void record(const char* op, TensorT<T>& out, std::function<void()> backward) {
  out.set_requires_grad(true);
  TapeT<T>::active()->record(op, out, std::move(backward));
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> y(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = xd[i] > T(0) ? xd[i] : T(0);
  if (should_record<T>({&x})) {
    auto xs = x.storage(), ys = y.storage();
    record<T>("relu", y, [xs, ys, n] {
      const T* g = ys->grad.data();
      const T* xd2 = xs->data.data();
      T* gx = acc_grad(xs);
      const T f = testhook::corrupt_relu_backward.load(std::memory_order_relaxed) ? T(1.02) : T(1);
      for (int64_t i = 0; i < n; ++i)
        if (xd2[i] > T(0)) gx[i] += f * g[i];
    });
  }
  return y;
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  TensorT<T> y(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = T(1) / (T(1) + std::exp(-xd[i]));
  if (should_record<T>({&x})) {
    auto xs = x.storage(), ys = y.storage();
    record<T>("sigmoid", y, [xs, ys, n] {
      const T* g = ys->grad.data();
      const T* yd2 = ys->data.data();
      T* gx = acc_grad(xs);
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * yd2[i] * (T(1) - yd2[i]);
    });
  }
  return y;
}

// y = a*x + b with scalar a, b.
template <typename T>
TensorT<T> affine(const TensorT<T>& x, T a, T b) {
  TensorT<T> y(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = a * xd[i] + b;
  if (should_record<T>({&x})) {
    auto xs = x.storage(), ys = y.storage();
    record<T>("affine", y, [xs, ys, a, n] {
      const T* g = ys->grad.data();
      T* gx = acc_grad(xs);
      for (int64_t i = 0; i < n; ++i) gx[i] += a * g[i];
    });
  }
  return y;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T factor) {
  return affine(x, factor, T(0));
}

template <typename T>
inline void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("add", a, b);
  TensorT<T> y(a.shape());
  const T* ad = a.data();
  const T* bd = b.data();
  T* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = ad[i] + bd[i];
  if (should_record<T>({&a, &b})) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    record<T>("add", y, [as, bs, ys, n] {
      const T* g = ys->grad.data();
      if (as->requires_grad) {
        T* ga = acc_grad(as);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bs->requires_grad) {
        T* gb = acc_grad(bs);
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return y;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("sub", a, b);
  TensorT<T> y(a.shape());
  const T* ad = a.data();
  const T* bd = b.data();
  T* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = ad[i] - bd[i];
  if (should_record<T>({&a, &b})) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    record<T>("sub", y, [as, bs, ys, n] {
      const T* g = ys->grad.data();
      if (as->requires_grad) {
        T* ga = acc_grad(as);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bs->requires_grad) {
        T* gb = acc_grad(bs);
        for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return y;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("mul", a, b);
  TensorT<T> y(a.shape());
  const T* ad = a.data();
  const T* bd = b.data();
  T* yd = y.data();
  const int64_t n = y.numel();
  for (int64_t i = 0; i < n; ++i) yd[i] = ad[i] * bd[i];
  if (should_record<T>({&a, &b})) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    record<T>("mul", y, [as, bs, ys, n] {
      const T* g = ys->grad.data();
      const T* ad2 = as->data.data();
      const T* bd2 = bs->data.data();
      if (as->requires_grad) {
        T* ga = acc_grad(as);
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bd2[i];
      }
      if (bs->requires_grad) {
        T* gb = acc_grad(bs);
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * ad2[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// matrix ops

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<T> y({m, n});
  gemm_nn(m, n, k, a.data(), b.data(), y.data());
  if (should_record<T>({&a, &b})) {
    auto as = a.storage(), bs = b.storage(), ys = y.storage();
    record<T>("matmul", y, [as, bs, ys, m, k, n] {
      const T* g = ys->grad.data();
      if (as->requires_grad) {
        // dA += G * B^T
        std::vector<T> bt(static_cast<size_t>(k * n));
        transpose(k, n, bs->data.data(), bt.data());
        gemm_nn(m, k, n, g, bt.data(), acc_grad(as));
      }
      if (bs->requires_grad) {
        // dB += A^T * G
        std::vector<T> at(static_cast<size_t>(m * k));
        transpose(m, k, as->data.data(), at.data());
        gemm_nn(k, n, m, at.data(), g, acc_grad(bs));
      }
    });
  }
  return y;
}

// y[i][j] = x[i][j] + b[j]
template <typename T>
TensorT<T> add_rowwise(const TensorT<T>& x, const TensorT<T>& b) {
  if (x.rank() != 2 || b.rank() != 1)
    throw DimensionError("add_rowwise: expects x rank 2 and b rank 1, got " +
                         shape_str(x.shape()) + " and " + shape_str(b.shape()));
  if (x.dim(1) != b.dim(0))
    throw DimensionError("add_rowwise: x columns " + std::to_string(x.dim(1)) +
                         " vs bias extent " + std::to_string(b.dim(0)));
  const int64_t m = x.dim(0), n = x.dim(1);
  TensorT<T> y({m, n});
  const T* xd = x.data();
  const T* bd = b.data();
  T* yd = y.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) yd[i * n + j] = xd[i * n + j] + bd[j];
  if (should_record<T>({&x, &b})) {
    auto xs = x.storage(), bs = b.storage(), ys = y.storage();
    record<T>("add_rowwise", y, [xs, bs, ys, m, n] {
      const T* g = ys->grad.data();
      if (xs->requires_grad) {
        T* gx = acc_grad(xs);
        for (int64_t i = 0; i < m * n; ++i) gx[i] += g[i];
      }
      if (bs->requires_grad) {
        T* gb = acc_grad(bs);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  }
  return y;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  return add_rowwise(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// convolution

namespace detail {

struct ConvDims {
  int64_t N, C, H, W, K, kh, kw, stride, pt, pl, OH, OW;
};

// col[(c*kh+ky)*kw+kx][oy*OW+ox]; out-of-image taps are zero.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
  const int64_t ohw = d.OH * d.OW;
  for (int64_t c = 0; c < d.C; ++c) {
    const T* xc = x + c * d.H * d.W;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        T* row = col + ((c * d.kh + ky) * d.kw + kx) * ohw;
        for (int64_t oy = 0; oy < d.OH; ++oy) {
          const int64_t iy = oy * d.stride + ky - d.pt;
          T* out = row + oy * d.OW;
          if (iy < 0 || iy >= d.H) {
            for (int64_t ox = 0; ox < d.OW; ++ox) out[ox] = T(0);
            continue;
          }
          const T* xrow = xc + iy * d.W;
          for (int64_t ox = 0; ox < d.OW; ++ox) {
            const int64_t ix = ox * d.stride + kx - d.pl;
            out[ox] = (ix >= 0 && ix < d.W) ? xrow[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* gx) {
  const int64_t ohw = d.OH * d.OW;
  for (int64_t c = 0; c < d.C; ++c) {
    T* gc = gx + c * d.H * d.W;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        const T* row = col + ((c * d.kh + ky) * d.kw + kx) * ohw;
        for (int64_t oy = 0; oy < d.OH; ++oy) {
          const int64_t iy = oy * d.stride + ky - d.pt;
          if (iy < 0 || iy >= d.H) continue;
          T* grow = gc + iy * d.W;
          const T* in = row + oy * d.OW;
          for (int64_t ox = 0; ox < d.OW; ++ox) {
            const int64_t ix = ox * d.stride + kx - d.pl;
            if (ix >= 0 && ix < d.W) grow[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// input [N,C,H,W], kernel [K,C,kh,kw], bias [K] -> [N,K,OH,OW].
// valid keeps only fully covered taps; same pads to ceil(H/stride) x
// ceil(W/stride), putting the odd pad pixel at the bottom/right.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, const TensorT<T>& bias,
                  int stride, Pad padding) {
  if (input.rank() != 4)
    throw DimensionError("conv2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
  if (kernel.rank() != 4)
    throw DimensionError("conv2d: kernel must be [K,C,kh,kw], got " + shape_str(kernel.shape()));
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))
    throw DimensionError("conv2d: bias must be [K]=" + std::to_string(kernel.dim(0)) + ", got " +
                         shape_str(bias.shape()));
  if (input.dim(1) != kernel.dim(1))
    throw DimensionError("conv2d: input has " + std::to_string(input.dim(1)) +
                         " channels (axis 1) but kernel expects " + std::to_string(kernel.dim(1)));
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");

  detail::ConvDims d;
  d.N = input.dim(0);
  d.C = input.dim(1);
  d.H = input.dim(2);
  d.W = input.dim(3);
  d.K = kernel.dim(0);
  d.kh = kernel.dim(2);
  d.kw = kernel.dim(3);
  d.stride = stride;
  if (padding == Pad::valid) {
    if (d.H < d.kh || d.W < d.kw)
      throw DimensionError("conv2d: valid padding needs input " + std::to_string(d.H) + "x" +
                           std::to_string(d.W) + " >= kernel " + std::to_string(d.kh) + "x" +
                           std::to_string(d.kw));
    d.pt = d.pl = 0;
    d.OH = (d.H - d.kh) / stride + 1;
    d.OW = (d.W - d.kw) / stride + 1;
  } else {
    d.OH = (d.H + stride - 1) / stride;
    d.OW = (d.W + stride - 1) / stride;
    const int64_t ph = std::max<int64_t>(0, (d.OH - 1) * stride + d.kh - d.H);
    const int64_t pw = std::max<int64_t>(0, (d.OW - 1) * stride + d.kw - d.W);
    d.pt = ph / 2;  // odd pad goes to the bottom/right
    d.pl = pw / 2;
  }

  TensorT<T> y({d.N, d.K, d.OH, d.OW});
  const int64_t ckk = d.C * d.kh * d.kw;
  const int64_t ohw = d.OH * d.OW;
  {
    std::vector<T> col(static_cast<size_t>(ckk * ohw));
    const T* xd = input.data();
    const T* kd = kernel.data();
    const T* bd = bias.data();
    T* yd = y.data();
    for (int64_t n = 0; n < d.N; ++n) {
      detail::im2col(xd + n * d.C * d.H * d.W, d, col.data());
      T* yn = yd + n * d.K * ohw;
      gemm_nn(d.K, ohw, ckk, kd, col.data(), yn);
      for (int64_t k = 0; k < d.K; ++k) {
        const T b = bd[k];
        T* row = yn + k * ohw;
        for (int64_t p = 0; p < ohw; ++p) row[p] += b;
      }
    }
  }

  if (should_record<T>({&input, &kernel, &bias})) {
    auto xs = input.storage(), ks = kernel.storage(), bs = bias.storage(), ys = y.storage();
    record<T>("conv2d", y, [xs, ks, bs, ys, d, ckk, ohw] {
      const T* g = ys->grad.data();
      if (bs->requires_grad) {
        T* gb = acc_grad(bs);
        for (int64_t n = 0; n < d.N; ++n)
          for (int64_t k = 0; k < d.K; ++k) {
            const T* row = g + (n * d.K + k) * ohw;
            T acc = T(0);
            for (int64_t p = 0; p < ohw; ++p) acc += row[p];
            gb[k] += acc;
          }
      }
      const bool need_x = xs->requires_grad, need_k = ks->requires_grad;
      if (!need_x && !need_k) return;
      std::vector<T> col(static_cast<size_t>(ckk * ohw));
      std::vector<T> colT(need_k ? static_cast<size_t>(ckk * ohw) : 0);
      std::vector<T> kT(need_x ? static_cast<size_t>(ckk * d.K) : 0);
      std::vector<T> dcol(need_x ? static_cast<size_t>(ckk * ohw) : 0);
      if (need_x) transpose(d.K, ckk, ks->data.data(), kT.data());
      T* gk = need_k ? acc_grad(ks) : nullptr;
      T* gx = need_x ? acc_grad(xs) : nullptr;
      for (int64_t n = 0; n < d.N; ++n) {
        const T* gn = g + n * d.K * ohw;
        if (need_k) {
          detail::im2col(xs->data.data() + n * d.C * d.H * d.W, d, col.data());
          transpose(ckk, ohw, col.data(), colT.data());
          gemm_nn(d.K, ckk, ohw, gn, colT.data(), gk);
        }
        if (need_x) {
          std::fill(dcol.begin(), dcol.end(), T(0));
          gemm_nn(ckk, ohw, d.K, kT.data(), gn, dcol.data());
          detail::col2im_add(dcol.data(), d, gx + n * d.C * d.H * d.W);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  const int64_t n = numel_of(shape);
  if (n != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " (" +
                         std::to_string(x.numel()) + " values) as " + shape_str(shape));
  TensorT<T> y = TensorT<T>::from_data(std::move(shape), std::vector<T>(x.data(), x.data() + n));
  if (should_record<T>({&x})) {
    auto xs = x.storage(), ys = y.storage();
    record<T>("reshape", y, [xs, ys, n] {
      const T* g = ys->grad.data();
      T* gx = acc_grad(xs);
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return y;
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis) {
  if (xs.empty()) throw ContractError("concat: needs at least one input");
  const int rank = xs[0].rank();
  if (axis < 0 || axis >= rank)
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  Shape out_shape = xs[0].shape();
  int64_t axis_total = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].rank() != rank)
      throw DimensionError("concat: input " + std::to_string(i) + " has rank " +
                           std::to_string(xs[i].rank()) + ", expected " + std::to_string(rank));
    for (int a = 0; a < rank; ++a)
      if (a != axis && xs[i].dim(a) != out_shape[static_cast<size_t>(a)])
        throw DimensionError("concat: input " + std::to_string(i) + " extent " +
                             std::to_string(xs[i].dim(a)) + " on axis " + std::to_string(a) +
                             " differs from " + std::to_string(out_shape[static_cast<size_t>(a)]));
    axis_total += xs[i].dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= out_shape[static_cast<size_t>(a)];
  for (int a = axis + 1; a < rank; ++a) inner *= out_shape[static_cast<size_t>(a)];

  TensorT<T> y(out_shape);
  std::vector<int64_t> block(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) block[i] = xs[i].dim(axis) * inner;
  const int64_t out_row = axis_total * inner;
  T* yd = y.data();
  for (int64_t o = 0; o < outer; ++o) {
    int64_t off = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
      std::memcpy(yd + o * out_row + off, xs[i].data() + o * block[i],
                  static_cast<size_t>(block[i]) * sizeof(T));
      off += block[i];
    }
  }

  bool any_grad = false;
  for (const auto& x : xs) any_grad = any_grad || x.requires_grad();
  if (TapeT<T>::active() && any_grad) {
    std::vector<std::shared_ptr<TensorStorage<T>>> srcs;
    srcs.reserve(xs.size());
    for (const auto& x : xs) srcs.push_back(x.storage());
    auto ys = y.storage();
    record<T>("concat", y, [srcs, ys, block, outer, out_row] {
      const T* g = ys->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        int64_t off = 0;
        for (size_t i = 0; i < srcs.size(); ++i) {
          if (srcs[i]->requires_grad) {
            T* gx = acc_grad(srcs[i]);
            const T* gsrc = g + o * out_row + off;
            T* dst = gx + o * block[i];
            for (int64_t j = 0; j < block[i]; ++j) dst[j] += gsrc[j];
          }
          off += block[i];
        }
      }
    });
  }
  return y;
}

// Channel concatenation of [N,C_i,H,W] feature maps.
template <typename T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: needs at least one input");
  for (size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].rank() != 4)
      throw DimensionError("concat_channels: input " + std::to_string(i) + " must be [N,C,H,W], got " +
                           shape_str(xs[i].shape()));
    if (xs[i].dim(0) != xs[0].dim(0) || xs[i].dim(2) != xs[0].dim(2) ||
        xs[i].dim(3) != xs[0].dim(3))
      throw DimensionError("concat_channels: input " + std::to_string(i) + " is " +
                           shape_str(xs[i].shape()) + " but input 0 is " + shape_str(xs[0].shape()) +
                           " (batch and spatial extents must match)");
  }
  return concat(xs, 1);
}

// ---------------------------------------------------------------------------
// lane ops (softmax / norms along one axis)

namespace detail {

struct Lanes {
  int64_t outer, n, inner;
};

template <typename T>
Lanes lanes_of(const TensorT<T>& x, int axis, const char* op) {
  const int rank = x.rank();
  if (axis < 0 || axis >= rank)
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  Lanes l{1, x.dim(axis), 1};
  for (int a = 0; a < axis; ++a) l.outer *= x.dim(a);
  for (int a = axis + 1; a < rank; ++a) l.inner *= x.dim(a);
  return l;
}

}  // namespace detail

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
  const auto l = detail::lanes_of(x, axis, "softmax");
  TensorT<T> y(x.shape());
  const T* xd = x.data();
  T* yd = y.data();
  for (int64_t o = 0; o < l.outer; ++o) {
    for (int64_t in = 0; in < l.inner; ++in) {
      const int64_t base = o * l.n * l.inner + in;
      T mx = xd[base];
      for (int64_t t = 1; t < l.n; ++t) mx = std::max(mx, xd[base + t * l.inner]);
      T sum = T(0);
      for (int64_t t = 0; t < l.n; ++t) {
        const T e = std::exp(xd[base + t * l.inner] - mx);
        yd[base + t * l.inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int64_t t = 0; t < l.n; ++t) yd[base + t * l.inner] *= inv;
    }
  }
  if (should_record<T>({&x})) {
    auto xs = x.storage(), ys = y.storage();
    record<T>("softmax", y, [xs, ys, l] {
      const T* g = ys->grad.data();
      const T* yd2 = ys->data.data();
      T* gx = acc_grad(xs);
      for (int64_t o = 0; o < l.outer; ++o) {
        for (int64_t in = 0; in < l.inner; ++in) {
          const int64_t base = o * l.n * l.inner + in;
          T dot = T(0);
          for (int64_t t = 0; t < l.n; ++t) dot += g[base + t * l.inner] * yd2[base + t * l.inner];
          for (int64_t t = 0; t < l.n; ++t) {
            const int64_t idx = base + t * l.inner;
            gx[idx] += yd2[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return y;
}

// Euclidean norm along `axis`; the axis is removed from the output shape.
// eps sits under the square root so the gradient stays finite at zero.
template <typename T>
TensorT<T> l2_norm(const TensorT<T>& x, int axis, T eps = T(1e-9)) {
  const auto l = detail::lanes_of(x, axis, "l2_norm");
  if (eps < T(0)) throw ContractError("l2_norm: eps must be >= 0");
  Shape out_shape;
  for (int a = 0; a < x.rank(); ++a)
    if (a != axis) out_shape.push_back(x.dim(a));
  TensorT<T> y(out_shape.empty() ? Shape{} : out_shape);
  const T* xd = x.data();
  T* yd = y.data();
  for (int64_t o = 0; o < l.outer; ++o) {
    for (int64_t in = 0; in < l.inner; ++in) {
      const int64_t base = o * l.n * l.inner + in;
      T acc = eps;
      for (int64_t t = 0; t < l.n; ++t) {
        const T v = xd[base + t * l.inner];
        acc += v * v;
      }
      yd[o * l.inner + in] = std::sqrt(acc);
    }
  }
  if (should_record<T>({&x})) {
    auto xs = x.storage(), ys = y.storage();
    record<T>("l2_norm", y, [xs, ys, l] {
      const T* g = ys->grad.data();
      const T* norms = ys->data.data();
      const T* xd2 = xs->data.data();
      T* gx = acc_grad(xs);
      for (int64_t o = 0; o < l.outer; ++o) {
        for (int64_t in = 0; in < l.inner; ++in) {
          const int64_t base = o * l.n * l.inner + in;
          const T go = g[o * l.inner + in] / norms[o * l.inner + in];
          for (int64_t t = 0; t < l.n; ++t) {
            const int64_t idx = base + t * l.inner;
            gx[idx] += go * xd2[idx];
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
  T acc = T(0);
  const T* xd = x.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += xd[i];
  TensorT<T> y = TensorT<T>::scalar(acc);
  if (should_record<T>({&x})) {
    auto xs = x.storage(), ys = y.storage();
    record<T>("sum", y, [xs, ys, n] {
      const T g = ys->grad[0];
      T* gx = acc_grad(xs);
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return y;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Mean squared error over all elements.
template <typename T>
TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape("mse", a, b);
  auto d = sub(a, b);
  return scale(sum(mul(d, d)), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// broadcast multiply and graph surgery

// y[..., t] = x[..., t] * m[...]; m's shape is x's without the last axis.
template <typename T>
TensorT<T> mul_broadcast_last(const TensorT<T>& x, const TensorT<T>& m) {
  if (x.rank() < 1 || m.rank() != x.rank() - 1)
    throw DimensionError("mul_broadcast_last: got " + shape_str(x.shape()) + " and " +
                         shape_str(m.shape()) + "; the mask must drop exactly the last axis");
  for (int a = 0; a + 1 < x.rank(); ++a)
    if (x.dim(a) != m.dim(a))
      throw DimensionError("mul_broadcast_last: axis " + std::to_string(a) + " extent " +
                           std::to_string(x.dim(a)) + " vs " + std::to_string(m.dim(a)));
  const int64_t rows = m.numel(), d = x.dim(x.rank() - 1);
  TensorT<T> y(x.shape());
  const T* xd = x.data();
  const T* md = m.data();
  T* yd = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T f = md[r];
    for (int64_t t = 0; t < d; ++t) yd[r * d + t] = xd[r * d + t] * f;
  }
  if (should_record<T>({&x, &m})) {
    auto xs = x.storage(), ms = m.storage(), ys = y.storage();
    record<T>("mul_broadcast_last", y, [xs, ms, ys, rows, d] {
      const T* g = ys->grad.data();
      const T* xd2 = xs->data.data();
      const T* md2 = ms->data.data();
      if (xs->requires_grad) {
        T* gx = acc_grad(xs);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t t = 0; t < d; ++t) gx[r * d + t] += g[r * d + t] * md2[r];
      }
      if (ms->requires_grad) {
        T* gm = acc_grad(ms);
        for (int64_t r = 0; r < rows; ++r) {
          T acc = T(0);
          for (int64_t t = 0; t < d; ++t) acc += g[r * d + t] * xd2[r * d + t];
          gm[r] += acc;
        }
      }
    });
  }
  return y;
}

// Detaches x from the graph: same values, no gradient path.
template <typename T>
TensorT<T> stop_grad(const TensorT<T>& x) {
  return TensorT<T>::from_data(x.shape(), std::vector<T>(x.data(), x.data() + x.numel()));
}

// Regroups conv features [N, C*D, H, W] into capsules [N, C*H*W, D]:
// channel block c contributes capsules indexed c*H*W + y*W + x, each taking
// its D components from consecutive channels.
template <typename T>
TensorT<T> caps_from_conv(const TensorT<T>& x, int64_t d) {
  if (x.rank() != 4)
    throw DimensionError("caps_from_conv: input must be [N,C*D,H,W], got " + shape_str(x.shape()));
  if (d < 1 || x.dim(1) % d != 0)
    throw DimensionError("caps_from_conv: channel extent " + std::to_string(x.dim(1)) +
                         " is not a multiple of capsule dim " + std::to_string(d));
  const int64_t N = x.dim(0), C = x.dim(1) / d, H = x.dim(2), W = x.dim(3);
  const int64_t hw = H * W, caps = C * hw;
  TensorT<T> y({N, caps, d});
  const T* xd = x.data();
  T* yd = y.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t t = 0; t < d; ++t) {
        const T* src = xd + ((n * C * d) + c * d + t) * hw;
        T* dst = yd + (n * caps + c * hw) * d + t;
        for (int64_t p = 0; p < hw; ++p) dst[p * d] = src[p];
      }
  if (should_record<T>({&x})) {
    auto xs = x.storage(), ys = y.storage();
    record<T>("caps_from_conv", y, [xs, ys, N, C, d, hw, caps] {
      const T* g = ys->grad.data();
      T* gx = acc_grad(xs);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t t = 0; t < d; ++t) {
            T* dst = gx + ((n * C * d) + c * d + t) * hw;
            const T* src = g + (n * caps + c * hw) * d + t;
            for (int64_t p = 0; p < hw; ++p) dst[p] += src[p * d];
          }
    });
  }
  return y;
}

}  // namespace capsdense
