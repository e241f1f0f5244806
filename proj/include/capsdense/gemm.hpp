#pragma once

#include <cstdint>

#include "capsdense/parallel.hpp"

namespace capsdense {

// C[M,N] += A[M,K] * B[K,N], all row-major. Four output rows share one pass
// over B so the inner loop stays in registers; the k loop order is fixed,
// which keeps float accumulation bit-identical for any thread count (rows
// are parallelized, never the reduction).
template <typename T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C) {
  par::parallel_for(M, [=](int64_t lo, int64_t hi) {
    int64_t i = lo;
    for (; i + 4 <= hi; i += 4) {
      const T* a0 = A + (i + 0) * K;
      const T* a1 = A + (i + 1) * K;
      const T* a2 = A + (i + 2) * K;
      const T* a3 = A + (i + 3) * K;
      T* c0 = C + (i + 0) * N;
      T* c1 = C + (i + 1) * N;
      T* c2 = C + (i + 2) * N;
      T* c3 = C + (i + 3) * N;
      for (int64_t k = 0; k < K; ++k) {
        const T a0k = a0[k], a1k = a1[k], a2k = a2[k], a3k = a3[k];
        const T* b = B + k * N;
        for (int64_t j = 0; j < N; ++j) {
          const T bj = b[j];
          c0[j] += a0k * bj;
          c1[j] += a1k * bj;
          c2[j] += a2k * bj;
          c3[j] += a3k * bj;
        }
      }
    }
    for (; i < hi; ++i) {
      const T* a = A + i * K;
      T* c = C + i * N;
      for (int64_t k = 0; k < K; ++k) {
        const T ak = a[k];
        const T* b = B + k * N;
        for (int64_t j = 0; j < N; ++j) c[j] += ak * b[j];
      }
    }
  });
}

// dst[c][r] = src[r][c]; src is rows x cols.
template <typename T>
void transpose(int64_t rows, int64_t cols, const T* src, T* dst) {
  constexpr int64_t kBlock = 32;
  for (int64_t rb = 0; rb < rows; rb += kBlock) {
    const int64_t re = rb + kBlock < rows ? rb + kBlock : rows;
    for (int64_t cb = 0; cb < cols; cb += kBlock) {
      const int64_t ce = cb + kBlock < cols ? cb + kBlock : cols;
      for (int64_t r = rb; r < re; ++r)
        for (int64_t c = cb; c < ce; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
}

}  // namespace capsdense
