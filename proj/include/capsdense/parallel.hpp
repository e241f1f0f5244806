#pragma once

#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

#include "capsdense/error.hpp"

namespace capsdense::par {

inline std::atomic<int>& thread_count_ref() {
  static std::atomic<int> n{1};
  return n;
}

inline void set_num_threads(int n) {
  if (n < 1) throw ContractError("set_num_threads: thread count must be >= 1");
  thread_count_ref().store(n, std::memory_order_relaxed);
}

inline int num_threads() { return thread_count_ref().load(std::memory_order_relaxed); }

// Runs body(lo, hi) over a partition of [0, n) into at most num_threads()
// contiguous chunks. Each index lands in exactly one chunk and every chunk
// keeps its internal iteration order, so results are identical for any
// thread count as long as chunks write disjoint outputs.
template <typename F>
void parallel_for(int64_t n, F&& body) {
  if (n <= 0) return;
  const int want = num_threads();
  if (want <= 1 || n == 1) {
    body(int64_t{0}, n);
    return;
  }
  const int t = static_cast<int>(want < n ? want : n);
  const int64_t chunk = (n + t - 1) / t;
  std::vector<std::thread> workers;
  workers.reserve(static_cast<size_t>(t) - 1);
  for (int w = 1; w < t; ++w) {
    const int64_t lo = w * chunk;
    const int64_t hi = std::min<int64_t>(lo + chunk, n);
    if (lo >= hi) break;
    workers.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  body(int64_t{0}, std::min<int64_t>(chunk, n));
  for (auto& th : workers) th.join();
}

}  // namespace capsdense::par
