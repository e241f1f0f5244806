#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "capsdense/tensor.hpp"

namespace capsdense {

// Reverse-mode tape. Ops append nodes in forward order, which is a
// topological order by construction, and backward() replays them once in
// reverse. Constructing a tape makes it the active recorder for the current
// thread until it goes out of scope; ops record only while a tape is active.
template <typename T>
class TapeT {
 public:
  struct Node {
    const char* op;  // for diagnostics (non-finite hunts, tests)
    std::shared_ptr<TensorStorage<T>> out;
    std::function<void()> backward;
  };

  TapeT() : prev_(active_ref()) { active_ref() = this; }
  ~TapeT() { active_ref() = prev_; }
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  static TapeT* active() { return active_ref(); }

  void record(const char* op, const TensorT<T>& out, std::function<void()> backward) {
    nodes_.push_back(Node{op, out.storage(), std::move(backward)});
  }

  // Seeds d(root)/d(root) = 1 and accumulates gradients into every
  // requires_grad tensor reachable from root. Contributions add, so a
  // tensor used twice receives both terms. Nodes whose output never
  // received a gradient are skipped.
  void backward(const TensorT<T>& root) {
    if (!root.defined() || root.numel() != 1)
      throw ContractError("backward: root must be a defined scalar tensor");
    root.storage()->grad.assign(1, T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if (!it->out->grad.empty()) it->backward();
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  size_t size() const { return nodes_.size(); }

  // Suspends recording for bookkeeping computations (routing updates,
  // evaluation passes). Restores the previous recorder on scope exit.
  class NoGrad {
   public:
    NoGrad() : prev_(active_ref()) { active_ref() = nullptr; }
    ~NoGrad() { active_ref() = prev_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

   private:
    TapeT* prev_;
  };

 private:
  static TapeT*& active_ref() {
    static thread_local TapeT* t = nullptr;
    return t;
  }

  TapeT* prev_;
  std::vector<Node> nodes_;
};

using Tape = TapeT<float>;

// Ensures grad storage exists and returns it; backward closures accumulate
// through this so missing buffers appear on demand, zero-filled.
template <typename T>
inline T* acc_grad(const std::shared_ptr<TensorStorage<T>>& s) {
  if (s->grad.empty()) s->grad.assign(s->data.size(), T(0));
  return s->grad.data();
}

}  // namespace capsdense
