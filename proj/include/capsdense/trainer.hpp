#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capsdense/data.hpp"
#include "capsdense/model.hpp"

namespace capsdense {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment buffers aligned with the parameter store order.
template <typename T>
struct AdamStateT {
  int64_t step = 0;
  std::vector<std::vector<T>> m, v;

  void init(const ParamStoreT<T>& ps) {
    step = 0;
    m.clear();
    v.clear();
    for (const auto& [name, t] : ps.items()) {
      m.emplace_back(static_cast<size_t>(t.numel()), T(0));
      v.emplace_back(static_cast<size_t>(t.numel()), T(0));
    }
  }

  bool initialized() const { return !m.empty(); }
};

using AdamState = AdamStateT<float>;

// One bias-corrected Adam update. Every parameter must have received a
// gradient (a zero gradient is fine; a missing buffer means the forward
// pass never reached the parameter, which is a wiring bug).
template <typename T>
void adam_step(ParamStoreT<T>& ps, AdamStateT<T>& state, const AdamConfig& cfg, T lr) {
  if (!state.initialized() || state.m.size() != ps.size())
    throw ContractError("adam_step: state not initialized for this parameter store");
  state.step += 1;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.eps);
  const T c1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(state.step)));
  const T c2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(state.step)));
  size_t idx = 0;
  for (auto& [name, t] : ps.items()) {
    if (!t.has_grad())
      throw ContractError("adam_step: parameter '" + name + "' has no gradient");
    const T* g = t.grad();
    T* m = state.m[idx].data();
    T* v = state.v[idx].data();
    T* p = t.data();
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m[i] / c1;
      const T vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    ++idx;
  }
}

struct TrainConfig {
  int epochs = 10;
  int batch_size = 128;
  double lr = 0.001;
  double lr_decay = 0.9;  // per epoch: lr * decay^epoch
  double recon_multiplier = 0.0005;
  MarginLossConfig margin;
  AdamConfig adam;
  uint64_t seed = 1;
  int checkpoint_every = 0;  // extra checkpoints every k epochs; 0 = final only
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double margin_loss = 0;
  double recon_loss = 0;
  double total_loss = 0;
  double train_acc = 0;
  double test_acc = 0;
  double seconds = 0;
  std::vector<double> head_margins;  // one entry per routing head when > 1
};

struct EvalSummary {
  double accuracy = 0;
  double margin_loss = 0;
  double recon_loss = 0;
  double total_loss = 0;
  std::vector<double> per_class_acc;
};

struct StepResult {
  double margin = 0;
  double recon = 0;
  double total = 0;
  int correct = 0;
  std::vector<double> head_margins;
};

struct FitResult {
  std::vector<EpochMetrics> epochs;
  double best_test_acc = 0;
  int best_epoch = -1;
};

// Learning rate for an absolute epoch index.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch));
}

// Deterministic per-epoch shuffle seed.
uint64_t epoch_shuffle_seed(uint64_t base_seed, int epoch);

// Forward, loss, backward, Adam update for one batch. Throws
// NumericalError naming the first non-finite tensor if the loss blows up.
StepResult train_step(Model& model, const Batch& batch, const TrainConfig& cfg,
                      AdamState& state, float lr);

// One pass over the training set (shuffled by epoch seed) followed by a
// test-set evaluation. `epoch` is absolute and drives the lr schedule.
EpochMetrics run_epoch(Model& model, const Dataset& train, const Dataset& test,
                       const TrainConfig& cfg, AdamState& state, int epoch);

EvalSummary evaluate(Model& model, const Dataset& data, const TrainConfig& cfg);

std::string metrics_csv_header(size_t num_heads);
std::string metrics_csv_row(const EpochMetrics& m);

// Full training loop. When out_dir is non-empty it is created and receives
// metrics.csv (one row per epoch, flushed as it goes), checkpoint_final.cdck
// and any periodic checkpoints. start_epoch > 0 resumes the schedule at
// that epoch (metrics.csv is then appended to). on_epoch, when set, fires
// after every epoch.
FitResult fit(Model& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
              const std::string& out_dir = "", int start_epoch = 0,
              AdamState* resumed_state = nullptr,
              const std::function<void(const EpochMetrics&)>& on_epoch = nullptr);

}  // namespace capsdense
