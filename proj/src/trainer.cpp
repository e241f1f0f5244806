#include "capsdense/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "capsdense/checkpoint.hpp"

namespace capsdense {

namespace {

double fin(float v) { return static_cast<double>(v); }

// Formats doubles with enough digits to round-trip metric comparisons.
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Names the first non-finite tensor on the tape (checking parameters
// first), for the NumericalError message.
std::string first_non_finite(const Tape& tape, const ParamStore& ps) {
  for (const auto& [name, t] : ps.items())
    if (!t.all_finite()) return "parameter '" + name + "'";
  size_t idx = 0;
  for (const auto& node : tape.nodes()) {
    for (float v : node.out->data)
      if (!std::isfinite(v))
        return std::string("op '") + node.op + "' (node " + std::to_string(idx) + ")";
    ++idx;
  }
  return "the loss itself (all upstream tensors are finite)";
}

struct BatchLosses {
  Tensor total;
  double margin = 0, recon = 0;
  std::vector<double> head_margins;
  std::vector<int> predicted;
  int correct = 0;
};

// Loss over one batch on the active tape. Per-head margins are summed; the
// reconstruction term is added when the model carries a decoder.
BatchLosses batch_losses(Model& model, const Batch& batch, const TrainConfig& cfg,
                         bool mask_by_label) {
  BatchLosses out;
  Forward fwd = model.forward(batch.images, mask_by_label ? &batch.onehot : nullptr);
  Tensor margin_total;
  for (size_t h = 0; h < fwd.heads.size(); ++h) {
    Tensor m = margin_loss(fwd.heads[h].norms, batch.onehot, cfg.margin);
    out.head_margins.push_back(fin(m.item()));
    margin_total = h == 0 ? m : add(margin_total, m);
  }
  out.margin = fin(margin_total.item());
  out.total = margin_total;
  if (model.spec().with_decoder) {
    const auto& spec = model.spec();
    const int64_t b = batch.images.dim(0);
    const int64_t px = spec.decoder.out_pixels();
    Tensor target({b, px});
    // Reconstruction target: the first decoder.out_channels channels of the
    // input (the stacked model reconstructs channel 0 only).
    const int64_t in_px = static_cast<int64_t>(spec.in_h) * spec.in_w;
    for (int64_t i = 0; i < b; ++i)
      std::copy(batch.images.data() + i * spec.in_channels * in_px,
                batch.images.data() + i * spec.in_channels * in_px + px, target.data() + i * px);
    Tensor rl = reconstruction_loss(fwd.reconstruction, target,
                                    static_cast<float>(cfg.recon_multiplier));
    out.recon = fin(rl.item());
    out.total = add(out.total, rl);
  }
  for (size_t i = 0; i < batch.labels.size(); ++i)
    if (fwd.predicted[i] == batch.labels[i]) ++out.correct;
  out.predicted = std::move(fwd.predicted);
  return out;
}

}  // namespace

uint64_t epoch_shuffle_seed(uint64_t base_seed, int epoch) {
  uint64_t z = base_seed + 0x9e3779b97f4a7c15ull * (static_cast<uint64_t>(epoch) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

StepResult train_step(Model& model, const Batch& batch, const TrainConfig& cfg, AdamState& state,
                      float lr) {
  cfg.margin.validate();
  if (!state.initialized()) state.init(model.params());
  model.params().zero_grads();
  Tape tape;
  BatchLosses losses = batch_losses(model, batch, cfg, /*mask_by_label=*/true);
  const double total = fin(losses.total.item());
  if (!std::isfinite(total))
    throw NumericalError("non-finite training loss; first non-finite tensor: " +
                         first_non_finite(tape, model.params()));
  tape.backward(losses.total);
  adam_step(model.params(), state, cfg.adam, lr);
  StepResult r;
  r.margin = losses.margin;
  r.recon = losses.recon;
  r.total = total;
  r.correct = losses.correct;
  r.head_margins = std::move(losses.head_margins);
  return r;
}

EpochMetrics run_epoch(Model& model, const Dataset& train, const Dataset& test,
                       const TrainConfig& cfg, AdamState& state, int epoch) {
  const auto t0 = std::chrono::steady_clock::now();
  const double lr = lr_at_epoch(cfg, epoch);
  auto batches = make_batches(train, cfg.batch_size, epoch_shuffle_seed(cfg.seed, epoch));

  EpochMetrics m;
  m.epoch = epoch;
  m.lr = lr;  // the schedule value; the update itself runs in float
  double margin_sum = 0, recon_sum = 0, total_sum = 0;
  int64_t correct = 0;
  std::vector<double> head_sums;
  for (const auto& batch : batches) {
    const auto b = static_cast<double>(batch.labels.size());
    StepResult r = train_step(model, batch, cfg, state, static_cast<float>(lr));
    margin_sum += r.margin * b;
    recon_sum += r.recon * b;
    total_sum += r.total * b;
    correct += r.correct;
    if (head_sums.empty()) head_sums.assign(r.head_margins.size(), 0.0);
    for (size_t h = 0; h < r.head_margins.size(); ++h) head_sums[h] += r.head_margins[h] * b;
  }
  const auto n = static_cast<double>(train.size());
  m.margin_loss = margin_sum / n;
  m.recon_loss = recon_sum / n;
  m.total_loss = total_sum / n;
  m.train_acc = static_cast<double>(correct) / n;
  if (head_sums.size() > 1)
    for (double s : head_sums) m.head_margins.push_back(s / n);

  m.test_acc = evaluate(model, test, cfg).accuracy;
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

EvalSummary evaluate(Model& model, const Dataset& data, const TrainConfig& cfg) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  Tape::NoGrad ng;
  EvalSummary s;
  std::vector<int64_t> class_total(static_cast<size_t>(data.num_classes), 0);
  std::vector<int64_t> class_hit(static_cast<size_t>(data.num_classes), 0);
  double margin_sum = 0, recon_sum = 0;
  int64_t correct = 0;
  for (const auto& batch : make_eval_batches(data, cfg.batch_size)) {
    BatchLosses losses = batch_losses(model, batch, cfg, /*mask_by_label=*/false);
    const auto b = static_cast<double>(batch.labels.size());
    margin_sum += losses.margin * b;
    recon_sum += losses.recon * b;
    correct += losses.correct;
    for (size_t i = 0; i < batch.labels.size(); ++i) {
      const auto k = static_cast<size_t>(batch.labels[i]);
      ++class_total[k];
      if (losses.predicted[i] == batch.labels[i]) ++class_hit[k];
    }
  }
  const auto n = static_cast<double>(data.size());
  s.accuracy = static_cast<double>(correct) / n;
  s.margin_loss = margin_sum / n;
  s.recon_loss = recon_sum / n;
  s.total_loss = s.margin_loss + s.recon_loss;
  for (int k = 0; k < data.num_classes; ++k)
    s.per_class_acc.push_back(class_total[static_cast<size_t>(k)] == 0
                                  ? 0.0
                                  : static_cast<double>(class_hit[static_cast<size_t>(k)]) /
                                        static_cast<double>(class_total[static_cast<size_t>(k)]));
  return s;
}

std::string metrics_csv_header(size_t num_heads) {
  std::string h = "epoch,lr,margin_loss,recon_loss,total_loss,train_acc,test_acc,seconds";
  if (num_heads > 1)
    for (size_t i = 0; i < num_heads; ++i) h += ",head" + std::to_string(i) + "_margin";
  return h;
}

std::string metrics_csv_row(const EpochMetrics& m) {
  std::string row = std::to_string(m.epoch) + "," + fmt(m.lr) + "," + fmt(m.margin_loss) + "," +
                    fmt(m.recon_loss) + "," + fmt(m.total_loss) + "," + fmt(m.train_acc) + "," +
                    fmt(m.test_acc) + "," + fmt(m.seconds);
  for (double h : m.head_margins) row += "," + fmt(h);
  return row;
}

FitResult fit(Model& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
              const std::string& out_dir, int start_epoch, AdamState* resumed_state,
              const std::function<void(const EpochMetrics&)>& on_epoch) {
  if (cfg.epochs < 1) throw ConfigError("fit: epochs must be >= 1");
  if (start_epoch < 0 || start_epoch >= cfg.epochs)
    throw ConfigError("fit: start epoch " + std::to_string(start_epoch) +
                      " outside schedule of " + std::to_string(cfg.epochs) + " epochs");
  AdamState local_state;
  AdamState& state = resumed_state ? *resumed_state : local_state;
  if (!state.initialized()) state.init(model.params());

  std::ofstream csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const auto path = out_dir + "/metrics.csv";
    const bool fresh = start_epoch == 0 || !std::filesystem::exists(path);
    csv.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw ConfigError("fit: cannot write " + path);
    if (fresh) {
      const size_t heads = model.spec().is_stacked() ? model.spec().levels.size() + 1 : 1;
      csv << metrics_csv_header(heads) << "\n" << std::flush;
    }
  }

  FitResult result;
  for (int e = start_epoch; e < cfg.epochs; ++e) {
    EpochMetrics m = run_epoch(model, train, test, cfg, state, e);
    if (csv.is_open()) csv << metrics_csv_row(m) << "\n" << std::flush;
    if (on_epoch) on_epoch(m);
    if (m.test_acc > result.best_test_acc || result.best_epoch < 0) {
      result.best_test_acc = m.test_acc;
      result.best_epoch = e;
    }
    if (!out_dir.empty() && cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0 &&
        e + 1 < cfg.epochs)
      save_training_state(out_dir + "/checkpoint_epoch" + std::to_string(e) + ".cdck",
                          model.params(), &state, e + 1);
    result.epochs.push_back(std::move(m));
  }
  if (!out_dir.empty())
    save_training_state(out_dir + "/checkpoint_final.cdck", model.params(), &state, cfg.epochs);
  return result;
}

}  // namespace capsdense
