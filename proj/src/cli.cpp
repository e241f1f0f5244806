#include "capsdense/cli.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "capsdense/checkpoint.hpp"
#include "capsdense/data.hpp"
#include "capsdense/error.hpp"
#include "capsdense/gradcheck.hpp"
#include "capsdense/image_io.hpp"
#include "capsdense/model.hpp"
#include "capsdense/model_json.hpp"
#include "capsdense/parallel.hpp"
#include "capsdense/presets.hpp"
#include "capsdense/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace capsdense {
namespace {

struct Opts {
  std::string preset;
  std::string model_path;
  std::string data_dir;
  std::string dataset;
  std::string out_dir;
  std::string checkpoint;
  std::string split = "test";
  int epochs = -1;
  int batch_size = -1;
  int routing_iters = -1;
  int threads = 1;
  long long seed = -1;
  double lr = -1.0;
  double decay = -1.0;
  double recon_mult = -1.0;
  int head_isolation = -1;  // -1 keep, 0 off, 1 on
  bool json = false;
  // gradcheck
  std::string scale = "ops";
  std::string precision = "double";
  bool inject_backward_fault = false;
  // perturb
  double delta = 0.2;
  int sample = 0;
  int target_class = -1;
};

std::string data_dir_of(const Opts& o) {
  if (!o.data_dir.empty()) return o.data_dir;
  if (const char* env = std::getenv("CAPSDENSE_DATA")) return env;
  return "";
}

// Model + training configuration come either from a preset or a JSON spec
// file; command-line flags override individual fields afterwards.
struct Resolved {
  std::string source;  // preset name or spec path
  ModelSpec spec;
  TrainConfig train;
  std::string dataset;  // "" when nothing sensible can be inferred
};

Resolved resolve_run(const Opts& o) {
  if (o.preset.empty() == o.model_path.empty())
    throw ConfigError("exactly one of --preset or --model is required");
  Resolved r;
  if (!o.preset.empty()) {
    PresetBundle b = build_preset(o.preset);
    r.source = b.name;
    r.spec = b.spec;
    r.train = b.train;
    r.dataset = b.dataset;
  } else {
    r.source = o.model_path;
    r.spec = load_model_spec(o.model_path);
    r.train = TrainConfig{};
  }
  if (!o.dataset.empty()) r.dataset = o.dataset;
  if (o.routing_iters > 0) r.spec.routing_iters = o.routing_iters;
  if (o.head_isolation >= 0) r.spec.head_isolation = o.head_isolation != 0;
  if (o.epochs > 0) r.train.epochs = o.epochs;
  if (o.batch_size > 0) r.train.batch_size = o.batch_size;
  if (o.lr > 0) r.train.lr = o.lr;
  if (o.decay > 0) r.train.lr_decay = o.decay;
  if (o.recon_mult >= 0) r.train.recon_multiplier = o.recon_mult;
  if (o.seed >= 0) r.train.seed = static_cast<uint64_t>(o.seed);
  r.spec = resolved(r.spec);
  r.spec.validate();
  return r;
}

std::string infer_dataset(const ModelSpec& s) {
  if (s.in_channels == 1 && s.in_h == 16 && s.in_w == 16 && s.num_classes == 4)
    return "synth";
  if (s.in_channels == 1 && s.in_h == 28 && s.in_w == 28) return "mnist";
  if (s.in_channels == 3 && s.in_h == 32 && s.in_w == 32) return "cifar10";
  return "";
}

void require_file(const std::string& path) {
  if (!fs::exists(path))
    throw FormatError("required data file not found: " + path);
}

Dataset noise_dataset(const ModelSpec& s, int64_t n, uint64_t seed,
                      const std::string& name) {
  Dataset d;
  d.name = name;
  d.num_classes = s.num_classes;
  d.images = Tensor({n, s.in_channels, s.in_h, s.in_w});
  Rng rng(seed);
  float* p = d.images.data();
  for (int64_t i = 0; i < d.images.numel(); ++i)
    p[i] = static_cast<float>(rng.uniform());
  d.labels.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    d.labels[static_cast<size_t>(i)] = static_cast<int>(i % s.num_classes);
  return d;
}

struct DataPair {
  Dataset train;
  Dataset test;
};

DataPair load_data(const std::string& dataset, const ModelSpec& spec,
                   const Opts& o) {
  const std::string dir = data_dir_of(o);
  DataPair d;
  if (dataset == "synth") {
    d.train = synth_shapes(2048, 0xC0FFEEull);
    d.test = synth_shapes(512, 0xD15EA5Eull);
  } else if (dataset == "noise") {
    d.train = noise_dataset(spec, 512, 11, "noise-train");
    d.test = noise_dataset(spec, 128, 12, "noise-test");
  } else if (dataset == "mnist") {
    if (dir.empty())
      throw ConfigError(
          "mnist needs --data-dir (or CAPSDENSE_DATA) pointing at the idx "
          "files");
    const std::string ti = dir + "/train-images-idx3-ubyte";
    const std::string tl = dir + "/train-labels-idx1-ubyte";
    const std::string ei = dir + "/t10k-images-idx3-ubyte";
    const std::string el = dir + "/t10k-labels-idx1-ubyte";
    require_file(ti);
    require_file(tl);
    require_file(ei);
    require_file(el);
    d.train = load_idx(ti, tl);
    d.train.name = "mnist-train";
    d.test = load_idx(ei, el);
    d.test.name = "mnist-test";
  } else if (dataset == "cifar10") {
    if (dir.empty())
      throw ConfigError(
          "cifar10 needs --data-dir (or CAPSDENSE_DATA) pointing at the "
          "binary batches");
    std::vector<std::string> train_bins;
    for (int i = 1; i <= 5; ++i) {
      std::string p = dir + "/data_batch_" + std::to_string(i) + ".bin";
      require_file(p);
      train_bins.push_back(p);
    }
    const std::string eb = dir + "/test_batch.bin";
    require_file(eb);
    d.train = load_cifar10_bin(train_bins);
    d.train.name = "cifar10-train";
    d.test = load_cifar10_bin({eb});
    d.test.name = "cifar10-test";
  } else if (dataset.empty()) {
    throw ConfigError(
        "cannot infer a dataset for this model input; pass --dataset "
        "(synth|noise|mnist|cifar10)");
  } else {
    throw ConfigError("no bundled loader for dataset '" + dataset +
                      "' (available: synth, noise, mnist, cifar10)");
  }
  return d;
}

void check_data_matches(const Dataset& ds, const ModelSpec& spec) {
  const auto& sh = ds.images.shape();
  if (sh[1] != spec.in_channels || sh[2] != spec.in_h || sh[3] != spec.in_w)
    throw ConfigError("dataset '" + ds.name + "' provides " +
                      std::to_string(sh[1]) + "x" + std::to_string(sh[2]) +
                      "x" + std::to_string(sh[3]) + " images but the model expects " +
                      std::to_string(spec.in_channels) + "x" +
                      std::to_string(spec.in_h) + "x" + std::to_string(spec.in_w));
  if (ds.num_classes != spec.num_classes)
    throw ConfigError("dataset '" + ds.name + "' has " +
                      std::to_string(ds.num_classes) +
                      " classes but the model expects " +
                      std::to_string(spec.num_classes));
}

ordered_json metrics_json(const EpochMetrics& m) {
  ordered_json j;
  j["epoch"] = m.epoch;
  j["lr"] = m.lr;
  j["margin_loss"] = m.margin_loss;
  j["recon_loss"] = m.recon_loss;
  j["total_loss"] = m.total_loss;
  j["train_acc"] = m.train_acc;
  j["test_acc"] = m.test_acc;
  j["seconds"] = m.seconds;
  if (!m.head_margins.empty()) j["head_margins"] = m.head_margins;
  return j;
}

int cmd_train(const Opts& o) {
  par::set_num_threads(o.threads);
  Resolved r = resolve_run(o);
  std::string dataset = r.dataset.empty() ? infer_dataset(r.spec) : r.dataset;
  DataPair data = load_data(dataset, r.spec, o);
  check_data_matches(data.train, r.spec);
  check_data_matches(data.test, r.spec);

  Model model(r.spec, r.train.seed);
  std::printf("model %s: %" PRId64 " parameters, data %s (%" PRId64
              " train / %" PRId64 " test)\n",
              to_string(model.spec().kind), param_count(model.spec()),
              dataset.c_str(), data.train.size(), data.test.size());

  AdamState adam;
  int start_epoch = 0;
  if (!o.checkpoint.empty()) {
    TrainingState st =
        load_training_state(o.checkpoint, model.params(), &adam);
    start_epoch = st.next_epoch;
    std::printf("resumed from %s at epoch %d\n", o.checkpoint.c_str(),
                start_epoch);
  }

  const std::string out = o.out_dir.empty() ? "capsdense-run" : o.out_dir;
  FitResult res =
      fit(model, data.train, data.test, r.train, out, start_epoch,
          start_epoch > 0 ? &adam : nullptr, [&](const EpochMetrics& m) {
            std::printf("epoch %2d  lr %.6g  loss %.5f  train %.4f  test "
                        "%.4f  (%.1fs)\n",
                        m.epoch, m.lr, m.total_loss, m.train_acc, m.test_acc,
                        m.seconds);
            std::fflush(stdout);
          });

  save_model_spec(out + "/model_spec.json", model.spec());
  ordered_json summary;
  summary["source"] = r.source;
  summary["kind"] = to_string(model.spec().kind);
  summary["dataset"] = dataset;
  summary["param_count"] = param_count(model.spec());
  summary["seed"] = r.train.seed;
  summary["epochs"] = ordered_json::array();
  for (const auto& m : res.epochs) summary["epochs"].push_back(metrics_json(m));
  summary["best_test_acc"] = res.best_test_acc;
  summary["best_epoch"] = res.best_epoch;
  std::ofstream(out + "/summary.json") << summary.dump(2) << "\n";

  std::printf("best test accuracy %.4f at epoch %d; artifacts in %s\n",
              res.best_test_acc, res.best_epoch, out.c_str());
  return 0;
}

int cmd_eval(const Opts& o) {
  par::set_num_threads(o.threads);
  if (o.checkpoint.empty()) throw ConfigError("eval requires --checkpoint");
  Resolved r = resolve_run(o);
  std::string dataset = r.dataset.empty() ? infer_dataset(r.spec) : r.dataset;
  DataPair data = load_data(dataset, r.spec, o);
  const Dataset& ds = o.split == "train" ? data.train : data.test;
  check_data_matches(ds, r.spec);

  Model model(r.spec, r.train.seed);
  load_training_state(o.checkpoint, model.params(), nullptr);
  if (o.batch_size > 0) r.train.batch_size = o.batch_size;
  EvalSummary ev = evaluate(model, ds, r.train);
  if (o.json) {
    ordered_json j;
    j["dataset"] = ds.name;
    j["samples"] = ds.size();
    j["accuracy"] = ev.accuracy;
    j["margin_loss"] = ev.margin_loss;
    j["per_class_acc"] = ev.per_class_acc;
    std::printf("%s\n", j.dump(2).c_str());
  } else {
    std::printf("%s: accuracy %.4f  margin loss %.5f  (%" PRId64
                " samples)\n",
                ds.name.c_str(), ev.accuracy, ev.margin_loss, ds.size());
    for (size_t k = 0; k < ev.per_class_acc.size(); ++k)
      std::printf("  class %zu: %.4f\n", k, ev.per_class_acc[k]);
  }
  return 0;
}

int cmd_params(const Opts& o) {
  Resolved r = resolve_run(o);
  auto groups = param_breakdown(r.spec);
  int64_t total = 0;
  for (const auto& g : groups) total += g.second;
  if (o.json) {
    ordered_json j;
    j["source"] = r.source;
    j["kind"] = to_string(r.spec.kind);
    ordered_json gj;
    for (const auto& g : groups) gj[g.first] = g.second;
    j["groups"] = gj;
    j["total"] = total;
    std::printf("%s\n", j.dump(2).c_str());
  } else {
    std::printf("%s (%s)\n", r.source.c_str(),
                to_string(r.spec.kind));
    for (const auto& g : groups)
      std::printf("  %-12s %10" PRId64 "\n", g.first.c_str(), g.second);
    std::printf("  %-12s %10" PRId64 "\n", "total", total);
  }
  return 0;
}

int cmd_gradcheck(const Opts& o) {
  par::set_num_threads(o.threads);
  if (o.inject_backward_fault) testhook::corrupt_relu_backward.store(true);
  int failures = 0;
  if (o.scale == "ops") {
    for (const auto& c : op_grad_cases()) {
      double err = c.run();
      bool ok = err <= c.tolerance;
      failures += ok ? 0 : 1;
      std::printf("%-28s max rel err %.3e  tol %.0e  %s\n", c.name.c_str(),
                  err, c.tolerance, ok ? "ok" : "FAIL");
    }
  } else if (o.scale == "model") {
    uint64_t seed = o.seed >= 0 ? static_cast<uint64_t>(o.seed) : 22;
    double err, tol;
    if (o.precision == "float") {
      err = tiny_model_grad_check_f32(seed);
      tol = 1e-2;
    } else if (o.precision == "double") {
      err = tiny_model_grad_check_f64(seed);
      tol = 1e-3;
    } else {
      throw ConfigError("--precision must be float or double");
    }
    bool ok = err <= tol;
    failures += ok ? 0 : 1;
    std::printf("tiny-model-%s %s max rel err %.3e  tol %.0e  %s\n",
                o.precision.c_str(),
                o.precision == "float" ? "(64-bit oracle) " : "               ",
                err, tol, ok ? "ok" : "FAIL");
  } else {
    throw ConfigError("--scale must be ops or model");
  }
  testhook::corrupt_relu_backward.store(false);
  if (failures) {
    std::fprintf(stderr, "gradcheck: %d case(s) exceeded tolerance\n",
                 failures);
    return 3;
  }
  std::printf("gradcheck: all cases within tolerance\n");
  return 0;
}

int cmd_perturb(const Opts& o) {
  par::set_num_threads(o.threads);
  if (o.checkpoint.empty()) throw ConfigError("perturb requires --checkpoint");
  Resolved r = resolve_run(o);
  std::string dataset = r.dataset.empty() ? infer_dataset(r.spec) : r.dataset;
  DataPair data = load_data(dataset, r.spec, o);
  const Dataset& ds = o.split == "train" ? data.train : data.test;
  check_data_matches(ds, r.spec);
  if (o.sample < 0 || o.sample >= ds.size())
    throw ConfigError("--sample out of range (dataset has " +
                      std::to_string(ds.size()) + " samples)");

  Model model(r.spec, r.train.seed);
  load_training_state(o.checkpoint, model.params(), nullptr);
  if (!model.spec().with_decoder)
    throw ConfigError("perturb needs a model with a decoder");

  Dataset one = subset(ds, o.sample, 1);
  Tensor caps;
  int predicted;
  {
    Tape tape;  // discarded; forward only
    Tape::NoGrad ng;
    Forward fwd = model.forward(one.images);
    caps = fwd.class_caps;
    predicted = fwd.predicted.empty() ? -1 : fwd.predicted[0];
  }
  int cls = o.target_class >= 0 ? o.target_class : predicted;
  if (cls < 0 || cls >= r.spec.num_classes)
    throw ConfigError("--class out of range");

  const std::string out = o.out_dir.empty() ? "perturb-out" : o.out_dir;
  fs::create_directories(out);
  const int64_t dim = model.spec().total_class_dim();
  const int64_t hh = model.spec().decoder.out_h;
  const int64_t ww = model.spec().decoder.out_w;
  auto save_channel0 = [&](const Tensor& px, const std::string& path) {
    // reconstructions are [1, C*H*W]; write the first channel
    write_pgm(path, ww, hh, px.data());
  };

  ordered_json index;
  index["dataset"] = ds.name;
  index["sample"] = o.sample;
  index["label"] = one.labels[0];
  index["predicted"] = predicted;
  index["class"] = cls;
  index["delta"] = o.delta;
  index["capsule_dim"] = dim;
  ordered_json files = ordered_json::array();

  Tensor base = model.perturb_digitcaps(caps, 0, cls, 0, 0.0f);
  save_channel0(base, out + "/baseline.pgm");
  files.push_back("baseline.pgm");
  for (int64_t d = 0; d < dim; ++d) {
    Tensor img = model.perturb_digitcaps(caps, 0, cls, d,
                                         static_cast<float>(o.delta));
    char name[32];
    std::snprintf(name, sizeof name, "dim_%03d.pgm", static_cast<int>(d));
    save_channel0(img, out + "/" + name);
    files.push_back(name);
  }
  index["files"] = files;
  std::ofstream(out + "/index.json") << index.dump(2) << "\n";
  std::printf("wrote %zu images (%" PRId64
              " capsule dimensions + baseline) to %s\n",
              static_cast<size_t>(dim + 1), dim, out.c_str());
  return 0;
}

void add_model_flags(CLI::App* c, Opts& o) {
  c->add_option("--preset", o.preset, "named model+training preset");
  c->add_option("--model", o.model_path, "model spec JSON file");
  c->add_option("--dataset", o.dataset,
                "data source: synth, noise, mnist, cifar10");
  c->add_option("--data-dir", o.data_dir,
                "directory with raw data files (default: $CAPSDENSE_DATA)");
  c->add_option("--routing-iters", o.routing_iters,
                "override routing iterations");
  c->add_option("--head-isolation", o.head_isolation,
                "0/1: stop gradients between capsule levels");
  c->add_option("--threads", o.threads, "worker threads (default 1)");
  c->add_option("--seed", o.seed, "seed override");
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("capsdense");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

int run_cli(int argc, const char* const* argv) {
  Opts o;
  CLI::App app{"capsule network training and inspection tool"};
  app.require_subcommand(1);

  CLI::App* train = app.add_subcommand("train", "train a model");
  add_model_flags(train, o);
  train->add_option("--epochs", o.epochs, "override epoch count");
  train->add_option("--batch-size", o.batch_size, "override batch size");
  train->add_option("--lr", o.lr, "override initial learning rate");
  train->add_option("--decay", o.decay, "override per-epoch lr decay");
  train->add_option("--recon-mult", o.recon_mult,
                    "override reconstruction loss multiplier");
  train->add_option("--out", o.out_dir, "output directory");
  train->add_option("--checkpoint", o.checkpoint,
                    "resume from a training checkpoint");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_model_flags(ev, o);
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint to load")
      ->required();
  ev->add_option("--batch-size", o.batch_size, "evaluation batch size");
  ev->add_option("--split", o.split, "train or test (default test)");
  ev->add_flag("--json", o.json, "machine-readable output");

  CLI::App* pa = app.add_subcommand("params", "print the parameter budget");
  add_model_flags(pa, o);
  pa->add_flag("--json", o.json, "machine-readable output");

  CLI::App* gc =
      app.add_subcommand("gradcheck", "compare gradients against finite differences");
  gc->add_option("--scale", o.scale, "ops (per-op registry) or model (end-to-end)");
  gc->add_option("--precision", o.precision,
                 "model scale only: float or double");
  gc->add_option("--seed", o.seed, "seed override");
  gc->add_option("--threads", o.threads, "worker threads");
  gc->add_flag("--inject-backward-fault", o.inject_backward_fault,
               "corrupt one backward rule to prove the check catches it")
      ->group("");  // hidden

  CLI::App* pe = app.add_subcommand(
      "perturb", "sweep one class capsule dimension and dump reconstructions");
  add_model_flags(pe, o);
  pe->add_option("--checkpoint", o.checkpoint, "checkpoint to load")
      ->required();
  pe->add_option("--delta", o.delta, "perturbation step (default 0.2)");
  pe->add_option("--sample", o.sample, "dataset sample index (default 0)");
  pe->add_option("--class", o.target_class,
                 "class capsule to decode (default: predicted)");
  pe->add_option("--split", o.split, "train or test (default test)");
  pe->add_option("--out", o.out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (train->parsed()) return cmd_train(o);
    if (ev->parsed()) return cmd_eval(o);
    if (pa->parsed()) return cmd_params(o);
    if (gc->parsed()) return cmd_gradcheck(o);
    if (pe->parsed()) return cmd_perturb(o);
    return 1;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IntegrityError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace capsdense
