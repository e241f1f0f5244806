#include "capsdense/presets.hpp"

#include <algorithm>
#include <cmath>

#include "capsdense/gradcheck.hpp"

namespace capsdense {

namespace {

PresetBundle mnist_dcnet() {
  PresetBundle p;
  p.name = "mnist-dcnet";
  p.dataset = "mnist";
  p.spec.kind = ModelKind::dcnet;
  p.spec.in_channels = 1;
  p.spec.in_h = p.spec.in_w = 28;
  p.spec.num_classes = 10;
  p.spec.dense = DenseBlockSpec{8, 32, 3, true};
  p.spec.primary = PrimaryCapsSpec{32, 8, 9, 2, Pad::valid};
  p.spec.class_dim = 16;
  p.train.epochs = 10;
  p.train.batch_size = 128;
  return p;
}

PresetBundle mnist_capsnet() {
  PresetBundle p = mnist_dcnet();
  p.name = "mnist-capsnet";
  p.spec.kind = ModelKind::baseline_capsnet;
  p.spec.stem_maps = 256;
  return p;
}

// The four ablation variants share the capsnet/dcnet scaffolding and exist
// mainly for parameter audits, but they train on MNIST like the others.
PresetBundle capsnet_variant() {
  PresetBundle p = mnist_capsnet();
  p.name = "capsnet-variant";
  p.spec.kind = ModelKind::capsnet_variant;  // extra same-padded 256-map 9x9 stem
  return p;
}

PresetBundle dcnet_variant_one() {
  PresetBundle p = mnist_dcnet();
  p.name = "dcnet-variant-one";
  p.spec.kind = ModelKind::dcnet_variant_one;
  p.spec.dense = DenseBlockSpec{3, 8, 3, true};  // three layers, eight maps each
  return p;
}

PresetBundle dcnet_variant_two() {
  PresetBundle p = mnist_dcnet();
  p.name = "dcnet-variant-two";
  p.spec.kind = ModelKind::dcnet_variant_two;  // plain conv chain, no concatenation
  return p;
}

PresetBundle dcnet_variant_three() {
  PresetBundle p = mnist_dcnet();
  p.name = "dcnet-variant-three";
  p.spec.kind = ModelKind::dcnet_variant_three;  // primary caps see only the last layer
  return p;
}

PresetBundle cifar10_dcnetpp() {
  PresetBundle p;
  p.name = "cifar10-dcnetpp";
  p.dataset = "cifar10";
  p.spec.kind = ModelKind::dcnet_plus_plus;
  p.spec.in_channels = 3;
  p.spec.in_h = p.spec.in_w = 32;
  p.spec.num_classes = 10;
  // Three levels; each later level consumes the previous level's primary
  // conv maps, so levels 1 and 2 keep their grids via same padding.
  LevelSpec base;
  base.dense = DenseBlockSpec{8, 16, 3, true};
  base.primary = PrimaryCapsSpec{12, 8, 9, 2, Pad::valid};
  base.head_dim = 12;
  LevelSpec l1 = base, l2 = base;
  l1.primary.padding = Pad::same;
  l2.primary.padding = Pad::same;
  p.spec.levels = {base, l1, l2};
  p.spec.merged_dim = 18;
  p.spec.head_isolation = true;
  p.train.epochs = 10;
  p.train.batch_size = 64;
  return p;
}

PresetBundle svhn_dcnet() {
  PresetBundle p;
  p.name = "svhn-dcnet";
  p.dataset = "svhn";
  p.spec.kind = ModelKind::dcnet;
  p.spec.in_channels = 3;
  p.spec.in_h = p.spec.in_w = 32;
  p.spec.num_classes = 10;
  p.spec.dense = DenseBlockSpec{4, 18, 3, true};
  p.spec.primary = PrimaryCapsSpec{16, 6, 9, 2, Pad::valid};
  p.spec.class_dim = 8;
  p.train.epochs = 10;
  p.train.batch_size = 128;
  return p;
}

PresetBundle tumor_dcnet() {
  PresetBundle p;
  p.name = "tumor-dcnet";
  p.dataset = "tumor";
  p.spec.kind = ModelKind::dcnet;
  p.spec.in_channels = 1;
  p.spec.in_h = p.spec.in_w = 64;
  p.spec.num_classes = 3;
  p.spec.dense = DenseBlockSpec{4, 16, 3, true};
  p.spec.primary = PrimaryCapsSpec{6, 8, 9, 2, Pad::valid};
  p.spec.class_dim = 16;
  p.train.epochs = 10;
  p.train.batch_size = 16;
  p.train.lr = 1e-4;
  return p;
}

PresetBundle synth_dcnet() {
  PresetBundle p;
  p.name = "synth-dcnet";
  p.dataset = "synth";
  p.spec.kind = ModelKind::dcnet;
  p.spec.in_channels = 1;
  p.spec.in_h = p.spec.in_w = 16;
  p.spec.num_classes = 4;
  p.spec.dense = DenseBlockSpec{4, 8, 3, true};
  p.spec.primary = PrimaryCapsSpec{8, 8, 5, 2, Pad::valid};
  p.spec.class_dim = 16;
  p.spec.decoder.w1 = 128;
  p.spec.decoder.w2 = 256;
  p.train.epochs = 15;
  p.train.batch_size = 32;
  return p;
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"mnist-dcnet",       "mnist-capsnet",     "capsnet-variant",
          "dcnet-variant-one", "dcnet-variant-two", "dcnet-variant-three",
          "cifar10-dcnetpp",   "svhn-dcnet",        "tumor-dcnet",
          "synth-dcnet"};
}

PresetBundle build_preset(const std::string& name) {
  if (name == "mnist-dcnet") return mnist_dcnet();
  if (name == "mnist-capsnet") return mnist_capsnet();
  if (name == "capsnet-variant") return capsnet_variant();
  if (name == "dcnet-variant-one") return dcnet_variant_one();
  if (name == "dcnet-variant-two") return dcnet_variant_two();
  if (name == "dcnet-variant-three") return dcnet_variant_three();
  if (name == "cifar10-dcnetpp") return cifar10_dcnetpp();
  if (name == "svhn-dcnet") return svhn_dcnet();
  if (name == "tumor-dcnet") return tumor_dcnet();
  if (name == "synth-dcnet") return synth_dcnet();
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
}

ModelSpec tiny_dcnet_spec() {
  ModelSpec s;
  s.kind = ModelKind::dcnet;
  s.in_channels = 1;
  s.in_h = s.in_w = 8;
  s.num_classes = 2;
  s.dense = DenseBlockSpec{2, 2, 3, true};
  // 5x5 stride-2 valid on the 8x8 block output -> a 2x2 grid of one 4D
  // capsule channel: exactly four primary capsules.
  s.primary = PrimaryCapsSpec{1, 4, 5, 2, Pad::valid};
  s.class_dim = 4;
  s.decoder.w1 = 4;
  s.decoder.w2 = 6;
  // One routing round: coupling refinement is untaped bookkeeping, so a
  // finite-difference probe only matches the engine gradient when the
  // couplings genuinely are constants. Multi-round gradient semantics have
  // their own test against a constant-coupling reference.
  s.routing_iters = 1;
  return s;
}

namespace {

// The training init is tuned for full-size nets; at this scale two squash
// stages contract the forward signal to ~1e-6, which leaves nothing for
// finite differences to resolve. Boost the weights so the class capsule
// norms land mid-range (clear of both margin hinges). Gradient correctness
// does not depend on the operating point.
template <typename T>
ModelT<T> tiny_model_boosted(uint64_t seed) {
  ModelT<T> m(tiny_dcnet_spec(), seed);
  for (auto& [name, t] : m.params().items()) {
    if (name.find("bias") != std::string::npos) continue;
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] *= T(12);
  }
  return m;
}

template <typename T>
TensorT<T> tiny_input(const ModelSpec& spec, uint64_t seed) {
  Rng rng(seed * 1000003ull + 17);
  TensorT<T> x({2, spec.in_channels, spec.in_h, spec.in_w});
  for (int64_t i = 0; i < x.numel(); ++i)
    x.data()[i] = static_cast<T>(rng.uniform(0.05, 0.95));
  return x;
}

// Summed head margins plus the scaled reconstruction term — the training
// objective on a fixed 2-sample batch.
template <typename T>
TensorT<T> tiny_loss(ModelT<T>& model, const TensorT<T>& x, const TensorT<T>& targets) {
  const ModelSpec& spec = model.spec();
  ForwardT<T> fwd = model.forward(x, &targets);
  TensorT<T> total;
  for (size_t h = 0; h < fwd.heads.size(); ++h) {
    TensorT<T> m = margin_loss(fwd.heads[h].norms, targets);
    total = h == 0 ? m : add(total, m);
  }
  const int64_t px = spec.decoder.out_pixels();
  TensorT<T> target_img({2, px});
  const int64_t in_px = static_cast<int64_t>(spec.in_h) * spec.in_w;
  for (int64_t i = 0; i < 2; ++i)
    std::copy(x.data() + i * spec.in_channels * in_px,
              x.data() + i * spec.in_channels * in_px + px,
              target_img.data() + i * px);
  return add(total, reconstruction_loss(fwd.reconstruction, target_img, T(0.0005)));
}

}  // namespace

double tiny_model_grad_check_f64(uint64_t seed) {
  ModelT<double> model = tiny_model_boosted<double>(seed);
  TensorT<double> x = tiny_input<double>(model.spec(), seed);
  TensorT<double> targets = one_hot<double>({0, 1}, model.spec().num_classes);
  std::vector<TensorT<double>> params;
  for (auto& [name, t] : model.params().items()) params.push_back(t);
  return finite_diff_check<double>(
      [&] { return tiny_loss(model, x, targets); }, params, 1e-4);
}

double tiny_model_grad_check_f32(uint64_t seed) {
  // Gradients under test come from the 32-bit engine...
  ModelT<float> mf = tiny_model_boosted<float>(seed);
  TensorT<float> xf = tiny_input<float>(mf.spec(), seed);
  TensorT<float> tf = one_hot<float>({0, 1}, mf.spec().num_classes);
  for (auto& [name, t] : mf.params().items()) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<float>> analytic;
  {
    TapeT<float> tape;
    TensorT<float> y = tiny_loss(mf, xf, tf);
    if (!std::isfinite(static_cast<double>(y.item())))
      throw ContractError("tiny_model_grad_check_f32: loss is non-finite");
    tape.backward(y);
    for (auto& [name, t] : mf.params().items()) {
      t.ensure_grad();
      analytic.emplace_back(t.grad(), t.grad() + t.numel());
    }
  }

  // ...while the central-difference oracle re-evaluates the same function
  // at the same parameter values in 64-bit, so the probe noise floor sits
  // far below the 32-bit roundoff being measured.
  ModelT<double> md(tiny_dcnet_spec(), seed);
  {
    auto& src = mf.params().items();
    auto& dst = md.params().items();
    for (size_t p = 0; p < src.size(); ++p)
      for (int64_t i = 0; i < src[p].second.numel(); ++i)
        dst[p].second.data()[i] = static_cast<double>(src[p].second.data()[i]);
  }
  TensorT<double> xd = xf.cast<double>();
  TensorT<double> td = tf.cast<double>();
  auto eval = [&]() -> double {
    TapeT<double>::NoGrad ng;
    const double v = tiny_loss(md, xd, td).item();
    if (!std::isfinite(v))
      throw ContractError("tiny_model_grad_check_f32: probe loss is non-finite");
    return v;
  };

  const double h = 1e-4;
  auto& pd = md.params().items();
  double worst = 0.0;
  for (size_t p = 0; p < pd.size(); ++p) {
    double* d = pd[p].second.data();
    for (int64_t i = 0; i < pd[p].second.numel(); ++i) {
      const double orig = d[i];
      d[i] = orig + h;
      const double up = eval();
      d[i] = orig - h;
      const double down = eval();
      d[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[p][static_cast<size_t>(i)]);
      const double rel =
          std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
      if (rel > worst) worst = rel;
    }
  }
  return worst;
}

}  // namespace capsdense
