#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "capsdense/capsule.hpp"
#include "capsdense/decoder.hpp"
#include "capsdense/dense_block.hpp"
#include "capsdense/params.hpp"

namespace capsdense {

enum class ModelKind {
  baseline_capsnet,    // conv, primary caps, routed class caps
  capsnet_variant,     // adds one same-padded conv stem before the baseline
  dcnet,               // dense block (input concatenated), primary caps
  dcnet_variant_one,   // shallow dense block: 3 layers of growth 8
  dcnet_variant_two,   // plain conv chain, no concatenation (valid padding)
  dcnet_variant_three, // dense block but primary caps see only the last layer
  dcnet_plus_plus,     // stacked dense-caps levels with separate routing heads
};

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::baseline_capsnet: return "baseline-capsnet";
    case ModelKind::capsnet_variant: return "capsnet-variant";
    case ModelKind::dcnet: return "dcnet";
    case ModelKind::dcnet_variant_one: return "dcnet-variant-one";
    case ModelKind::dcnet_variant_two: return "dcnet-variant-two";
    case ModelKind::dcnet_variant_three: return "dcnet-variant-three";
    case ModelKind::dcnet_plus_plus: return "dcnet-plus-plus";
  }
  throw ContractError("unknown model kind");
}

inline ModelKind model_kind_from_string(const std::string& s) {
  for (ModelKind k :
       {ModelKind::baseline_capsnet, ModelKind::capsnet_variant, ModelKind::dcnet,
        ModelKind::dcnet_variant_one, ModelKind::dcnet_variant_two,
        ModelKind::dcnet_variant_three, ModelKind::dcnet_plus_plus})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown model kind '" + s + "'");
}

// Conv layer producing channels*dim maps that regroup into dim-D capsules.
struct PrimaryCapsSpec {
  int channels = 32;
  int dim = 8;
  int kernel = 9;
  int stride = 2;
  Pad padding = Pad::valid;

  int conv_maps() const { return channels * dim; }

  void validate() const {
    if (channels < 1 || dim < 1 || kernel < 1 || stride < 1)
      throw ConfigError("primary caps extents must be positive");
  }
};

// One level of the stacked model: a dense block, a primary-caps conv, and
// the width of this level's routed class capsule.
struct LevelSpec {
  DenseBlockSpec dense;
  PrimaryCapsSpec primary;
  int head_dim = 12;
};

struct ModelSpec {
  ModelKind kind = ModelKind::dcnet;
  int in_channels = 1;
  int in_h = 28;
  int in_w = 28;
  int num_classes = 10;
  int routing_iters = 3;

  // Single-trunk family.
  int stem_maps = 256;  // conv widths for the two capsnet kinds
  DenseBlockSpec dense;
  PrimaryCapsSpec primary;
  int class_dim = 16;

  // Stacked family.
  std::vector<LevelSpec> levels;
  int merged_dim = 18;
  bool head_isolation = true;

  bool with_decoder = true;
  DecoderSpec decoder;

  bool is_stacked() const { return kind == ModelKind::dcnet_plus_plus; }

  int total_class_dim() const {
    if (!is_stacked()) return class_dim;
    int d = merged_dim;
    for (const auto& l : levels) d += l.head_dim;
    return d;
  }

  void validate() const {
    if (in_channels < 1 || in_h < 1 || in_w < 1) throw ConfigError("input extents must be positive");
    if (num_classes < 2) throw ConfigError("need at least 2 classes");
    if (routing_iters < 1) throw ConfigError("routing iterations must be >= 1");
    if (is_stacked()) {
      if (levels.empty()) throw ConfigError("stacked model needs at least one level");
      if (merged_dim < 1) throw ConfigError("merged head dim must be positive");
      for (const auto& l : levels) {
        l.dense.validate();
        l.primary.validate();
        if (l.head_dim < 1) throw ConfigError("level head dim must be positive");
      }
    } else {
      if (class_dim < 1) throw ConfigError("class capsule dim must be positive");
      primary.validate();
      if (kind != ModelKind::baseline_capsnet && kind != ModelKind::capsnet_variant)
        dense.validate();
      else if (stem_maps < 1)
        throw ConfigError("stem conv width must be positive");
    }
  }
};

inline int conv_out_extent(int in, int k, int stride, Pad pad, const std::string& what) {
  if (pad == Pad::same) return (in + stride - 1) / stride;
  if (in < k)
    throw ConfigError(what + ": spatial extent " + std::to_string(in) +
                      " is smaller than the kernel " + std::to_string(k));
  return (in - k) / stride + 1;
}

// Shapes at the capsule boundary of one trunk (or one stacked level).
struct TrunkGeometry {
  int feat_channels, feat_h, feat_w;  // features entering the primary-caps conv
  int grid_h, grid_w;                 // spatial grid of primary capsules
  int64_t num_caps;                   // channels * grid_h * grid_w
};

inline TrunkGeometry primary_geometry(const PrimaryCapsSpec& p, int feat_channels, int h, int w,
                                      const std::string& what) {
  TrunkGeometry g;
  g.feat_channels = feat_channels;
  g.feat_h = h;
  g.feat_w = w;
  g.grid_h = conv_out_extent(h, p.kernel, p.stride, p.padding, what);
  g.grid_w = conv_out_extent(w, p.kernel, p.stride, p.padding, what);
  g.num_caps = static_cast<int64_t>(p.channels) * g.grid_h * g.grid_w;
  return g;
}

inline TrunkGeometry trunk_geometry(const ModelSpec& s) {
  if (s.is_stacked()) throw ContractError("trunk_geometry: stacked models have per-level geometry");
  int h = s.in_h, w = s.in_w, c = s.in_channels;
  switch (s.kind) {
    case ModelKind::baseline_capsnet:
      h = conv_out_extent(h, 9, 1, Pad::valid, "stem conv");
      w = conv_out_extent(w, 9, 1, Pad::valid, "stem conv");
      c = s.stem_maps;
      break;
    case ModelKind::capsnet_variant:
      // conv0 is same-padded stride 1, so only conv1 shrinks the map.
      h = conv_out_extent(h, 9, 1, Pad::valid, "stem conv");
      w = conv_out_extent(w, 9, 1, Pad::valid, "stem conv");
      c = s.stem_maps;
      break;
    case ModelKind::dcnet:
    case ModelKind::dcnet_variant_one:
      c = dense_block_out_channels(s.dense, s.in_channels);
      break;
    case ModelKind::dcnet_variant_three:
      c = s.dense.growth;
      break;
    case ModelKind::dcnet_variant_two:
      for (int l = 0; l < s.dense.layers; ++l) {
        h = conv_out_extent(h, s.dense.kernel, 1, Pad::valid, "conv chain");
        w = conv_out_extent(w, s.dense.kernel, 1, Pad::valid, "conv chain");
      }
      c = s.dense.growth;
      break;
    default:
      throw ContractError("trunk_geometry: unhandled kind");
  }
  return primary_geometry(s.primary, c, h, w, "primary caps conv");
}

inline std::vector<TrunkGeometry> level_geometries(const ModelSpec& s) {
  if (!s.is_stacked()) throw ContractError("level_geometries: only stacked models have levels");
  std::vector<TrunkGeometry> out;
  int h = s.in_h, w = s.in_w, c = s.in_channels;
  for (size_t l = 0; l < s.levels.size(); ++l) {
    const auto& lv = s.levels[l];
    const int feat_c = dense_block_out_channels(lv.dense, c);
    out.push_back(primary_geometry(lv.primary, feat_c, h, w,
                                   "level " + std::to_string(l) + " primary caps conv"));
    // Next level consumes this level's primary conv maps (pre-squash).
    h = out.back().grid_h;
    w = out.back().grid_w;
    c = lv.primary.conv_maps();
  }
  return out;
}

// Fills the derived decoder fields: the output image always matches the
// model input (one channel only for the stacked model, which reconstructs
// the first input channel), the layout follows the trunk family, and
// unset widths follow the side-length rule.
inline ModelSpec resolved(ModelSpec s) {
  s.decoder.out_h = s.in_h;
  s.decoder.out_w = s.in_w;
  s.decoder.out_channels = s.is_stacked() ? 1 : s.in_channels;
  s.decoder.kind = (s.kind == ModelKind::baseline_capsnet || s.kind == ModelKind::capsnet_variant)
                       ? DecoderSpec::Kind::baseline
                       : DecoderSpec::Kind::dense;
  if (s.decoder.w1 <= 0 || s.decoder.w2 <= 0) {
    auto [w1, w2] = decoder_widths_for(s.decoder.out_h, s.decoder.out_w);
    s.decoder.w1 = w1;
    s.decoder.w2 = w2;
  }
  return s;
}

// Closed-form parameter counts by component group, independent of the
// parameter store (tests check the built store agrees exactly).
inline std::vector<std::pair<std::string, int64_t>> param_breakdown(const ModelSpec& raw) {
  const ModelSpec s = resolved(raw);
  s.validate();
  std::vector<std::pair<std::string, int64_t>> out;
  auto conv_params = [](int64_t maps, int64_t cin, int64_t k) { return maps * cin * k * k + maps; };
  if (!s.is_stacked()) {
    const TrunkGeometry g = trunk_geometry(s);
    switch (s.kind) {
      case ModelKind::baseline_capsnet:
        out.emplace_back("conv1", conv_params(s.stem_maps, s.in_channels, 9));
        break;
      case ModelKind::capsnet_variant:
        out.emplace_back("conv0", conv_params(s.stem_maps, s.in_channels, 9));
        out.emplace_back("conv1", conv_params(s.stem_maps, s.stem_maps, 9));
        break;
      case ModelKind::dcnet_variant_two: {
        int64_t chain = 0;
        for (int l = 0; l < s.dense.layers; ++l)
          chain += conv_params(s.dense.growth, l == 0 ? s.in_channels : s.dense.growth,
                               s.dense.kernel);
        out.emplace_back("dense", chain);
        break;
      }
      default:
        out.emplace_back("dense", dense_block_param_count(s.dense, s.in_channels));
        break;
    }
    out.emplace_back("primary",
                     conv_params(s.primary.conv_maps(), g.feat_channels, s.primary.kernel));
    out.emplace_back("digitcaps", g.num_caps * s.num_classes * s.primary.dim * s.class_dim);
    if (s.with_decoder)
      out.emplace_back("decoder",
                       decoder_param_count(s.decoder, s.num_classes * s.total_class_dim()));
    return out;
  }
  const auto geos = level_geometries(s);
  int in_c = s.in_channels;
  int64_t total_caps = 0;
  for (size_t l = 0; l < s.levels.size(); ++l) {
    const auto& lv = s.levels[l];
    int64_t n = dense_block_param_count(lv.dense, in_c);
    n += conv_params(lv.primary.conv_maps(), geos[l].feat_channels, lv.primary.kernel);
    n += geos[l].num_caps * s.num_classes * lv.primary.dim * lv.head_dim;  // level head
    out.emplace_back("level" + std::to_string(l), n);
    total_caps += geos[l].num_caps;
    in_c = lv.primary.conv_maps();
  }
  out.emplace_back("merged",
                   total_caps * s.num_classes * s.levels[0].primary.dim * s.merged_dim);
  if (s.with_decoder)
    out.emplace_back("decoder",
                     decoder_param_count(s.decoder, s.num_classes * s.total_class_dim()));
  return out;
}

inline int64_t param_count(const ModelSpec& s) {
  int64_t n = 0;
  for (const auto& [group, c] : param_breakdown(s)) n += c;
  return n;
}

template <typename T>
struct HeadOutT {
  std::string name;
  TensorT<T> caps;   // [B,K,head_dim]
  TensorT<T> norms;  // [B,K]
  RoutingStateT<T> routing;
};

template <typename T>
struct ForwardT {
  std::vector<HeadOutT<T>> heads;
  TensorT<T> class_caps;      // [B,K,total_class_dim]
  TensorT<T> class_norms;     // [B,K]
  TensorT<T> reconstruction;  // [B,pixels]; undefined when the decoder is off
  std::vector<int> predicted;
};

using Forward = ForwardT<float>;

template <typename T>
class ModelT {
 public:
  ModelT(const ModelSpec& spec, uint64_t seed) : spec_(resolved(spec)) {
    spec_.validate();
    Rng rng = Rng(seed).split();
    build(rng);
  }

  const ModelSpec& spec() const { return spec_; }
  ParamStoreT<T>& params() { return params_; }
  const ParamStoreT<T>& params() const { return params_; }

  // mask_onehot selects the capsule fed to the decoder (the label during
  // training). Pass nullptr to mask by the predicted class.
  ForwardT<T> forward(const TensorT<T>& x, const TensorT<T>* mask_onehot = nullptr) {
    check_input(x);
    ForwardT<T> out;
    if (!spec_.is_stacked()) {
      TensorT<T> u = single_trunk_caps(x);
      auto& head = out.heads.emplace_back();
      head.name = "digitcaps";
      auto [v, st] = route(predict(u, params_.at("digitcaps.W")), spec_.routing_iters);
      head.caps = v;
      head.norms = capsule_logits(v);
      head.routing = st;
      out.class_caps = v;
      out.class_norms = head.norms;
    } else {
      TensorT<T> level_in = x;
      std::vector<TensorT<T>> level_caps;
      for (size_t l = 0; l < spec_.levels.size(); ++l) {
        const auto& lv = spec_.levels[l];
        const std::string prefix = "level" + std::to_string(l);
        auto block = dense_block_forward(level_in, lv.dense, params_, prefix + ".dense");
        auto pre = conv2d(block.all, params_.at(prefix + ".primary.kernel"),
                          params_.at(prefix + ".primary.bias"), lv.primary.stride,
                          lv.primary.padding);
        level_caps.push_back(squash(caps_from_conv(pre, lv.primary.dim)));
        if (l + 1 < spec_.levels.size())
          level_in = spec_.head_isolation ? stop_grad(pre) : pre;
      }
      std::vector<TensorT<T>> head_caps;
      for (size_t l = 0; l < spec_.levels.size(); ++l) {
        const std::string prefix = "level" + std::to_string(l);
        auto& head = out.heads.emplace_back();
        head.name = prefix;
        auto [v, st] = route(predict(level_caps[l], params_.at(prefix + ".head.W")),
                             spec_.routing_iters);
        head.caps = v;
        head.norms = capsule_logits(v);
        head.routing = st;
        head_caps.push_back(v);
      }
      {
        auto& head = out.heads.emplace_back();
        head.name = "merged";
        auto all_caps = concat(level_caps, 1);
        auto [v, st] = route(predict(all_caps, params_.at("merged.W")), spec_.routing_iters);
        head.caps = v;
        head.norms = capsule_logits(v);
        head.routing = st;
        head_caps.push_back(v);
      }
      out.class_caps = concat(head_caps, 2);
      out.class_norms = capsule_logits(out.class_caps);
    }
    out.predicted = predict_classes(out.class_norms);
    if (spec_.with_decoder) {
      TensorT<T> mask;
      if (mask_onehot) {
        check_same_shape("forward mask", out.class_norms, *mask_onehot);
        mask = *mask_onehot;
      } else {
        typename TapeT<T>::NoGrad ng;
        mask = one_hot<T>(out.predicted, spec_.num_classes);
      }
      auto masked = mul_broadcast_last(out.class_caps, mask);
      auto flat = reshape(masked, {x.dim(0),
                                   static_cast<int64_t>(spec_.num_classes) *
                                       spec_.total_class_dim()});
      out.reconstruction = decode(flat, spec_.decoder, params_, "decoder");
    }
    return out;
  }

  // Decodes one sample's class capsule with one coordinate shifted by
  // delta. caps is a [B,K,D] forward output; the result is [pixels].
  TensorT<T> perturb_digitcaps(const TensorT<T>& caps, int sample, int cls, int dim, T delta) {
    if (!spec_.with_decoder) throw ConfigError("perturb_digitcaps: model has no decoder");
    const int64_t K = spec_.num_classes, D = spec_.total_class_dim();
    if (caps.rank() != 3 || caps.dim(1) != K || caps.dim(2) != D)
      throw DimensionError("perturb_digitcaps: expected [B," + std::to_string(K) + "," +
                           std::to_string(D) + "], got " + shape_str(caps.shape()));
    if (sample < 0 || sample >= caps.dim(0))
      throw ContractError("perturb_digitcaps: sample index out of range");
    if (cls < 0 || cls >= K) throw ContractError("perturb_digitcaps: class index out of range");
    if (dim < 0 || dim >= D) throw ContractError("perturb_digitcaps: dim index out of range");
    typename TapeT<T>::NoGrad ng;
    TensorT<T> flat({1, K * D}, T(0));
    // The mask keeps only `cls`, so the perturbed row is all the decoder sees.
    for (int64_t t = 0; t < D; ++t) flat.data()[cls * D + t] = caps.at({sample, cls, t});
    flat.data()[cls * D + dim] += delta;
    return decode(flat, spec_.decoder, params_, "decoder");
  }

 private:
  void check_input(const TensorT<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.in_h ||
        x.dim(3) != spec_.in_w)
      throw DimensionError("forward: input must be [B," + std::to_string(spec_.in_channels) + "," +
                           std::to_string(spec_.in_h) + "," + std::to_string(spec_.in_w) +
                           "], got " + shape_str(x.shape()));
  }

  // Trunk of every non-stacked kind, up to squashed primary capsules [B,I,d].
  TensorT<T> single_trunk_caps(const TensorT<T>& x) {
    TensorT<T> feats;
    switch (spec_.kind) {
      case ModelKind::baseline_capsnet:
        feats = relu(conv2d(x, params_.at("conv1.kernel"), params_.at("conv1.bias"), 1,
                            Pad::valid));
        break;
      case ModelKind::capsnet_variant: {
        auto stem = relu(conv2d(x, params_.at("conv0.kernel"), params_.at("conv0.bias"), 1,
                                Pad::same));
        feats = relu(conv2d(stem, params_.at("conv1.kernel"), params_.at("conv1.bias"), 1,
                            Pad::valid));
        break;
      }
      case ModelKind::dcnet:
      case ModelKind::dcnet_variant_one:
        feats = dense_block_forward(x, spec_.dense, params_, "dense").all;
        break;
      case ModelKind::dcnet_variant_three:
        feats = dense_block_forward(x, spec_.dense, params_, "dense").last;
        break;
      case ModelKind::dcnet_variant_two: {
        feats = x;
        for (int l = 0; l < spec_.dense.layers; ++l) {
          const std::string base = "dense.conv" + std::to_string(l);
          feats = relu(conv2d(feats, params_.at(base + ".kernel"), params_.at(base + ".bias"), 1,
                              Pad::valid));
        }
        break;
      }
      default:
        throw ContractError("single_trunk_caps: unhandled kind");
    }
    auto pre = conv2d(feats, params_.at("primary.kernel"), params_.at("primary.bias"),
                      spec_.primary.stride, spec_.primary.padding);
    return squash(caps_from_conv(pre, spec_.primary.dim));
  }

  void build(Rng& rng) {
    if (!spec_.is_stacked()) {
      const TrunkGeometry g = trunk_geometry(spec_);
      switch (spec_.kind) {
        case ModelKind::baseline_capsnet:
          params_.create("conv1.kernel", {spec_.stem_maps, spec_.in_channels, 9, 9}, rng);
          params_.create_zeros("conv1.bias", {spec_.stem_maps});
          break;
        case ModelKind::capsnet_variant:
          params_.create("conv0.kernel", {spec_.stem_maps, spec_.in_channels, 9, 9}, rng);
          params_.create_zeros("conv0.bias", {spec_.stem_maps});
          params_.create("conv1.kernel", {spec_.stem_maps, spec_.stem_maps, 9, 9}, rng);
          params_.create_zeros("conv1.bias", {spec_.stem_maps});
          break;
        case ModelKind::dcnet_variant_two:
          for (int l = 0; l < spec_.dense.layers; ++l) {
            const std::string base = "dense.conv" + std::to_string(l);
            params_.create(base + ".kernel",
                           {spec_.dense.growth, l == 0 ? spec_.in_channels : spec_.dense.growth,
                            spec_.dense.kernel, spec_.dense.kernel},
                           rng);
            params_.create_zeros(base + ".bias", {spec_.dense.growth});
          }
          break;
        default:
          dense_block_init(params_, "dense", spec_.dense, spec_.in_channels, rng);
          break;
      }
      params_.create("primary.kernel",
                     {spec_.primary.conv_maps(), g.feat_channels, spec_.primary.kernel,
                      spec_.primary.kernel},
                     rng);
      params_.create_zeros("primary.bias", {spec_.primary.conv_maps()});
      params_.create("digitcaps.W",
                     {g.num_caps, spec_.num_classes, spec_.primary.dim, spec_.class_dim}, rng);
    } else {
      const auto geos = level_geometries(spec_);
      int in_c = spec_.in_channels;
      int64_t total_caps = 0;
      for (size_t l = 0; l < spec_.levels.size(); ++l) {
        const auto& lv = spec_.levels[l];
        const std::string prefix = "level" + std::to_string(l);
        dense_block_init(params_, prefix + ".dense", lv.dense, in_c, rng);
        params_.create(prefix + ".primary.kernel",
                       {lv.primary.conv_maps(), geos[l].feat_channels, lv.primary.kernel,
                        lv.primary.kernel},
                       rng);
        params_.create_zeros(prefix + ".primary.bias", {lv.primary.conv_maps()});
        params_.create(prefix + ".head.W",
                       {geos[l].num_caps, spec_.num_classes, lv.primary.dim, lv.head_dim}, rng);
        total_caps += geos[l].num_caps;
        in_c = lv.primary.conv_maps();
      }
      params_.create("merged.W",
                     {total_caps, spec_.num_classes, spec_.levels[0].primary.dim,
                      spec_.merged_dim},
                     rng);
    }
    if (spec_.with_decoder)
      decoder_init(params_, "decoder", spec_.decoder,
                   spec_.num_classes * spec_.total_class_dim(), rng);
  }

  ModelSpec spec_;
  ParamStoreT<T> params_;
};

using Model = ModelT<float>;

}  // namespace capsdense
