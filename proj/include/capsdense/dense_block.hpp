#pragma once

#include <string>
#include <vector>

#include "capsdense/ops.hpp"
#include "capsdense/params.hpp"

namespace capsdense {

// Densely connected conv block: layer l sees the channel concatenation of
// the input and every earlier layer's output, and emits `growth` maps
// (stride-1 same-padded square convs, relu). With concat_input the block
// output is [input | all layer outputs]: C + layers*growth channels.
struct DenseBlockSpec {
  int layers = 8;
  int growth = 32;
  int kernel = 3;
  bool concat_input = true;

  void validate() const {
    if (layers < 0) throw ConfigError("dense block layer count must be >= 0");
    if (layers == 0 && !concat_input)
      throw ConfigError("an empty dense block without the input concatenated produces nothing");
    if (growth < 1) throw ConfigError("dense block growth must be positive");
    if (kernel < 1 || kernel % 2 == 0)
      throw ConfigError("dense block kernel must be odd and positive, got " +
                        std::to_string(kernel));
  }
};

// Closed form: sum_l [ k^2 * (C + (l-1)*g) * g + g ].
inline int64_t dense_block_param_count(const DenseBlockSpec& spec, int in_channels) {
  spec.validate();
  const int64_t k2 = static_cast<int64_t>(spec.kernel) * spec.kernel;
  int64_t total = 0;
  for (int l = 1; l <= spec.layers; ++l)
    total += k2 * (in_channels + static_cast<int64_t>(l - 1) * spec.growth) * spec.growth +
             spec.growth;
  return total;
}

inline int dense_block_out_channels(const DenseBlockSpec& spec, int in_channels) {
  return (spec.concat_input ? in_channels : 0) + spec.layers * spec.growth;
}

template <typename T>
void dense_block_init(ParamStoreT<T>& ps, const std::string& prefix, const DenseBlockSpec& spec,
                      int in_channels, Rng& rng) {
  spec.validate();
  for (int l = 0; l < spec.layers; ++l) {
    const int64_t cin = in_channels + static_cast<int64_t>(l) * spec.growth;
    const std::string base = prefix + ".conv" + std::to_string(l);
    ps.create(base + ".kernel", {spec.growth, cin, spec.kernel, spec.kernel}, rng);
    ps.create_zeros(base + ".bias", {spec.growth});
  }
}

template <typename T>
struct DenseBlockOut {
  TensorT<T> all;   // block output (see concat_input)
  TensorT<T> last;  // final layer's `growth` maps alone
};

template <typename T>
DenseBlockOut<T> dense_block_forward(const TensorT<T>& x, const DenseBlockSpec& spec,
                                     ParamStoreT<T>& ps, const std::string& prefix) {
  spec.validate();
  std::vector<TensorT<T>> feats{x};
  for (int l = 0; l < spec.layers; ++l) {
    const std::string base = prefix + ".conv" + std::to_string(l);
    TensorT<T> in = feats.size() == 1 ? feats[0] : concat_channels(feats);
    feats.push_back(relu(conv2d(in, ps.at(base + ".kernel"), ps.at(base + ".bias"), 1, Pad::same)));
  }
  DenseBlockOut<T> out;
  out.last = feats.back();
  if (spec.concat_input) {
    out.all = concat_channels(feats);
  } else {
    std::vector<TensorT<T>> layer_feats(feats.begin() + 1, feats.end());
    out.all = layer_feats.size() == 1 ? layer_feats[0] : concat_channels(layer_feats);
  }
  return out;
}

}  // namespace capsdense
