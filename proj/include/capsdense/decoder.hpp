#pragma once

#include <string>
#include <utility>

#include "capsdense/ops.hpp"
#include "capsdense/params.hpp"

namespace capsdense {

// Reconstruction decoder over masked class capsules (flattened to one row
// per sample). Two layouts:
//   baseline: fc1-relu, fc2-relu, fc3-sigmoid
//   dense:    fc1-relu, fc2-relu, fc3-relu on [fc1_out | fc2_out], fc4-sigmoid
// fc3's width equals w2, so the final layer always maps w2 -> pixels.
struct DecoderSpec {
  enum class Kind { baseline, dense };

  Kind kind = Kind::dense;
  int w1 = 512;
  int w2 = 1024;
  int out_channels = 1;
  int out_h = 28;
  int out_w = 28;

  int out_pixels() const { return out_channels * out_h * out_w; }

  void validate() const {
    if (w1 < 1 || w2 < 1) throw ConfigError("decoder widths must be positive");
    if (out_channels < 1 || out_h < 1 || out_w < 1)
      throw ConfigError("decoder output extents must be positive");
  }
};

// Hidden widths scale up once the reconstruction side exceeds 32 pixels.
inline std::pair<int, int> decoder_widths_for(int out_h, int out_w) {
  return (out_h > 32 || out_w > 32) ? std::pair<int, int>{600, 1200}
                                    : std::pair<int, int>{512, 1024};
}

inline int64_t decoder_param_count(const DecoderSpec& spec, int in_dim) {
  spec.validate();
  const int64_t w1 = spec.w1, w2 = spec.w2, px = spec.out_pixels();
  int64_t total = (in_dim * w1 + w1) + (w1 * w2 + w2);
  if (spec.kind == DecoderSpec::Kind::dense)
    total += ((w1 + w2) * w2 + w2) + (w2 * px + px);
  else
    total += w2 * px + px;
  return total;
}

template <typename T>
void decoder_init(ParamStoreT<T>& ps, const std::string& prefix, const DecoderSpec& spec,
                  int in_dim, Rng& rng) {
  spec.validate();
  auto dense_layer = [&](const std::string& name, int64_t in, int64_t out) {
    ps.create(prefix + "." + name + ".weight", {in, out}, rng);
    ps.create_zeros(prefix + "." + name + ".bias", {out});
  };
  dense_layer("fc1", in_dim, spec.w1);
  dense_layer("fc2", spec.w1, spec.w2);
  if (spec.kind == DecoderSpec::Kind::dense) {
    dense_layer("fc3", spec.w1 + spec.w2, spec.w2);
    dense_layer("fc4", spec.w2, spec.out_pixels());
  } else {
    dense_layer("fc3", spec.w2, spec.out_pixels());
  }
}

// masked: [B, in_dim] -> [B, out_pixels] in (0, 1).
template <typename T>
TensorT<T> decode(const TensorT<T>& masked, const DecoderSpec& spec, ParamStoreT<T>& ps,
                  const std::string& prefix) {
  if (masked.rank() != 2)
    throw DimensionError("decode: masked capsules must be [B,D], got " +
                         shape_str(masked.shape()));
  auto layer = [&](const TensorT<T>& in, const std::string& name) {
    return linear(in, ps.at(prefix + "." + name + ".weight"), ps.at(prefix + "." + name + ".bias"));
  };
  auto h1 = relu(layer(masked, "fc1"));
  auto h2 = relu(layer(h1, "fc2"));
  if (spec.kind == DecoderSpec::Kind::dense) {
    auto h3 = relu(layer(concat<T>({h1, h2}, 1), "fc3"));
    return sigmoid(layer(h3, "fc4"));
  }
  return sigmoid(layer(h2, "fc3"));
}

// multiplier * sum of squared pixel errors, averaged over the batch.
template <typename T>
TensorT<T> reconstruction_loss(const TensorT<T>& recon, const TensorT<T>& target, T multiplier) {
  check_same_shape("reconstruction_loss", recon, target);
  if (recon.rank() != 2)
    throw DimensionError("reconstruction_loss: expects [B,pixels], got " +
                         shape_str(recon.shape()));
  auto d = sub(recon, target);
  return scale(sum(mul(d, d)), multiplier / static_cast<T>(recon.dim(0)));
}

}  // namespace capsdense
