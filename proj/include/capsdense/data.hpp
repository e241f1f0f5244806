#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capsdense/tensor.hpp"

namespace capsdense {

// Labeled image set. Pixels are [N,C,H,W] floats in [0,1].
struct Dataset {
  std::string name;
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;

  int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

// IDX image/label pair (big-endian headers, magic 0x00000803 / 0x00000801).
// Pixel bytes are scaled by 1/255. Throws FormatError with a byte offset on
// malformed input, and if the two files disagree on the sample count.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Binary batch files of 3073-byte records: one label byte (0..9) followed by
// 32x32 R, G, B planes. Files are concatenated in the order given.
Dataset load_cifar10_bin(const std::vector<std::string>& paths);

// Deterministic 16x16 grayscale shapes, 4 classes: filled square, hollow
// square, cross, diagonal stripe. Position jitter only, so the task is
// learnable at desk scale. Labels cycle 0,1,2,3,...
Dataset synth_shapes(int64_t n, uint64_t seed);

Dataset subset(const Dataset& d, int64_t start, int64_t count);

struct Batch {
  Tensor images;            // [B,C,H,W]
  Tensor onehot;            // [B,K]
  std::vector<int> labels;  // B entries
};

// Seeded Fisher-Yates shuffle, then contiguous chunks; a final partial
// batch is kept. batch_size must be positive; an empty dataset is an error.
std::vector<Batch> make_batches(const Dataset& d, int batch_size, uint64_t shuffle_seed);

// Unshuffled chunks, for evaluation.
std::vector<Batch> make_eval_batches(const Dataset& d, int batch_size);

}  // namespace capsdense
