#include "capsdense/data.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include "capsdense/capsule.hpp"
#include "capsdense/error.hpp"
#include "capsdense/rng.hpp"

namespace capsdense {

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  f.seekg(0, std::ios::end);
  const auto len = static_cast<size_t>(f.tellg());
  f.seekg(0);
  std::vector<uint8_t> buf(len);
  if (len) f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(len));
  if (!f) throw FormatError("failed reading " + std::to_string(len) + " bytes from '" + path + "'");
  return buf;
}

uint32_t be32(const std::vector<uint8_t>& b, size_t off, const std::string& path) {
  if (off + 4 > b.size())
    throw FormatError("'" + path + "': truncated header at byte " + std::to_string(off));
  return (static_cast<uint32_t>(b[off]) << 24) | (static_cast<uint32_t>(b[off + 1]) << 16) |
         (static_cast<uint32_t>(b[off + 2]) << 8) | static_cast<uint32_t>(b[off + 3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const uint32_t img_magic = be32(img, 0, images_path);
  if (img_magic != 0x00000803u)
    throw FormatError("'" + images_path + "': bad magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", img_magic);
      return std::string(buf);
    }() + " at byte 0, expected 0x00000803");
  const uint32_t lab_magic = be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801u)
    throw FormatError("'" + labels_path + "': bad magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", lab_magic);
      return std::string(buf);
    }() + " at byte 0, expected 0x00000801");

  const uint32_t n = be32(img, 4, images_path);
  const uint32_t rows = be32(img, 8, images_path);
  const uint32_t cols = be32(img, 12, images_path);
  const uint32_t n_lab = be32(lab, 4, labels_path);
  if (n != n_lab)
    throw FormatError("image count " + std::to_string(n) + " in '" + images_path +
                      "' does not match label count " + std::to_string(n_lab) + " in '" +
                      labels_path + "'");
  if (n == 0) throw FormatError("'" + images_path + "': empty image set");

  const size_t want_img =16 + static_cast<size_t>(n) * rows * cols;
  if (img.size() != want_img)
    throw FormatError("'" + images_path + "': expected " + std::to_string(want_img) +
                      " bytes, got " + std::to_string(img.size()) +
                      " (pixel data starts at byte 16)");
  const size_t want_lab = 8 + static_cast<size_t>(n);
  if (lab.size() != want_lab)
    throw FormatError("'" + labels_path + "': expected " + std::to_string(want_lab) +
                      " bytes, got " + std::to_string(lab.size()) +
                      " (label data starts at byte 8)");

  Dataset d;
  d.name = "idx";
  d.num_classes = 10;
  d.images = Tensor({static_cast<int64_t>(n), 1, static_cast<int64_t>(rows),
                     static_cast<int64_t>(cols)});
  float* px = d.images.data();
  const size_t count = static_cast<size_t>(n) * rows * cols;
  for (size_t i = 0; i < count; ++i) px[i] = static_cast<float>(img[16 + i]) / 255.0f;
  d.labels.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    const uint8_t v = lab[8 + i];
    if (v > 9)
      throw FormatError("'" + labels_path + "': label " + std::to_string(v) + " at byte " +
                        std::to_string(8 + i) + " out of range 0..9");
    d.labels[i] = v;
  }
  return d;
}

Dataset load_cifar10_bin(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ContractError("load_cifar10_bin: no files given");
  constexpr size_t kRecord = 3073;  // label byte + 3*1024 pixel bytes
  size_t total = 0;
  std::vector<std::vector<uint8_t>> files;
  for (const auto& p : paths) {
    files.push_back(read_file(p));
    if (files.back().empty() || files.back().size() % kRecord != 0)
      throw FormatError("'" + p + "': size " + std::to_string(files.back().size()) +
                        " is not a positive multiple of the " + std::to_string(kRecord) +
                        "-byte record");
    total += files.back().size() / kRecord;
  }
  Dataset d;
  d.name = "cifar10";
  d.num_classes = 10;
  d.images = Tensor({static_cast<int64_t>(total), 3, 32, 32});
  d.labels.resize(total);
  float* px = d.images.data();
  size_t s = 0;
  for (size_t fi = 0; fi < files.size(); ++fi) {
    const auto& buf = files[fi];
    for (size_t off = 0; off < buf.size(); off += kRecord, ++s) {
      const uint8_t label = buf[off];
      if (label > 9)
        throw FormatError("'" + paths[fi] + "': label " + std::to_string(label) + " at byte " +
                          std::to_string(off) + " out of range 0..9");
      d.labels[s] = label;
      float* dst = px + s * 3 * 1024;
      for (size_t i = 0; i < 3 * 1024; ++i)
        dst[i] = static_cast<float>(buf[off + 1 + i]) / 255.0f;
    }
  }
  return d;
}

Dataset synth_shapes(int64_t n, uint64_t seed) {
  if (n < 1) throw ContractError("synth_shapes: need at least one sample");
  constexpr int S = 16;
  Dataset d;
  d.name = "synth";
  d.num_classes = 4;
  d.images = Tensor({n, 1, S, S});
  d.labels.resize(static_cast<size_t>(n));
  Rng rng(seed);
  float* base = d.images.data();
  for (int64_t s = 0; s < n; ++s) {
    const int cls = static_cast<int>(s % 4);
    d.labels[static_cast<size_t>(s)] = cls;
    float* img = base + s * S * S;
    const int dx = static_cast<int>(rng.uniform_int(5)) - 2;  // jitter in [-2, 2]
    const int dy = static_cast<int>(rng.uniform_int(5)) - 2;
    auto put = [&](int y, int x) {
      y += dy;
      x += dx;
      if (y >= 0 && y < S && x >= 0 && x < S) img[y * S + x] = 1.0f;
    };
    switch (cls) {
      case 0:  // filled 8x8 square
        for (int y = 4; y < 12; ++y)
          for (int x = 4; x < 12; ++x) put(y, x);
        break;
      case 1:  // hollow 8x8 square
        for (int t = 4; t < 12; ++t) {
          put(4, t);
          put(11, t);
          put(t, 4);
          put(t, 11);
        }
        break;
      case 2:  // cross through the center
        for (int t = 3; t < 13; ++t) {
          put(t, 7);
          put(t, 8);
          put(7, t);
          put(8, t);
        }
        break;
      case 3:  // diagonal stripe, two pixels wide
        for (int t = 2; t < 14; ++t) {
          put(t, t);
          if (t + 1 < 14) put(t + 1, t);
        }
        break;
    }
  }
  return d;
}

Dataset subset(const Dataset& d, int64_t start, int64_t count) {
  if (start < 0 || count < 1 || start + count > d.size())
    throw ContractError("subset: range [" + std::to_string(start) + ", " +
                        std::to_string(start + count) + ") out of bounds for " +
                        std::to_string(d.size()) + " samples");
  const int64_t per = d.images.numel() / d.size();
  Dataset out;
  out.name = d.name;
  out.num_classes = d.num_classes;
  Shape shape = d.images.shape();
  shape[0] = count;
  out.images = Tensor(shape);
  std::memcpy(out.images.data(), d.images.data() + start * per,
              static_cast<size_t>(count * per) * sizeof(float));
  out.labels.assign(d.labels.begin() + start, d.labels.begin() + start + count);
  return out;
}

namespace {

std::vector<Batch> chunk(const Dataset& d, const std::vector<int64_t>& order, int batch_size) {
  const int64_t n = d.size();
  const int64_t per = d.images.numel() / n;
  std::vector<Batch> out;
  for (int64_t at = 0; at < n; at += batch_size) {
    const int64_t b = std::min<int64_t>(batch_size, n - at);
    Batch batch;
    Shape shape = d.images.shape();
    shape[0] = b;
    batch.images = Tensor(shape);
    batch.labels.resize(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
      const int64_t src = order[static_cast<size_t>(at + i)];
      std::memcpy(batch.images.data() + i * per, d.images.data() + src * per,
                  static_cast<size_t>(per) * sizeof(float));
      batch.labels[static_cast<size_t>(i)] = d.labels[static_cast<size_t>(src)];
    }
    batch.onehot = one_hot<float>(batch.labels, d.num_classes);
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace

std::vector<Batch> make_batches(const Dataset& d, int batch_size, uint64_t shuffle_seed) {
  if (d.size() == 0) throw ContractError("make_batches: empty dataset");
  if (batch_size < 1) throw ContractError("make_batches: batch_size must be >= 1");
  std::vector<int64_t> order(static_cast<size_t>(d.size()));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(shuffle_seed);
  rng.shuffle(order.begin(), order.end());
  return chunk(d, order, batch_size);
}

std::vector<Batch> make_eval_batches(const Dataset& d, int batch_size) {
  if (d.size() == 0) throw ContractError("make_eval_batches: empty dataset");
  if (batch_size < 1) throw ContractError("make_eval_batches: batch_size must be >= 1");
  std::vector<int64_t> order(static_cast<size_t>(d.size()));
  std::iota(order.begin(), order.end(), 0);
  return chunk(d, order, batch_size);
}

}  // namespace capsdense
