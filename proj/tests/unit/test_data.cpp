// Dataset ingestion: IDX and CIFAR binary fixtures built byte-by-byte in a
// temp directory, the synthetic generator, and batching properties.
#include <unistd.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "capsdense/data.hpp"
#include "doctest.h"

using namespace capsdense;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("capsdense-data-test-" + std::to_string(::getpid()) + "-" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  REQUIRE(f.good());
}

void push_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

// Two 2x2 images with known bytes plus matching labels.
std::vector<uint8_t> idx_images_fixture() {
  std::vector<uint8_t> b;
  push_be32(b, 0x00000803);
  push_be32(b, 2);  // images
  push_be32(b, 2);  // rows
  push_be32(b, 2);  // cols
  for (uint8_t v : {0, 51, 102, 255, 10, 20, 30, 40}) b.push_back(v);
  return b;
}

std::vector<uint8_t> idx_labels_fixture() {
  std::vector<uint8_t> b;
  push_be32(b, 0x00000801);
  push_be32(b, 2);
  b.push_back(7);
  b.push_back(0);
  return b;
}

}  // namespace

TEST_CASE("idx fixture loads with exact 1/255 pixel scaling") {
  TempDir tmp;
  write_bytes(tmp.file("img"), idx_images_fixture());
  write_bytes(tmp.file("lab"), idx_labels_fixture());
  Dataset d = load_idx(tmp.file("img"), tmp.file("lab"));
  CHECK(d.size() == 2);
  CHECK(d.num_classes == 10);
  REQUIRE(d.images.shape() == Shape{2, 1, 2, 2});
  CHECK(d.images.at({0, 0, 0, 0}) == 0.0f);
  CHECK(d.images.at({0, 0, 0, 1}) == 51.0f / 255.0f);
  CHECK(d.images.at({0, 0, 1, 0}) == 102.0f / 255.0f);
  CHECK(d.images.at({0, 0, 1, 1}) == 1.0f);
  CHECK(d.images.at({1, 0, 0, 0}) == 10.0f / 255.0f);
  CHECK(d.labels == std::vector<int>{7, 0});
}

TEST_CASE("idx loader rejects malformed files with byte offsets") {
  TempDir tmp;
  write_bytes(tmp.file("img"), idx_images_fixture());
  write_bytes(tmp.file("lab"), idx_labels_fixture());

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_idx(tmp.file("nope"), tmp.file("lab")), FormatError);
  }
  SUBCASE("labels magic on the images path") {
    CHECK_THROWS_WITH_AS(load_idx(tmp.file("lab"), tmp.file("lab")),
                         doctest::Contains("bad magic"), FormatError);
  }
  SUBCASE("images magic on the labels path") {
    CHECK_THROWS_WITH_AS(load_idx(tmp.file("img"), tmp.file("img")),
                         doctest::Contains("bad magic"), FormatError);
  }
  SUBCASE("truncated pixels") {
    auto img = idx_images_fixture();
    img.pop_back();
    write_bytes(tmp.file("short"), img);
    CHECK_THROWS_WITH_AS(load_idx(tmp.file("short"), tmp.file("lab")),
                         doctest::Contains("byte 16"), FormatError);
  }
  SUBCASE("truncated header") {
    write_bytes(tmp.file("stub"), {0x00, 0x00});
    CHECK_THROWS_WITH_AS(load_idx(tmp.file("stub"), tmp.file("lab")),
                         doctest::Contains("byte"), FormatError);
  }
  SUBCASE("count mismatch between the two files") {
    auto lab = idx_labels_fixture();
    lab[7] = 3;  // claims 3 labels
    lab.push_back(1);
    write_bytes(tmp.file("lab3"), lab);
    CHECK_THROWS_WITH_AS(load_idx(tmp.file("img"), tmp.file("lab3")),
                         doctest::Contains("does not match"), FormatError);
  }
  SUBCASE("label value out of range") {
    auto lab = idx_labels_fixture();
    lab[8] = 12;
    write_bytes(tmp.file("lab12"), lab);
    CHECK_THROWS_WITH_AS(load_idx(tmp.file("img"), tmp.file("lab12")),
                         doctest::Contains("out of range"), FormatError);
  }
}

TEST_CASE("idx round-trip: write, load, compare") {
  TempDir tmp;
  write_bytes(tmp.file("img"), idx_images_fixture());
  write_bytes(tmp.file("lab"), idx_labels_fixture());
  Dataset a = load_idx(tmp.file("img"), tmp.file("lab"));
  Dataset b = load_idx(tmp.file("img"), tmp.file("lab"));
  CHECK(std::memcmp(a.images.data(), b.images.data(),
                    sizeof(float) * a.images.numel()) == 0);
  CHECK(a.labels == b.labels);
}

TEST_CASE("cifar record fixture: label byte then R,G,B planes") {
  TempDir tmp;
  std::vector<uint8_t> rec(3073);
  rec[0] = 3;                                   // label
  rec[1] = 200;                                 // first red pixel
  rec[1 + 1024] = 100;                          // first green pixel
  rec[1 + 2048] = 50;                           // first blue pixel
  rec[1 + 1023] = 7;                            // last red pixel
  write_bytes(tmp.file("batch.bin"), rec);
  Dataset d = load_cifar10_bin({tmp.file("batch.bin")});
  CHECK(d.size() == 1);
  REQUIRE(d.images.shape() == Shape{1, 3, 32, 32});
  CHECK(d.labels[0] == 3);
  CHECK(d.images.at({0, 0, 0, 0}) == 200.0f / 255.0f);
  CHECK(d.images.at({0, 1, 0, 0}) == 100.0f / 255.0f);
  CHECK(d.images.at({0, 2, 0, 0}) == 50.0f / 255.0f);
  CHECK(d.images.at({0, 0, 31, 31}) == 7.0f / 255.0f);

  // files concatenate in the order given
  std::vector<uint8_t> rec2(3073);
  rec2[0] = 5;
  write_bytes(tmp.file("batch2.bin"), rec2);
  Dataset two = load_cifar10_bin({tmp.file("batch.bin"), tmp.file("batch2.bin")});
  CHECK(two.size() == 2);
  CHECK(two.labels == std::vector<int>{3, 5});
}

TEST_CASE("cifar loader rejects bad record sizes and labels") {
  TempDir tmp;
  write_bytes(tmp.file("odd.bin"), std::vector<uint8_t>(3072));  // one byte short
  CHECK_THROWS_WITH_AS(load_cifar10_bin({tmp.file("odd.bin")}),
                       doctest::Contains("3073"), FormatError);
  std::vector<uint8_t> bad(3073);
  bad[0] = 11;
  write_bytes(tmp.file("bad.bin"), bad);
  CHECK_THROWS_WITH_AS(load_cifar10_bin({tmp.file("bad.bin")}),
                       doctest::Contains("out of range"), FormatError);
  CHECK_THROWS_AS(load_cifar10_bin({}), ContractError);
}

TEST_CASE("synthetic shapes are deterministic, balanced, and in range") {
  Dataset a = synth_shapes(64, 9);
  Dataset b = synth_shapes(64, 9);
  Dataset c = synth_shapes(64, 10);
  REQUIRE(a.images.shape() == Shape{64, 1, 16, 16});
  CHECK(a.num_classes == 4);
  CHECK(std::memcmp(a.images.data(), b.images.data(), sizeof(float) * a.images.numel()) == 0);
  CHECK(std::memcmp(a.images.data(), c.images.data(), sizeof(float) * a.images.numel()) != 0);

  int counts[4] = {0, 0, 0, 0};
  for (int64_t i = 0; i < 64; ++i) {
    CHECK(a.labels[static_cast<size_t>(i)] == static_cast<int>(i % 4));
    ++counts[a.labels[static_cast<size_t>(i)]];
  }
  for (int k = 0; k < 4; ++k) CHECK(counts[k] == 16);
  for (int64_t i = 0; i < a.images.numel(); ++i) {
    CHECK(a.images.data()[i] >= 0.0f);
    CHECK(a.images.data()[i] <= 1.0f);
  }
  // every image actually draws something
  for (int64_t s = 0; s < 64; ++s) {
    float mass = 0;
    for (int64_t i = 0; i < 256; ++i) mass += a.images.data()[s * 256 + i];
    CHECK(mass > 0.0f);
  }
  CHECK_THROWS_AS(synth_shapes(0, 1), ContractError);
}

TEST_CASE("subset slices images and labels together") {
  Dataset d = synth_shapes(12, 4);
  Dataset s = subset(d, 4, 3);
  CHECK(s.size() == 3);
  CHECK(s.labels == std::vector<int>{0, 1, 2});
  CHECK(std::memcmp(s.images.data(), d.images.data() + 4 * 256, sizeof(float) * 3 * 256) == 0);
  CHECK(s.num_classes == 4);
  CHECK_THROWS_AS(subset(d, 10, 3), ContractError);
  CHECK_THROWS_AS(subset(d, -1, 2), ContractError);
  CHECK_THROWS_AS(subset(d, 0, 0), ContractError);
}

TEST_CASE("batches partition the dataset and keep the final partial batch") {
  Dataset d = synth_shapes(10, 2);
  auto batches = make_batches(d, 4, 77);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].images.dim(0) == 4);
  CHECK(batches[1].images.dim(0) == 4);
  CHECK(batches[2].images.dim(0) == 2);

  // the emitted samples are a permutation of the dataset: compare the
  // multisets of (label, raw pixel bytes)
  auto sample_key = [](const Tensor& images, int64_t i, int label) {
    std::string key(1, static_cast<char>(label));
    key.append(reinterpret_cast<const char*>(images.data() + i * 256),
               256 * sizeof(float));
    return key;
  };
  std::multiset<std::string> want, got;
  for (int64_t s = 0; s < d.size(); ++s)
    want.insert(sample_key(d.images, s, d.labels[static_cast<size_t>(s)]));
  for (const auto& b : batches)
    for (int64_t i = 0; i < b.images.dim(0); ++i)
      got.insert(sample_key(b.images, i, b.labels[static_cast<size_t>(i)]));
  CHECK(got == want);
}

TEST_CASE("one-hot batch labels have exactly one 1 per row") {
  Dataset d = synth_shapes(8, 3);
  for (const auto& b : make_batches(d, 3, 5)) {
    REQUIRE(b.onehot.shape() == Shape{b.images.dim(0), 4});
    for (int64_t i = 0; i < b.images.dim(0); ++i) {
      float row_sum = 0;
      for (int64_t k = 0; k < 4; ++k) row_sum += b.onehot.at({i, k});
      CHECK(row_sum == 1.0f);
      CHECK(b.onehot.at({i, b.labels[static_cast<size_t>(i)]}) == 1.0f);
    }
  }
}

TEST_CASE("the shuffle is seeded and the eval order is not shuffled") {
  Dataset d = synth_shapes(16, 6);
  auto a = make_batches(d, 4, 123);
  auto b = make_batches(d, 4, 123);
  auto c = make_batches(d, 4, 124);
  bool same_ab = true, same_ac = true;
  for (size_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(a[i].images.data(), b[i].images.data(),
                    sizeof(float) * a[i].images.numel()) != 0)
      same_ab = false;
    if (std::memcmp(a[i].images.data(), c[i].images.data(),
                    sizeof(float) * a[i].images.numel()) != 0)
      same_ac = false;
  }
  CHECK(same_ab);
  CHECK_FALSE(same_ac);

  auto ev = make_eval_batches(d, 5);
  REQUIRE(ev.size() == 4);
  CHECK(std::memcmp(ev[0].images.data(), d.images.data(), sizeof(float) * 5 * 256) == 0);
  CHECK(ev[3].images.dim(0) == 1);

  CHECK_THROWS_AS(make_batches(d, 0, 1), ContractError);
  Dataset empty;
  CHECK_THROWS_AS(make_batches(empty, 4, 1), ContractError);
  CHECK_THROWS_AS(make_eval_batches(empty, 4), ContractError);
}
