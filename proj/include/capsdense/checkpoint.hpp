#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capsdense/params.hpp"
#include "capsdense/tensor.hpp"
#include "capsdense/trainer.hpp"

namespace capsdense {

// Checkpoint container: "CDCK" magic, a version word, a named-tensor
// manifest, little-endian float32 payloads in manifest order, and a CRC32
// of the payload bytes. See the format notes in README.md.

inline constexpr uint32_t kCheckpointVersion = 1;

uint32_t crc32_ieee(const uint8_t* data, size_t n, uint32_t crc = 0);

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);

// Throws FormatError on a malformed header and IntegrityError on
// truncation or a checksum mismatch; messages carry byte offsets.
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

// Model + optimizer persistence. Optimizer moments are stored as
// "adam.m.<param>" / "adam.v.<param>"; scalar counters ride along as
// 1-element tensors ("meta.step", "meta.next_epoch").
void save_training_state(const std::string& path, const ParamStore& ps, const AdamState* adam,
                         int next_epoch);

struct TrainingState {
  int next_epoch = 0;
  bool has_optimizer = false;
};

// Restores parameters (names and shapes must match the store exactly;
// mismatches raise ConfigError naming the offender). Pass a non-null adam
// to also restore moments; a checkpoint without them raises ConfigError.
TrainingState load_training_state(const std::string& path, ParamStore& ps, AdamState* adam);

}  // namespace capsdense
