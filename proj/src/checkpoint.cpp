#include "capsdense/checkpoint.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

namespace capsdense {

uint32_t crc32_ieee(const uint8_t* data, size_t n, uint32_t crc) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc = ~crc;
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  return ~crc;
}

namespace {

constexpr char kMagic[4] = {'C', 'D', 'C', 'K'};
constexpr uint8_t kDtypeF32 = 0;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 24));
}

struct Reader {
  const std::vector<uint8_t>& buf;
  const std::string& path;
  size_t at = 0;

  void need(size_t n, const char* what) {
    if (at + n > buf.size())
      throw IntegrityError("'" + path + "': truncated " + what + " at byte " +
                           std::to_string(at) + " (file has " + std::to_string(buf.size()) +
                           " bytes)");
  }
  uint32_t u32(const char* what) {
    need(4, what);
    const uint32_t v = static_cast<uint32_t>(buf[at]) | (static_cast<uint32_t>(buf[at + 1]) << 8) |
                       (static_cast<uint32_t>(buf[at + 2]) << 16) |
                       (static_cast<uint32_t>(buf[at + 3]) << 24);
    at += 4;
    return v;
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return buf[at++];
  }
};

std::string hex32(uint32_t v) {
  char b[16];
  std::snprintf(b, sizeof b, "%08x", v);
  return b;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::vector<uint8_t> head;
  head.insert(head.end(), kMagic, kMagic + 4);
  put_u32(head, kCheckpointVersion);
  put_u32(head, static_cast<uint32_t>(entries.size()));
  std::vector<uint8_t> payload;
  for (const auto& e : entries) {
    put_u32(head, static_cast<uint32_t>(e.name.size()));
    head.insert(head.end(), e.name.begin(), e.name.end());
    head.push_back(kDtypeF32);
    head.push_back(static_cast<uint8_t>(e.shape.size()));
    int64_t n = 1;
    for (int64_t d : e.shape) {
      put_u32(head, static_cast<uint32_t>(d));
      n *= d;
    }
    if (static_cast<int64_t>(e.data.size()) != n)
      throw ContractError("save_checkpoint: entry '" + e.name + "' has " +
                          std::to_string(e.data.size()) + " values but shape " +
                          shape_str(e.shape));
    const size_t off = payload.size();
    payload.resize(off + e.data.size() * 4);
    // Little-endian float32; this is a plain copy on every supported host.
    std::memcpy(payload.data() + off, e.data.data(), e.data.size() * 4);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("save_checkpoint: cannot write '" + path + "'");
  f.write(reinterpret_cast<const char*>(head.data()), static_cast<std::streamsize>(head.size()));
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  std::vector<uint8_t> tail;
  put_u32(tail, crc32_ieee(payload.data(), payload.size()));
  f.write(reinterpret_cast<const char*>(tail.data()), static_cast<std::streamsize>(tail.size()));
  if (!f) throw ConfigError("save_checkpoint: write failed for '" + path + "'");
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf, path};

  r.need(4, "magic");
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw FormatError("'" + path + "': bad magic at byte 0, expected \"CDCK\"");
  r.at = 4;
  const uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("'" + path + "': unsupported version " + std::to_string(version) +
                      " at byte 4, expected " + std::to_string(kCheckpointVersion));
  const uint32_t count = r.u32("entry count");

  std::vector<CheckpointEntry> entries(count);
  size_t total_values = 0;
  for (auto& e : entries) {
    const uint32_t name_len = r.u32("name length");
    r.need(name_len, "entry name");
    e.name.assign(reinterpret_cast<const char*>(buf.data() + r.at), name_len);
    r.at += name_len;
    const uint8_t dtype = r.u8("dtype tag");
    if (dtype != kDtypeF32)
      throw FormatError("'" + path + "': unknown dtype tag " + std::to_string(dtype) +
                        " at byte " + std::to_string(r.at - 1) + " for entry '" + e.name + "'");
    const uint8_t rank = r.u8("rank");
    int64_t n = 1;
    for (uint8_t i = 0; i < rank; ++i) {
      const uint32_t d = r.u32("extent");
      e.shape.push_back(static_cast<int64_t>(d));
      n *= d;
    }
    e.data.resize(static_cast<size_t>(n));
    total_values += static_cast<size_t>(n);
  }

  r.need(total_values * 4 + 4, "payload and checksum");
  const uint8_t* payload = buf.data() + r.at;
  const size_t payload_bytes = total_values * 4;
  const uint32_t stored_crc = static_cast<uint32_t>(buf[r.at + payload_bytes]) |
                              (static_cast<uint32_t>(buf[r.at + payload_bytes + 1]) << 8) |
                              (static_cast<uint32_t>(buf[r.at + payload_bytes + 2]) << 16) |
                              (static_cast<uint32_t>(buf[r.at + payload_bytes + 3]) << 24);
  const uint32_t actual_crc = crc32_ieee(payload, payload_bytes);
  if (stored_crc != actual_crc)
    throw IntegrityError("'" + path + "': payload checksum mismatch, stored 0x" +
                         hex32(stored_crc) + " vs computed 0x" + hex32(actual_crc));
  size_t off = 0;
  for (auto& e : entries) {
    std::memcpy(e.data.data(), payload + off, e.data.size() * 4);
    off += e.data.size() * 4;
  }
  return entries;
}

void save_training_state(const std::string& path, const ParamStore& ps, const AdamState* adam,
                         int next_epoch) {
  std::vector<CheckpointEntry> entries;
  for (const auto& [name, t] : ps.items())
    entries.push_back({name, t.shape(), std::vector<float>(t.data(), t.data() + t.numel())});
  if (adam) {
    if (adam->m.size() != ps.size())
      throw ContractError("save_training_state: optimizer state does not match the store");
    for (size_t i = 0; i < ps.size(); ++i) {
      const auto& [name, t] = ps.items()[i];
      entries.push_back({"adam.m." + name, t.shape(), adam->m[i]});
      entries.push_back({"adam.v." + name, t.shape(), adam->v[i]});
    }
    entries.push_back({"meta.step", Shape{1}, {static_cast<float>(adam->step)}});
  }
  entries.push_back({"meta.next_epoch", Shape{1}, {static_cast<float>(next_epoch)}});
  save_checkpoint(path, entries);
}

TrainingState load_training_state(const std::string& path, ParamStore& ps, AdamState* adam) {
  const auto entries = load_checkpoint(path);
  auto find = [&](const std::string& name) -> const CheckpointEntry* {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  };

  for (auto& [name, t] : ps.items()) {
    const CheckpointEntry* e = find(name);
    if (!e) throw ConfigError("'" + path + "': missing parameter '" + name + "'");
    if (e->shape != t.shape())
      throw ConfigError("'" + path + "': parameter '" + name + "' has shape " +
                        shape_str(e->shape) + ", the model expects " + shape_str(t.shape()));
    std::copy(e->data.begin(), e->data.end(), t.data());
  }

  TrainingState st;
  if (const CheckpointEntry* e = find("meta.next_epoch"))
    st.next_epoch = static_cast<int>(e->data.at(0));
  st.has_optimizer = find("meta.step") != nullptr;

  if (adam) {
    if (!st.has_optimizer)
      throw ConfigError("'" + path + "': checkpoint carries no optimizer state");
    adam->init(ps);
    adam->step = static_cast<int64_t>(find("meta.step")->data.at(0));
    for (size_t i = 0; i < ps.size(); ++i) {
      const auto& name = ps.items()[i].first;
      for (auto [buf, tag] : {std::pair{&adam->m[i], "adam.m."}, std::pair{&adam->v[i], "adam.v."}}) {
        const CheckpointEntry* e = find(tag + name);
        if (!e) throw ConfigError("'" + path + "': missing optimizer entry '" + tag + name + "'");
        if (e->data.size() != buf->size())
          throw ConfigError("'" + path + "': optimizer entry '" + tag + name +
                            "' has wrong element count");
        *buf = e->data;
      }
    }
  }
  return st;
}

}  // namespace capsdense
