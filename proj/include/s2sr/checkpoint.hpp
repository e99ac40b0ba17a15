#pragma once

// Checkpoint container. On-disk layout, all integers little-endian:
//   magic "S2SR" | u32 version=1 | u32 entry count
//   per entry: u16 name length | name bytes (UTF-8)
//              u8 dtype (0 = f32, 1 = raw bytes) | u8 rank
//              u32 dims[rank] | payload
// Float payloads are 4 * prod(dims) bytes. The model config travels as the
// final entry, named "config", holding the JSON document as raw bytes.

#include <cstdio>

#include "s2sr/model.hpp"

namespace s2sr {

namespace detail {

inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v & 0xFF));
  out.push_back(uint8_t(v >> 8));
}
inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xFF));
}
inline void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(out, u);
}

struct ByteCursor {
  const std::vector<uint8_t>& data;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > data.size()) throw DataError("checkpoint truncated at offset " +
                                               std::to_string(pos));
  }
  uint8_t u8() {
    need(1);
    return data[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(data[pos] | (data[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(data[pos + size_t(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() {
    uint32_t u = u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
};

}  // namespace detail

inline std::vector<uint8_t> checkpoint_bytes(const Swin2SR<float>& model) {
  auto params = model.named_params();
  std::vector<uint8_t> out;
  out.insert(out.end(), {'S', '2', 'S', 'R'});
  detail::put_u32(out, 1);
  detail::put_u32(out, uint32_t(params.size() + 1));
  for (auto& [name, p] : params) {
    detail::put_u16(out, uint16_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(0);  // dtype f32
    out.push_back(uint8_t(p.rank()));
    for (int64_t d : p.shape()) detail::put_u32(out, uint32_t(d));
    for (float v : p.data()) detail::put_f32(out, v);
  }
  std::string cfg = config_to_json(model.cfg).dump();
  detail::put_u16(out, 6);
  for (char c : std::string("config")) out.push_back(uint8_t(c));
  out.push_back(1);  // dtype raw bytes
  out.push_back(1);  // rank 1
  detail::put_u32(out, uint32_t(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  return out;
}

inline void save_checkpoint(const Swin2SR<float>& model, const std::string& path) {
  auto bytes = checkpoint_bytes(model);
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw DataError("cannot open for writing: " + path);
  std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
}

inline Swin2SR<float> checkpoint_from_bytes(const std::vector<uint8_t>& bytes) {
  detail::ByteCursor cur{bytes};
  cur.need(4);
  if (std::memcmp(bytes.data(), "S2SR", 4) != 0) throw DataError("bad checkpoint magic");
  cur.pos = 4;
  uint32_t version = cur.u32();
  if (version != 1) throw DataError("unsupported checkpoint version " + std::to_string(version));
  uint32_t count = cur.u32();

  struct Entry {
    std::string name;
    uint8_t dtype = 0;
    Shape dims;
    std::vector<float> floats;
    std::vector<uint8_t> raw;
  };
  std::vector<Entry> entries;
  for (uint32_t i = 0; i < count; ++i) {
    Entry e;
    uint16_t nlen = cur.u16();
    cur.need(nlen);
    e.name.assign(reinterpret_cast<const char*>(bytes.data()) + cur.pos, nlen);
    cur.pos += nlen;
    e.dtype = cur.u8();
    uint8_t rank = cur.u8();
    int64_t n = 1;
    for (int r = 0; r < rank; ++r) {
      uint32_t d = cur.u32();
      e.dims.push_back(int64_t(d));
      n *= d;
    }
    if (e.dtype == 0) {
      e.floats.resize(size_t(n));
      for (auto& v : e.floats) v = cur.f32();
    } else if (e.dtype == 1) {
      cur.need(size_t(n));
      e.raw.assign(bytes.begin() + int64_t(cur.pos), bytes.begin() + int64_t(cur.pos) + n);
      cur.pos += size_t(n);
    } else {
      throw DataError("unknown checkpoint dtype " + std::to_string(int(e.dtype)));
    }
    entries.push_back(std::move(e));
  }

  const Entry* cfg_entry = nullptr;
  for (auto& e : entries)
    if (e.name == "config") cfg_entry = &e;
  if (!cfg_entry) throw DataError("checkpoint missing config entry");
  ModelConfig cfg;
  try {
    cfg = config_from_json(
        nlohmann::json::parse(std::string(cfg_entry->raw.begin(), cfg_entry->raw.end())));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }

  Rng rng(0);
  Swin2SR<float> model(cfg, rng);
  for (auto& [name, p] : model.named_params()) {
    const Entry* found = nullptr;
    for (auto& e : entries)
      if (e.name == name) found = &e;
    if (!found) throw DataError("checkpoint missing tensor: " + name);
    if (found->dims != p.shape())
      throw DataError("checkpoint tensor " + name + " has shape " + shape_str(found->dims) +
                      ", expected " + shape_str(p.shape()));
    const_cast<Tensor<float>&>(p).data() = found->floats;
  }
  return model;
}

inline Swin2SR<float> load_checkpoint(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot open: " + path);
  std::fseek(f, 0, SEEK_END);
  long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<uint8_t> bytes(static_cast<size_t>(sz));
  if (std::fread(bytes.data(), 1, bytes.size(), f) != bytes.size()) {
    std::fclose(f);
    throw DataError("short read: " + path);
  }
  std::fclose(f);
  return checkpoint_from_bytes(bytes);
}

}  // namespace s2sr
