#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mde/errors.hpp"

namespace mde {

/// Named-tensor archive underlying checkpoints. Layout (all little-endian):
///   magic "MDEC" | format version u32 | config length u32 + UTF-8 JSON |
///   tensor count u32 | per tensor: name length u32 + UTF-8 name,
///   dtype u8 (0 = f32, 1 = f64), rank u8, extents u64 each, raw elements.
struct TensorArchive {
  static constexpr char kMagic[4] = {'M', 'D', 'E', 'C'};
  static constexpr std::uint32_t kVersion = 1;

  struct Entry {
    std::string name;
    std::uint8_t dtype = 0;
    std::vector<std::uint64_t> extents;
    std::vector<std::uint8_t> bytes;

    std::size_t count() const {
      std::size_t n = 1;
      for (auto e : extents) n *= std::size_t(e);
      return n;
    }
  };

  std::uint32_t version = kVersion;
  std::string config_json;
  std::vector<Entry> entries;

  template <typename T>
  static constexpr std::uint8_t dtype_tag() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
  }

  template <typename T>
  void add(const std::string& name, const std::vector<std::uint64_t>& extents,
           std::span<const T> values) {
    Entry e;
    e.name = name;
    e.dtype = dtype_tag<T>();
    e.extents = extents;
    e.bytes.resize(values.size() * sizeof(T));
    std::memcpy(e.bytes.data(), values.data(), e.bytes.size());
    if (e.count() != values.size())
      throw IoError("archive: extents do not match element count for " + name);
    entries.push_back(std::move(e));
  }

  template <typename T>
  void copy_out(const Entry& e, std::span<T> dst) const {
    if (e.dtype != dtype_tag<T>())
      throw IoError("archive: dtype mismatch for tensor '" + e.name + "'");
    if (e.bytes.size() != dst.size() * sizeof(T))
      throw IoError("archive: size mismatch for tensor '" + e.name + "'");
    std::memcpy(dst.data(), e.bytes.data(), e.bytes.size());
  }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  void write(std::ostream& os) const {
    os.write(kMagic, 4);
    write_u32(os, version);
    write_u32(os, std::uint32_t(config_json.size()));
    os.write(config_json.data(), std::streamsize(config_json.size()));
    write_u32(os, std::uint32_t(entries.size()));
    for (const auto& e : entries) {
      write_u32(os, std::uint32_t(e.name.size()));
      os.write(e.name.data(), std::streamsize(e.name.size()));
      os.put(char(e.dtype));
      os.put(char(e.extents.size()));
      for (auto x : e.extents) write_u64(os, x);
      os.write(reinterpret_cast<const char*>(e.bytes.data()), std::streamsize(e.bytes.size()));
    }
    if (!os) throw IoError("archive: write failed");
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("archive: cannot open '" + path + "' for writing");
    write(f);
  }

  /// Serialized byte length without touching the filesystem.
  std::size_t byte_size() const {
    std::ostringstream os(std::ios::binary);
    write(os);
    return os.str().size();
  }

  static TensorArchive read(std::istream& is) {
    TensorArchive a;
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
      throw IoError("archive: bad magic (not a checkpoint file)");
    a.version = read_u32(is, "version");
    if (a.version != kVersion)
      throw IoError("archive: unsupported format version " + std::to_string(a.version));
    const auto cfg_len = read_u32(is, "config length");
    a.config_json.resize(cfg_len);
    is.read(a.config_json.data(), cfg_len);
    if (!is) throw IoError("archive: truncated config");
    const auto count = read_u32(is, "tensor count");
    for (std::uint32_t t = 0; t < count; ++t) {
      Entry e;
      const auto name_len = read_u32(is, "tensor name length");
      e.name.resize(name_len);
      is.read(e.name.data(), name_len);
      int dtype = is.get();
      int rank = is.get();
      if (!is || dtype == EOF || rank == EOF)
        throw IoError("archive: truncated tensor header" +
                      (e.name.empty() ? std::string() : " for '" + e.name + "'"));
      e.dtype = std::uint8_t(dtype);
      if (e.dtype > 1) throw IoError("archive: unknown dtype tag for '" + e.name + "'");
      e.extents.resize(std::size_t(rank));
      for (auto& x : e.extents) x = read_u64(is, "extent of '" + e.name + "'");
      const std::size_t elem = e.dtype == 0 ? 4 : 8;
      e.bytes.resize(e.count() * elem);
      is.read(reinterpret_cast<char*>(e.bytes.data()), std::streamsize(e.bytes.size()));
      if (!is) throw IoError("archive: truncated payload for tensor '" + e.name + "'");
      a.entries.push_back(std::move(e));
    }
    return a;
  }

  static TensorArchive load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("archive: cannot open '" + path + "'");
    return read(f);
  }

 private:
  static void write_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    os.write(b, 4);
  }
  static void write_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    os.write(b, 8);
  }
  static std::uint32_t read_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("archive: truncated while reading " + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
  }
  static std::uint64_t read_u64(std::istream& is, const std::string& what) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("archive: truncated while reading " + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
  }
};

}  // namespace mde
