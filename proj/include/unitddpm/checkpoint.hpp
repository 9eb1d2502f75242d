#pragma once

// Tensor-record container used for checkpoints and trajectory dumps.
//
// Layout (all integers and floats little-endian):
//   magic        8 bytes  "UDDPMTR1"
//   version      u32      kContainerVersion
//   step         u64      creation step
//   config_len   u32, then config_len bytes of UTF-8 (flat key = value text)
//   rng_key      u64
//   rng_counter  u64
//   n_records    u32
//   per record:  name_len u32, name bytes (UTF-8), rank u32,
//                rank x u64 extents, prod(extents) x f64 row-major values

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "unitddpm/errors.hpp"
#include "unitddpm/rng.hpp"
#include "unitddpm/tensor.hpp"

namespace unitddpm {

inline constexpr char kContainerMagic[8] = {'U', 'D', 'D', 'P', 'M', 'T', 'R', '1'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct TensorContainer {
  std::uint32_t version = kContainerVersion;
  std::uint64_t step = 0;
  std::string config;
  RngState rng{};
  std::vector<TensorRecord> records;

  void add(std::string name, const Tensor& t) {
    records.push_back({std::move(name), t.shape(), {t.values().begin(), t.values().end()}});
  }

  const TensorRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }

  const TensorRecord& at(const std::string& name) const {
    const auto* r = find(name);
    if (!r) throw IoError("container has no record named '" + name + "'");
    return *r;
  }
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(static_cast<std::uint64_t>(v) >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw IoError("container truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::size_t limit) {
  const auto n = get_le<std::uint32_t>(is);
  if (n > limit) throw IoError("container string length " + std::to_string(n) + " is implausible");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IoError("container truncated");
  return s;
}

}  // namespace detail

inline void write_container(const std::filesystem::path& path, const TensorContainer& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(kContainerMagic, sizeof(kContainerMagic));
  detail::put_le<std::uint32_t>(os, c.version);
  detail::put_le<std::uint64_t>(os, c.step);
  detail::put_string(os, c.config);
  detail::put_le<std::uint64_t>(os, c.rng.key);
  detail::put_le<std::uint64_t>(os, c.rng.counter);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(c.records.size()));
  for (const auto& r : c.records) {
    require(r.values.size() == shape_numel(r.shape), "record '" + r.name + "' has inconsistent extents");
    detail::put_string(os, r.name);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) detail::put_le<std::uint64_t>(os, e);
    for (double v : r.values) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw IoError("failed while writing '" + path.string() + "'");
}

inline TensorContainer read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kContainerMagic, 8) != 0)
    throw IoError("'" + path.string() + "' is not a tensor-record container");
  TensorContainer c;
  c.version = detail::get_le<std::uint32_t>(is);
  if (c.version != kContainerVersion)
    throw IoError("unsupported container version " + std::to_string(c.version));
  c.step = detail::get_le<std::uint64_t>(is);
  c.config = detail::get_string(is, 1u << 24);
  c.rng.key = detail::get_le<std::uint64_t>(is);
  c.rng.counter = detail::get_le<std::uint64_t>(is);
  const auto n = detail::get_le<std::uint32_t>(is);
  c.records.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    TensorRecord r;
    r.name = detail::get_string(is, 1u << 16);
    const auto rank = detail::get_le<std::uint32_t>(is);
    if (rank > 16) throw IoError("record '" + r.name + "' has implausible rank");
    for (std::uint32_t d = 0; d < rank; ++d) r.shape.push_back(detail::get_le<std::uint64_t>(is));
    const std::size_t count = shape_numel(r.shape);
    if (count > (std::size_t{1} << 32)) throw IoError("record '" + r.name + "' is implausibly large");
    r.values.resize(count);
    for (auto& v : r.values) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
    c.records.push_back(std::move(r));
  }
  return c;
}

// Copies the record values into an existing tensor after checking extents.
inline void load_into(const TensorContainer& c, const std::string& name, Tensor& dst) {
  const auto& r = c.at(name);
  if (r.shape != dst.shape())
    throw IoError("record '" + name + "' has shape " + shape_str(r.shape) + " but the model expects " +
                  shape_str(dst.shape()));
  std::copy(r.values.begin(), r.values.end(), dst.mutable_values().begin());
}

}  // namespace unitddpm
