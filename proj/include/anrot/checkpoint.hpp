#pragma once

// Binary checkpoint ("ANRC"):
//   magic "ANRC" | u32 version | u32 len + UTF-8 JSON descriptor |
//   u32 tensor count | per tensor (canonical name order):
//     u32 name len | name | u32 rank | u32 dims[rank] | f32 data
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "anrot/errors.hpp"
#include "anrot/network.hpp"

namespace anrot {

inline constexpr char kCheckpointMagic[4] = {'A', 'N', 'R', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw ConfigError("unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

inline std::string get_bytes(std::istream& is, std::uint32_t n) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw ConfigError("unexpected end of file");
  return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[4], const std::string& what) {
  char m[4];
  if (!is.read(m, 4) || std::memcmp(m, magic, 4) != 0)
    throw ConfigError(what + ": bad magic (expected \"" + std::string(magic, 4) + "\")");
}

}  // namespace io

/// The descriptor holds the architecture plus the state's meta block.
template <class T>
std::string checkpoint_descriptor(const ModelState<T>& st) {
  nlohmann::json j = st.arch.to_json();
  if (!st.meta.empty()) j["meta"] = st.meta;
  return j.dump();
}

template <class T>
void save_checkpoint(std::ostream& os, const ModelState<T>& st) {
  os.write(kCheckpointMagic, 4);
  io::put_u32(os, kCheckpointVersion);
  const std::string desc = checkpoint_descriptor(st);
  io::put_u32(os, static_cast<std::uint32_t>(desc.size()));
  os.write(desc.data(), static_cast<std::streamsize>(desc.size()));
  io::put_u32(os, static_cast<std::uint32_t>(st.params.size()));
  for (const auto& [name, t] : st.params) {
    io::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.dims()) io::put_u32(os, static_cast<std::uint32_t>(d));
    for (T v : t.data()) io::put_f32(os, static_cast<float>(v));
  }
}

template <class T>
ModelState<T> load_checkpoint(std::istream& is) {
  io::expect_magic(is, kCheckpointMagic, "checkpoint");
  const auto version = io::get_u32(is);
  if (version != kCheckpointVersion)
    throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
  nlohmann::json desc;
  try {
    desc = nlohmann::json::parse(io::get_bytes(is, io::get_u32(is)));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint: bad descriptor: ") + e.what());
  }
  ModelState<T> st;
  st.arch = Architecture::from_json(desc);
  if (desc.contains("meta")) st.meta = desc["meta"];
  const auto count = io::get_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = io::get_bytes(is, io::get_u32(is));
    const auto rank = io::get_u32(is);
    if (rank < 1 || rank > 4) throw ConfigError("checkpoint: tensor '" + name + "' has bad rank");
    std::vector<int> dims(rank);
    for (auto& d : dims) d = static_cast<int>(io::get_u32(is));
    Tensor<T> t(dims);
    for (auto& v : t.storage()) v = static_cast<T>(io::get_f32(is));
    if (!t.all_finite()) throw ConfigError("checkpoint: tensor '" + name + "' is not finite");
    st.params.emplace(std::move(name), std::move(t));
  }
  // every expected tensor present with the expected shape
  for (const auto& spec : detail::parameter_specs(st.arch)) {
    auto it = st.params.find(spec.name);
    if (it == st.params.end()) throw ConfigError("checkpoint: missing tensor '" + spec.name + "'");
    if (it->second.dims() != spec.dims)
      throw ConfigError("checkpoint: tensor '" + spec.name + "' has shape " +
                        dims_string(it->second.dims()) + ", expected " + dims_string(spec.dims));
  }
  return st;
}

template <class T>
void save_checkpoint(const std::string& path, const ModelState<T>& st) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint '" + path + "'");
  save_checkpoint(os, st);
}

template <class T>
ModelState<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint '" + path + "'");
  return load_checkpoint<T>(is);
}

/// Parameters rounded through the on-disk precision, so an in-memory state
/// matches what a save/load cycle would give.
template <class T>
ModelState<T> round_to_storage(ModelState<T> st) {
  for (auto& [name, t] : st.params)
    for (auto& v : t.storage()) v = static_cast<T>(static_cast<float>(v));
  return st;
}

}  // namespace anrot
