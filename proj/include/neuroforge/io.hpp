#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "neuroforge/errors.hpp"
#include "neuroforge/volume.hpp"

// Volume container: <name>.raw (little-endian, row-major z,y,x) plus a
// <name>.json sidecar {"dtype", "shape": [D,H,W], "resolution_nm": [rz,ry,rx]}.

namespace neuroforge::io {

static_assert(std::endian::native == std::endian::little,
              "raw payloads are written in host order, which must be little-endian");

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class DType { F32, U32, U8 };

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::F32: return "f32";
    case DType::U32: return "u32";
    case DType::U8: return "u8";
  }
  return "?";
}

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "u32") return DType::U32;
  if (s == "u8") return DType::U8;
  throw DataError("unsupported dtype '" + s + "'");
}

inline std::size_t dtype_size(DType t) { return t == DType::U8 ? 1 : 4; }

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::F32;
  else if constexpr (std::is_same_v<T, std::uint32_t>) return DType::U32;
  else {
    static_assert(std::is_same_v<T, std::uint8_t>, "unsupported element type");
    return DType::U8;
  }
}

/// Strips a trailing .raw or .json so either file, or the bare stem, names the pair.
inline fs::path container_base(const fs::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".raw" || ext == ".json") return fs::path(p).replace_extension();
  return p;
}

inline fs::path with_suffix(const fs::path& base, const char* suffix) {
  return fs::path(base.string() + suffix);
}

inline std::vector<char> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const void* bytes, std::size_t n) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
  if (!out) throw DataError("short write to " + p.string());
}

inline void write_text(const fs::path& p, const std::string& s) { write_file(p, s.data(), s.size()); }

inline json read_json(const fs::path& p) {
  const auto bytes = read_file(p);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

struct Descriptor {
  DType dtype = DType::F32;
  Shape3 shape{};
  Resolution resolution{};
};

inline json descriptor_json(const Descriptor& d) {
  return json{{"dtype", dtype_name(d.dtype)},
              {"shape", {d.shape.d, d.shape.h, d.shape.w}},
              {"resolution_nm", {d.resolution.r_z, d.resolution.r_xy, d.resolution.r_xy}}};
}

inline Descriptor parse_descriptor(const json& j, const std::string& where) {
  try {
    Descriptor d;
    d.dtype = parse_dtype(j.at("dtype").get<std::string>());
    const auto shp = j.at("shape").get<std::vector<int>>();
    if (shp.size() != 3) throw DataError(where + ": shape must have 3 entries");
    d.shape = {shp[0], shp[1], shp[2]};
    if (d.shape.d < 1 || d.shape.h < 1 || d.shape.w < 1)
      throw DataError(where + ": shape entries must be positive");
    if (j.contains("resolution_nm")) {
      const auto r = j.at("resolution_nm").get<std::vector<double>>();
      if (r.size() != 3) throw DataError(where + ": resolution_nm must have 3 entries");
      if (r[1] != r[2]) throw DataError(where + ": lateral resolution must be isotropic");
      d.resolution = Resolution(r[0], r[1]);
    }
    return d;
  } catch (const json::exception& e) {
    throw DataError(where + ": inconsistent descriptor: " + e.what());
  }
}

inline Descriptor read_descriptor(const fs::path& path) {
  const auto base = container_base(path);
  const auto side = with_suffix(base, ".json");
  if (!fs::exists(side)) throw DataError("missing descriptor " + side.string());
  return parse_descriptor(read_json(side), side.string());
}

template <typename T>
void save_volume(const fs::path& path, const Grid<T>& g) {
  const auto base = container_base(path);
  const Descriptor d{dtype_of<T>(), g.shape(), g.resolution()};
  write_file(with_suffix(base, ".raw"), g.data().data(), g.size() * sizeof(T));
  write_text(with_suffix(base, ".json"), descriptor_json(d).dump(2) + "\n");
}

template <typename T>
Grid<T> load_as(const fs::path& path) {
  const auto base = container_base(path);
  const auto d = read_descriptor(base);
  if (d.dtype != dtype_of<T>())
    throw DataError(base.string() + ": expected dtype " + dtype_name(dtype_of<T>()) + ", found " +
                    dtype_name(d.dtype));
  const auto raw = with_suffix(base, ".raw");
  const auto bytes = read_file(raw);
  if (bytes.size() != d.shape.size() * sizeof(T))
    throw DataError(raw.string() + ": size " + std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(d.shape.size() * sizeof(T)));
  std::vector<T> data(d.shape.size());
  std::memcpy(data.data(), bytes.data(), bytes.size());
  if constexpr (std::is_floating_point_v<T>) {
    for (auto v : data)
      if (!std::isfinite(v)) throw DataError(raw.string() + ": non-finite sample");
  }
  return Grid<T>(d.shape, std::move(data), d.resolution);
}

using AnyGrid = std::variant<Volume, LabelVolume, BinaryGrid>;

/// Loads whatever element type the descriptor declares.
inline AnyGrid load_volume(const fs::path& path) {
  switch (read_descriptor(path).dtype) {
    case DType::F32: return load_as<float>(path);
    case DType::U32: return load_as<std::uint32_t>(path);
    case DType::U8: return load_as<std::uint8_t>(path);
  }
  throw DataError("unreachable dtype");
}

/// Loads a mask stored as u8 and checks it only holds {0, 1}.
inline BinaryGrid load_mask(const fs::path& path) {
  auto g = load_as<std::uint8_t>(path);
  for (auto v : g.data())
    if (v > 1) throw DataError(container_base(path).string() + ": mask is not binary");
  return g;
}

/// Label volumes may be stored as u32 or u8.
inline LabelVolume load_labels(const fs::path& path) {
  const auto d = read_descriptor(path);
  if (d.dtype == DType::U32) return load_as<std::uint32_t>(path);
  if (d.dtype == DType::U8) {
    const auto g = load_as<std::uint8_t>(path);
    LabelVolume out(g.shape(), 0u, g.resolution());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i];
    return out;
  }
  throw DataError(container_base(path).string() + ": labels must be u32 or u8");
}

inline void save_condition(const fs::path& base, const ConditionVolume& c) {
  save_volume(with_suffix(base, "_boundary"), c.boundary);
  save_volume(with_suffix(base, "_mito"), c.mito);
}

inline ConditionVolume load_condition(const fs::path& base) {
  return ConditionVolume(load_mask(with_suffix(base, "_boundary")),
                         load_mask(with_suffix(base, "_mito")));
}

/// 64-bit FNV-1a; used as a provenance fingerprint, not for security.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xF];
  return s;
}

inline std::string file_hash(const fs::path& p) {
  const auto bytes = read_file(p);
  return hex64(fnv1a(bytes.data(), bytes.size()));
}

// Framed container shared by checkpoints, signature libraries and feature
// files: "<magic>\n", u64 descriptor length, JSON descriptor, raw payload.

inline void write_framed(const fs::path& p, const std::string& magic, const json& descriptor,
                         const std::vector<char>& payload) {
  const std::string desc = descriptor.dump();
  std::vector<char> buf;
  buf.reserve(magic.size() + 1 + 8 + desc.size() + payload.size());
  buf.insert(buf.end(), magic.begin(), magic.end());
  buf.push_back('\n');
  const std::uint64_t n = desc.size();
  const auto* np = reinterpret_cast<const char*>(&n);
  buf.insert(buf.end(), np, np + 8);
  buf.insert(buf.end(), desc.begin(), desc.end());
  buf.insert(buf.end(), payload.begin(), payload.end());
  write_file(p, buf.data(), buf.size());
}

struct Framed {
  json descriptor;
  std::vector<char> payload;
};

inline Framed read_framed(const fs::path& p, const std::string& magic) {
  const auto bytes = read_file(p);
  const std::size_t head = magic.size() + 1;
  if (bytes.size() < head + 8 || std::memcmp(bytes.data(), magic.data(), magic.size()) != 0 ||
      bytes[magic.size()] != '\n')
    throw DataError(p.string() + ": missing header '" + magic + "'");
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data() + head, 8);
  if (head + 8 + n > bytes.size()) throw DataError(p.string() + ": truncated descriptor");
  Framed f;
  try {
    f.descriptor = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(head + 8),
                               bytes.begin() + static_cast<std::ptrdiff_t>(head + 8 + n));
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": malformed descriptor: " + e.what());
  }
  f.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(head + 8 + n), bytes.end());
  return f;
}

}  // namespace neuroforge::io
