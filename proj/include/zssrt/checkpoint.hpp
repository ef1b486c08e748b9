#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace zssrt {

inline constexpr const char* kCheckpointFormat = "zssrt-ckpt-v1";

struct NamedArray {
  std::string dtype;                 // "f32" or "f64"
  std::vector<std::int64_t> shape;
  std::vector<unsigned char> bytes;  // little-endian payload

  std::size_t count() const;
  template <typename Real>
  static NamedArray from(const std::vector<Real>& values, std::vector<std::int64_t> shape);
  template <typename Real>
  std::vector<Real> to_vector() const;
};

// Named arrays plus JSON metadata. The on-disk layout is
//   "zssrt-ckpt-v1\n" | u64 header length | JSON header | array payloads
// where the header carries `meta` and an ordered array table.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, NamedArray> arrays;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
  const NamedArray& array(const std::string& name) const;
};

}  // namespace zssrt
