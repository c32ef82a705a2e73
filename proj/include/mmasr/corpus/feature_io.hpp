#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mmasr/corpus/types.hpp"

// Feature file layout: u32 rows, u32 cols (little-endian), then rows*cols
// little-endian float32 values in row-major order.

namespace mmasr::corpus {

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  v = to_le(v);
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return to_le(v);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

}  // namespace detail

inline void write_feature_file(const std::filesystem::path& path, const FeatureMatrix& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write feature file " + path.string());
  detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
  } else {
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f32(os, m.data()[i]);
  }
  if (!os) throw IoError("failed writing feature file " + path.string());
}

inline FeatureMatrix read_feature_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing feature file " + path.string());
  const auto rows = detail::get_u32(is);
  const auto cols = detail::get_u32(is);
  if (!is) throw IoError("truncated feature header in " + path.string());
  FeatureMatrix m(rows, cols);
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
  } else {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = detail::get_f32(is);
  }
  if (!is) throw IoError("truncated feature data in " + path.string());
  return m;
}

}  // namespace mmasr::corpus
