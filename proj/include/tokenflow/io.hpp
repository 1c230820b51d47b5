#pragma once

// Little-endian binary helpers and the DFT1 tensor format:
//   "DFT1" | u8 rank | rank x u32 extents | f32 row-major payload

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>

#include "tokenflow/tensor.hpp"

namespace tokenflow::io {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw DataError("write failed");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n, std::string_view what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw DataError("truncated input while reading " + std::string(what));
  }
}

template <typename U>
void write_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  std::array<unsigned char, sizeof(U)> b{};
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  write_bytes(os, b.data(), b.size());
}

template <typename U>
U read_le(std::istream& is, std::string_view what) {
  static_assert(std::is_unsigned_v<U>);
  std::array<unsigned char, sizeof(U)> b{};
  read_bytes(is, b.data(), b.size(), what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

inline void write_f32(std::ostream& os, double v) {
  write_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline double read_f32(std::istream& is, std::string_view what) {
  return static_cast<double>(std::bit_cast<float>(read_le<std::uint32_t>(is, what)));
}

inline void expect_magic(std::istream& is, std::string_view magic, std::string_view what) {
  std::array<char, 4> m{};
  read_bytes(is, m.data(), 4, what);
  if (std::string_view(m.data(), 4) != magic) {
    throw DataError(std::string(what) + ": bad magic, expected " + std::string(magic));
  }
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw DimensionError("DFT1: rank exceeds 255");
  write_bytes(os, "DFT1", 4);
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    if (e > 0xffffffffULL) throw DimensionError("DFT1: extent exceeds u32");
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  }
  for (double v : t.data()) write_f32(os, v);
}

inline Tensor read_tensor(std::istream& is, std::string_view what = "DFT1 tensor") {
  expect_magic(is, "DFT1", what);
  const auto rank = read_le<std::uint8_t>(is, what);
  Shape shape(rank);
  for (auto& e : shape) e = read_le<std::uint32_t>(is, what);
  Tensor t(shape);
  for (double& v : t.storage()) v = read_f32(is, what);
  return t;
}

// Values as they come back from a DFT1 round trip (f32 rounding).
inline Tensor round_to_f32(Tensor t) {
  for (double& v : t.storage()) v = static_cast<double>(static_cast<float>(v));
  return t;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for reading: " + path.string());
  return is;
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  auto os = open_out(path);
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  auto is = open_in(path);
  return read_tensor(is, path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  auto is = open_in(path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  auto os = open_out(path);
  write_bytes(os, content.data(), content.size());
}

}  // namespace tokenflow::io
