#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace georank::detail {

// Little-endian binary IO. The formats are LE by definition; this targets LE
// hosts and asserts that at startup of each reader/writer.
inline void check_le() {
  const std::uint32_t probe = 1;
  char b;
  std::memcpy(&b, &probe, 1);
  if (b != 1) throw std::runtime_error("big-endian hosts are not supported by the binary formats");
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw std::runtime_error("truncated binary file");
  return v;
}

inline void write_f32(std::ostream& os, const float* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
}

inline void read_f32(std::istream& is, float* data, std::size_t n) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * 4));
  if (!is) throw std::runtime_error("truncated binary file");
}

inline std::ofstream open_out(const std::string& path) {
  check_le();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  check_le();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  return is;
}

inline void expect_magic(std::istream& is, const char* magic) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0) {
    throw std::runtime_error(std::string("bad magic, expected ") + magic);
  }
}

}  // namespace georank::detail
