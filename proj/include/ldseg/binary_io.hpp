#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ldseg/errors.hpp"

namespace ldseg::binary {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<std::byte, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <typename T>
void write(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void write_array(std::ostream& os, std::span<const T> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) write(os, v);
  }
}

template <typename T>
T read(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError(std::string("truncated file while reading ") + what);
  return to_little(v);
}

template <typename T>
void read_array(std::istream& is, std::span<T> out, const char* what) {
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes()));
  if (!is) throw FormatError(std::string("truncated file while reading ") + what);
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : out) v = to_little(v);
  }
}

}  // namespace ldseg::binary
