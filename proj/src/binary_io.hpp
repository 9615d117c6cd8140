#pragma once

// Little-endian primitive readers/writers shared by the binary file formats.

#include "uwloc/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

namespace uwloc::detail {

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

/// Returns false on clean EOF before the first byte; throws on a truncated value.
template <typename T>
bool try_get_le(std::istream& in, T& value) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (in.gcount() == 0) return false;
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw data_error("truncated binary record");
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  std::memcpy(&value, bytes, sizeof(T));
  return true;
}

template <typename T>
T get_le(std::istream& in) {
  T value{};
  if (!try_get_le(in, value)) throw data_error("unexpected end of file");
  return value;
}

inline void put_floats(std::ostream& out, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_le(out, data[i]);
  }
}

inline void get_floats(std::istream& in, float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    const auto bytes = static_cast<std::streamsize>(n * sizeof(float));
    in.read(reinterpret_cast<char*>(data), bytes);
    if (in.gcount() != bytes) throw data_error("truncated float block");
  } else {
    for (std::size_t i = 0; i < n; ++i) data[i] = get_le<float>(in);
  }
}

inline void put_string(std::ostream& out, const std::string& s) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, std::size_t max_len = 1u << 24) {
  const auto n = get_le<std::uint32_t>(in);
  if (n > max_len) throw data_error("string field too long");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (in.gcount() != static_cast<std::streamsize>(n)) throw data_error("truncated string");
  return s;
}

}  // namespace uwloc::detail
