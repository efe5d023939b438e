#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

#include "sdi/errors.hpp"

namespace sdi::binary {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

template <typename T>
void put(std::ostream& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  char buf[sizeof(T)];
  if (!in.read(buf, sizeof(T)))
    throw ConfigError("unexpected end of binary stream");
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

} // namespace sdi::binary
