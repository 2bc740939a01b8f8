#pragma once

// Little-endian raw binary helpers shared by the dataset and checkpoint formats.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "deas/error.hpp"

namespace deas::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume little-endian hosts");

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("unexpected end of file");
  return v;
}

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), magic.size()); }

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), got.size());
  if (!is || got != magic) throw FormatError("bad magic, expected " + std::string(magic));
}

inline void write_string(std::ostream& os, std::string_view s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
  auto n = read_pod<std::uint64_t>(is);
  if (n > (1u << 26)) throw FormatError("string length out of range");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw FormatError("unexpected end of file");
  return s;
}

template <class Derived>
void write_doubles(std::ostream& os, const Eigen::DenseBase<Derived>& a) {
  // Eigen storage may not be contiguous for expressions; copy to a plain array.
  Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic> tmp = a.derived().template cast<double>();
  os.write(reinterpret_cast<const char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * sizeof(double)));
}

template <class Derived>
void read_doubles(std::istream& is, Eigen::PlainObjectBase<Derived>& a) {
  is.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
  if (!is) throw FormatError("unexpected end of file");
}

}  // namespace deas::io
