#pragma once

// Little-endian binary tensor format used by checkpoints:
//   magic "STXT", u32 rank, u64 dims[rank], f64 payload (row-major).
// A named container is a u32 count followed by (u32 name_len, name bytes,
// tensor record) entries.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "stx/error.hpp"
#include "stx/tensor.hpp"

namespace stx {

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw IoError("serialize: write failed");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) throw DataError("serialize: truncated stream");
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  write_bytes(os, b, 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  read_bytes(is, b, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  write_bytes(os, b, 8);
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  read_bytes(is, b, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_u64(os, bits);
}

inline double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

inline void save_tensor(std::ostream& os, const Tensor& t) {
  detail::write_bytes(os, "STXT", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::write_u64(os, d);
  if constexpr (std::endian::native == std::endian::little) {
    detail::write_bytes(os, t.data(), t.size() * sizeof(double));
  } else {
    for (std::size_t i = 0; i < t.size(); ++i) detail::write_f64(os, t.data()[i]);
  }
}

inline Tensor load_tensor(std::istream& is) {
  char magic[4];
  detail::read_bytes(is, magic, 4);
  if (std::memcmp(magic, "STXT", 4) != 0) throw DataError("load_tensor: bad magic");
  const std::uint32_t rank = detail::read_u32(is);
  if (rank > 8) throw DataError("load_tensor: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t total = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<std::size_t>(detail::read_u64(is));
    if (shape[i] == 0) throw DataError("load_tensor: zero dimension");
    total *= shape[i];
  }
  std::vector<double> values(total);
  if constexpr (std::endian::native == std::endian::little) {
    detail::read_bytes(is, values.data(), total * sizeof(double));
  } else {
    for (std::size_t i = 0; i < total; ++i) values[i] = detail::read_f64(is);
  }
  return Tensor(std::move(shape), std::move(values));
}

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_named_tensors(std::ostream& os, const NamedTensors& entries) {
  detail::write_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    detail::write_bytes(os, name.data(), name.size());
    save_tensor(os, tensor);
  }
}

inline NamedTensors load_named_tensors(std::istream& is) {
  const std::uint32_t count = detail::read_u32(is);
  NamedTensors entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = detail::read_u32(is);
    if (len > 4096) throw DataError("load_named_tensors: implausible name length");
    std::string name(len, '\0');
    detail::read_bytes(is, name.data(), len);
    entries.emplace_back(std::move(name), load_tensor(is));
  }
  return entries;
}

}  // namespace stx
