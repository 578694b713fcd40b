#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd {

// Weight checkpoint ("DSDW"): magic, version u32, tensor count u32, then
// per tensor: name length u32 + UTF-8 name, rank u32, dims u32 each,
// little-endian f64 payload. Name order is preserved.
namespace ckpt {

constexpr char kMagic[4] = {'D', 'S', 'D', 'W'};
constexpr std::uint32_t kVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: truncated u32 field");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline void write_f64(std::ostream& os, const double* values, std::size_t count) {
  // Little-endian payload; written directly on little-endian hosts.
  static_assert(sizeof(double) == 8);
  os.write(reinterpret_cast<const char*>(values), static_cast<std::streamsize>(count * 8));
}

inline void read_f64(std::istream& is, double* values, std::size_t count) {
  is.read(reinterpret_cast<char*>(values), static_cast<std::streamsize>(count * 8));
  if (!is) throw IoError("checkpoint: truncated tensor payload");
}

inline void save(const std::string& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(tensor.shape.size()));
    for (int d : tensor.shape) write_u32(os, static_cast<std::uint32_t>(d));
    write_f64(os, tensor.data.data(), tensor.numel());
  }
  if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

inline NamedTensors load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("checkpoint: '" + path + "' is not a DSDW file");
  }
  const std::uint32_t version = read_u32(is);
  if (version != kVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = read_u32(is);
  NamedTensors tensors;
  tensors.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw IoError("checkpoint: truncated tensor name");
    const std::uint32_t rank = read_u32(is);
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(read_u32(is));
    Tensor tensor = Tensor::zeros(shape);
    read_f64(is, tensor.data.data(), tensor.numel());
    tensors.emplace_back(std::move(name), std::move(tensor));
  }
  return tensors;
}

inline const Tensor* find(const NamedTensors& tensors, const std::string& name) {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

}  // namespace ckpt
}  // namespace dsd
