#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hakd/tensor.hpp"

namespace hakd {

// Binary tensor dump, shared by every module:
//   magic "HAKD" | version u32 = 1 | dtype u8 (0 = f32, 1 = f64) | ndim u8 |
//   dims u64 little-endian each | payload row-major little-endian.
inline constexpr char kTensorMagic[4] = {'H', 'A', 'K', 'D'};
inline constexpr std::uint32_t kTensorVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "tensor i/o assumes a little-endian host");

namespace detail {

template <typename T>
constexpr std::uint8_t dtype_code();
template <>
constexpr std::uint8_t dtype_code<float>() { return 0; }
template <>
constexpr std::uint8_t dtype_code<double>() { return 1; }

inline void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::ifstream& is, void* p, std::size_t n, const std::string& path) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw io_error("truncated tensor file: " + path);
}

}  // namespace detail

template <typename T>
inline void save_tensor(const Tensor<T>& t, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for write: " + path.string());
  detail::write_bytes(os, kTensorMagic, 4);
  std::uint32_t version = kTensorVersion;
  detail::write_bytes(os, &version, 4);
  std::uint8_t dtype = detail::dtype_code<T>();
  detail::write_bytes(os, &dtype, 1);
  std::uint8_t ndim = static_cast<std::uint8_t>(t.ndim());
  detail::write_bytes(os, &ndim, 1);
  for (std::size_t d : t.dims()) {
    std::uint64_t d64 = d;
    detail::write_bytes(os, &d64, 8);
  }
  detail::write_bytes(os, t.data(), t.size() * sizeof(T));
  if (!os) throw io_error("short write: " + path.string());
}

// Loads a dump of either dtype and converts to T.
template <typename T>
inline Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open for read: " + path.string());
  char magic[4];
  detail::read_bytes(is, magic, 4, path.string());
  if (std::memcmp(magic, kTensorMagic, 4) != 0)
    throw io_error("bad magic in tensor file: " + path.string());
  std::uint32_t version = 0;
  detail::read_bytes(is, &version, 4, path.string());
  if (version != kTensorVersion)
    throw io_error("unsupported tensor version " + std::to_string(version) + ": " + path.string());
  std::uint8_t dtype = 0, ndim = 0;
  detail::read_bytes(is, &dtype, 1, path.string());
  detail::read_bytes(is, &ndim, 1, path.string());
  if (dtype > 1) throw io_error("unknown dtype code in " + path.string());
  Dims dims(ndim);
  for (std::size_t i = 0; i < ndim; ++i) {
    std::uint64_t d64 = 0;
    detail::read_bytes(is, &d64, 8, path.string());
    dims[i] = static_cast<std::size_t>(d64);
  }
  const std::size_t count = numel(dims);
  if (dtype == detail::dtype_code<T>()) {
    Tensor<T> t(dims);
    detail::read_bytes(is, t.data(), count * sizeof(T), path.string());
    return t;
  }
  if (dtype == 0) {
    std::vector<float> raw(count);
    detail::read_bytes(is, raw.data(), count * sizeof(float), path.string());
    Tensor<T> t(dims);
    for (std::size_t i = 0; i < count; ++i) t[i] = static_cast<T>(raw[i]);
    return t;
  }
  std::vector<double> raw(count);
  detail::read_bytes(is, raw.data(), count * sizeof(double), path.string());
  Tensor<T> t(dims);
  for (std::size_t i = 0; i < count; ++i) t[i] = static_cast<T>(raw[i]);
  return t;
}

}  // namespace hakd
