#pragma once

// Binary tensor dump:
//   magic "BT2\0" | u8 dtype (0 = f32, 1 = f64) | u8 rank |
//   rank x little-endian u32 dims | row-major little-endian payload.

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "bisenet/tensor.hpp"

namespace bisenet::bt2 {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

template <typename T>
void write(std::ostream& os, const Tensor<T>& t);
template <typename T>
void save(const std::filesystem::path& path, const Tensor<T>& t);

/// Reads a dump of any dtype, converting to T. Ranks below 4 are right
/// aligned into (n, c, h, w). `stored` receives the on-disk dtype.
template <typename T>
Tensor<T> read(std::istream& is, DType* stored = nullptr);
template <typename T>
Tensor<T> load(const std::filesystem::path& path, DType* stored = nullptr);

}  // namespace bisenet::bt2
