#include "bisenet/bt2.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace bisenet::bt2 {

namespace {

constexpr std::array<char, 4> kMagic{'B', 'T', '2', '\0'};

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<unsigned char, sizeof(U)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> bytes;
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(U))) {
    throw ConfigError("bt2: truncated stream");
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  U v;
  std::memcpy(&v, bytes.data(), sizeof(U));
  return v;
}

}  // namespace

template <typename T>
void write(std::ostream& os, const Tensor<T>& t) {
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  put_le<std::uint8_t>(os, 4);
  const Shape s = t.shape();
  for (int d : {s.n, s.c, s.h, s.w}) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.size() * sizeof(T)));
  } else {
    for (T v : t.span()) put_le<T>(os, v);
  }
  if (!os) throw ConfigError("bt2: write failed");
}

template <typename T>
void save(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("bt2: cannot open '" + path.string() + "' for writing");
  write(os, t);
}

template <typename T>
Tensor<T> read(std::istream& is, DType* stored) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw ConfigError("bt2: bad magic");
  }
  const auto code = get_le<std::uint8_t>(is);
  if (code > 1) throw ConfigError("bt2: unknown dtype code " + std::to_string(code));
  const DType dtype = static_cast<DType>(code);
  const auto rank = get_le<std::uint8_t>(is);
  if (rank < 1 || rank > 4) {
    throw ConfigError("bt2: unsupported rank " + std::to_string(rank));
  }
  std::array<int, 4> dims{1, 1, 1, 1};
  for (int i = 0; i < rank; ++i) {
    const auto d = get_le<std::uint32_t>(is);
    if (d == 0 || d > 0x7fffffffU) throw ConfigError("bt2: invalid dimension");
    dims[4 - rank + i] = static_cast<int>(d);
  }
  const Shape shape{dims[0], dims[1], dims[2], dims[3]};
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (dtype == DType::F32) {
      out[i] = static_cast<T>(get_le<float>(is));
    } else {
      out[i] = static_cast<T>(get_le<double>(is));
    }
  }
  if (stored) *stored = dtype;
  return out;
}

template <typename T>
Tensor<T> load(const std::filesystem::path& path, DType* stored) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("bt2: cannot open '" + path.string() + "'");
  return read<T>(is, stored);
}

template void write<float>(std::ostream&, const Tensor<float>&);
template void write<double>(std::ostream&, const Tensor<double>&);
template void save<float>(const std::filesystem::path&, const Tensor<float>&);
template void save<double>(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> read<float>(std::istream&, DType*);
template Tensor<double> read<double>(std::istream&, DType*);
template Tensor<float> load<float>(const std::filesystem::path&, DType*);
template Tensor<double> load<double>(const std::filesystem::path&, DType*);

}  // namespace bisenet::bt2
