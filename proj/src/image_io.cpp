#include "bisenet/image_io.hpp"

#include <cctype>
#include <cmath>
#include <fstream>

namespace bisenet::image {

namespace {

struct Header {
  char kind = 0;  // '5' or '6'
  int w = 0;
  int h = 0;
  int maxval = 0;
};

int read_header_int(std::istream& is, const std::string& path) {
  int ch = is.peek();
  while (ch != EOF && (std::isspace(ch) || ch == '#')) {
    if (ch == '#') {
      std::string skip;
      std::getline(is, skip);
    } else {
      is.get();
    }
    ch = is.peek();
  }
  long long v = 0;
  bool any = false;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + (is.get() - '0');
    if (v > (1 << 24)) throw ConfigError(path + ": header value too large");
    any = true;
    ch = is.peek();
  }
  if (!any) throw ConfigError(path + ": malformed PNM header");
  return static_cast<int>(v);
}

Header read_header(std::istream& is, const std::string& path) {
  char magic[2] = {0, 0};
  if (!is.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw ConfigError(path + ": not a binary PGM (P5) or PPM (P6) file");
  }
  Header h;
  h.kind = magic[1];
  h.w = read_header_int(is, path);
  h.h = read_header_int(is, path);
  h.maxval = read_header_int(is, path);
  if (h.w < 1 || h.h < 1 || h.maxval < 1 || h.maxval > 65535) {
    throw ConfigError(path + ": invalid PNM dimensions or maxval");
  }
  if (!std::isspace(is.get())) throw ConfigError(path + ": malformed PNM header");
  return h;
}

std::vector<int> read_samples(std::istream& is, std::size_t count, int maxval,
                              const std::string& path) {
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(count * bytes);
  if (!is.read(reinterpret_cast<char*>(raw.data()),
               static_cast<std::streamsize>(raw.size()))) {
    throw ConfigError(path + ": truncated pixel data");
  }
  std::vector<int> out(count);
  for (std::size_t i = 0; i < count; ++i)
    out[i] = bytes == 1 ? raw[i] : (raw[2 * i] << 8) | raw[2 * i + 1];
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open '" + path.string() + "' for writing");
  return os;
}

}  // namespace

Tensor<float> read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open image '" + path.string() + "'");
  const Header h = read_header(is, path.string());
  const int c = h.kind == '5' ? 1 : 3;
  const auto samples = read_samples(is, static_cast<std::size_t>(h.w) * h.h * c,
                                    h.maxval, path.string());
  Tensor<float> out({1, c, h.h, h.w});
  for (int y = 0; y < h.h; ++y)
    for (int x = 0; x < h.w; ++x)
      for (int ch = 0; ch < c; ++ch)
        out.at(0, ch, y, x) =
            static_cast<float>(samples[(static_cast<std::size_t>(y) * h.w + x) * c + ch]) /
            static_cast<float>(h.maxval);
  return out;
}

void write_pnm(const std::filesystem::path& path, const Tensor<float>& image) {
  const Shape& s = image.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) {
    throw ConfigError("write_pnm expects a (1, 1|3, h, w) tensor, got " + to_string(s));
  }
  auto os = open_out(path);
  os << (s.c == 1 ? "P5" : "P6") << '\n' << s.w << ' ' << s.h << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(s.h) * s.w * s.c);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < s.c; ++c) {
        const float v = std::clamp(image.at(0, c, y, x), 0.0f, 1.0f);
        buf[(static_cast<std::size_t>(y) * s.w + x) * s.c + c] =
            static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void write_label_pgm(const std::filesystem::path& path, const LabelMap& labels) {
  if (labels.n != 1) throw ConfigError("label PGM holds a single map");
  std::vector<unsigned char> buf(labels.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const std::int32_t v = labels.data[i];
    if (v < 0 || v > 255) throw ConfigError("label " + std::to_string(v) + " does not fit a PGM");
    buf[i] = static_cast<unsigned char>(v);
  }
  auto os = open_out(path);
  os << "P5\n" << labels.w << ' ' << labels.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

LabelMap read_label_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open '" + path.string() + "'");
  const Header h = read_header(is, path.string());
  if (h.kind != '5') throw ConfigError(path.string() + ": label maps must be P5");
  const auto samples =
      read_samples(is, static_cast<std::size_t>(h.w) * h.h, h.maxval, path.string());
  LabelMap out(1, h.h, h.w);
  std::copy(samples.begin(), samples.end(), out.data.begin());
  return out;
}

}  // namespace bisenet::image
