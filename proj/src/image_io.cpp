#include "capsdense/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "capsdense/error.hpp"

namespace capsdense {

void write_pgm(const std::string& path, int width, int height, const float* pixels) {
  if (width < 1 || height < 1) throw ContractError("write_pgm: extents must be positive");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("write_pgm: cannot write '" + path + "'");
  f << "P5\n" << width << " " << height << "\n255\n";
  std::vector<uint8_t> row(static_cast<size_t>(width));
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const float v = std::clamp(pixels[y * width + x], 0.0f, 1.0f);
      row[static_cast<size_t>(x)] = static_cast<uint8_t>(v * 255.0f + 0.5f);
    }
    f.write(reinterpret_cast<const char*>(row.data()), width);
  }
  if (!f) throw ConfigError("write_pgm: write failed for '" + path + "'");
}

namespace {

// Next header token, skipping whitespace and '#' comment lines.
int next_int(std::istream& in, const std::string& path, const char* what) {
  for (;;) {
    const int c = in.peek();
    if (c == EOF) throw FormatError("'" + path + "': missing " + what + " in header");
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    if (c == '#') {
      std::string line;
      std::getline(in, line);
      continue;
    }
    break;
  }
  int v = 0;
  if (!(in >> v)) throw FormatError("'" + path + "': malformed " + what + " in header");
  return v;
}

}  // namespace

PgmImage read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  char m0 = 0, m1 = 0;
  f.get(m0).get(m1);
  if (m0 != 'P' || m1 != '5')
    throw FormatError("'" + path + "': bad magic at byte 0, expected \"P5\"");
  PgmImage img;
  img.width = next_int(f, path, "width");
  img.height = next_int(f, path, "height");
  const int maxval = next_int(f, path, "maxval");
  if (img.width < 1 || img.height < 1 || maxval < 1 || maxval > 255)
    throw FormatError("'" + path + "': unsupported header (" + std::to_string(img.width) + "x" +
                      std::to_string(img.height) + ", maxval " + std::to_string(maxval) + ")");
  f.get();  // single whitespace byte after maxval
  const size_t n = static_cast<size_t>(img.width) * static_cast<size_t>(img.height);
  std::vector<uint8_t> raw(n);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(f.gcount()) != n)
    throw FormatError("'" + path + "': expected " + std::to_string(n) + " pixel bytes, got " +
                      std::to_string(f.gcount()));
  img.pixels.resize(n);
  for (size_t i = 0; i < n; ++i)
    img.pixels[i] = static_cast<float>(raw[i]) / static_cast<float>(maxval);
  return img;
}

}  // namespace capsdense
