#pragma once

#include <string>
#include <vector>

namespace capsdense {

// Binary P5 PGM, maxval 255. Pixels are row-major floats clamped to [0,1].
void write_pgm(const std::string& path, int width, int height, const float* pixels);

struct PgmImage {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;  // [0,1]
};

// Reads binary P5 (comments allowed in the header). FormatError on
// anything else.
PgmImage read_pgm(const std::string& path);

}  // namespace capsdense
