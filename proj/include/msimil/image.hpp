#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace msimil {

/// Interleaved 8-bit RGB raster.
struct ImageU8 {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> px;  // height*width*3, row-major, RGB

  ImageU8() = default;
  ImageU8(int h, int w, uint8_t fill = 0)
      : height(h), width(w), px(static_cast<size_t>(h) * w * 3, fill) {}

  uint8_t& at(int y, int x, int c) {
    return px[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  uint8_t at(int y, int x, int c) const {
    return px[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  bool empty() const { return px.empty(); }
};

/// Reads a PNG or raw planar RGB file, dispatching on the file's magic bytes.
ImageU8 load_image(const std::string& path);

/// Writes by extension: ".png" -> PNG, anything else -> raw planar RGB.
/// Both writers go through a temp file + rename.
void save_image(const ImageU8& img, const std::string& path);

ImageU8 load_png(const std::string& path);
void save_png(const ImageU8& img, const std::string& path);

/// Raw planar RGB: magic "RAWP", u32 LE width, u32 LE height, then the R, G
/// and B planes (height*width bytes each).
ImageU8 load_raw_planar(const std::string& path);
void save_raw_planar(const ImageU8& img, const std::string& path);

}  // namespace msimil
