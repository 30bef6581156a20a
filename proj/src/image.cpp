#include "msimil/image.hpp"

#include <png.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "msimil/common.hpp"
#include "msimil/ioutil.hpp"

namespace msimil {

namespace {

struct PngReadCtx {
  const uint8_t* data;
  size_t size;
  size_t pos;
};

void png_mem_read(png_structp png, png_bytep out, png_size_t len) {
  auto* ctx = static_cast<PngReadCtx*>(png_get_io_ptr(png));
  if (ctx->pos + len > ctx->size) png_error(png, "png: truncated stream");
  std::memcpy(out, ctx->data + ctx->pos, len);
  ctx->pos += len;
}

void png_vec_write(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

void png_noop_flush(png_structp) {}

constexpr char kRawMagic[4] = {'R', 'A', 'W', 'P'};

uint32_t read_u32le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

void put_u32le(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

}  // namespace

ImageU8 load_png(const std::string& path) {
  const auto bytes = read_binary_file(path);
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8))
    throw DataError("not a PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }

  ImageU8 img;
  std::vector<png_bytep> rows;
  PngReadCtx ctx{bytes.data(), bytes.size(), 0};
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG: " + path);
  }
  png_set_read_fn(png, &ctx, png_mem_read);
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);

  // Normalize everything to 8-bit RGB.
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  img = ImageU8(static_cast<int>(h), static_cast<int>(w));
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y)
    rows[y] = img.px.data() + static_cast<size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void save_png(const ImageU8& img, const std::string& path) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  std::vector<uint8_t> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encode failed: " + path);
  }
  png_set_write_fn(png, &out, png_vec_write, png_noop_flush);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.px.data() + static_cast<size_t>(y) * img.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  atomic_write_file(path, out.data(), out.size());
}

ImageU8 load_raw_planar(const std::string& path) {
  const auto bytes = read_binary_file(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kRawMagic, 4) != 0)
    throw DataError("not a raw planar RGB file: " + path);
  const uint32_t w = read_u32le(bytes.data() + 4);
  const uint32_t h = read_u32le(bytes.data() + 8);
  const size_t plane = static_cast<size_t>(w) * h;
  if (bytes.size() != 12 + 3 * plane)
    throw DataError("raw planar RGB size mismatch: " + path);
  ImageU8 img(static_cast<int>(h), static_cast<int>(w));
  const uint8_t* r = bytes.data() + 12;
  const uint8_t* g = r + plane;
  const uint8_t* b = g + plane;
  for (size_t i = 0; i < plane; ++i) {
    img.px[i * 3 + 0] = r[i];
    img.px[i * 3 + 1] = g[i];
    img.px[i * 3 + 2] = b[i];
  }
  return img;
}

void save_raw_planar(const ImageU8& img, const std::string& path) {
  const size_t plane = static_cast<size_t>(img.width) * img.height;
  std::vector<uint8_t> out;
  out.reserve(12 + 3 * plane);
  out.insert(out.end(), kRawMagic, kRawMagic + 4);
  put_u32le(out, static_cast<uint32_t>(img.width));
  put_u32le(out, static_cast<uint32_t>(img.height));
  out.resize(12 + 3 * plane);
  uint8_t* r = out.data() + 12;
  uint8_t* g = r + plane;
  uint8_t* b = g + plane;
  for (size_t i = 0; i < plane; ++i) {
    r[i] = img.px[i * 3 + 0];
    g[i] = img.px[i * 3 + 1];
    b[i] = img.px[i * 3 + 2];
  }
  atomic_write_file(path, out.data(), out.size());
}

ImageU8 load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  char magic[4] = {0, 0, 0, 0};
  in.read(magic, 4);
  in.close();
  if (std::memcmp(magic, kRawMagic, 4) == 0) return load_raw_planar(path);
  return load_png(path);
}

void save_image(const ImageU8& img, const std::string& path) {
  const auto ext = std::filesystem::path(path).extension().string();
  if (ext == ".png") save_png(img, path);
  else save_raw_planar(img, path);
}

}  // namespace msimil
