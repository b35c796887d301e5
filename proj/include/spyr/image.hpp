#pragma once

// PNG encode/decode and conversions between 8-bit images and float tensors.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "spyr/autograd.hpp"
#include "spyr/error.hpp"
#include "spyr/records.hpp"

namespace spyr {

/// 8-bit pixels as stored in the file. Palette images keep their raw indices.
struct RawPng {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 (gray or index) or 3 (rgb)
  bool indexed = false;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
  std::vector<std::uint8_t> palette;  // rgb triples, indexed images only
};

namespace detail {

struct PngSource {
  const std::string* bytes;
  std::size_t pos;
};

extern "C" inline void png_read_mem(png_structp png, png_bytep out, png_size_t n) {
  auto* src = static_cast<PngSource*>(png_get_io_ptr(png));
  if (src->bytes->size() - src->pos < n) png_error(png, "unexpected end of PNG data");
  std::memcpy(out, src->bytes->data() + src->pos, n);
  src->pos += n;
}

extern "C" inline void png_write_mem(png_structp png, png_bytep data, png_size_t n) {
  auto* sink = static_cast<std::string*>(png_get_io_ptr(png));
  sink->append(reinterpret_cast<const char*>(data), n);
}

extern "C" inline void png_flush_mem(png_structp) {}

extern "C" inline void png_quiet_warning(png_structp, png_const_charp) {}

// libpng reports errors by longjmp; nothing with a destructor is created
// between setjmp and the last libpng call.
inline bool png_decode_raw(const std::string& bytes, RawPng& out, std::vector<png_bytep>& rows) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) return false;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_quiet_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  PngSource src{&bytes, 0};
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_set_read_fn(png, &src, png_read_mem);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) {
    out.indexed = true;
    png_set_packing(png);
    png_colorp pal = nullptr;
    int npal = 0;
    if (png_get_PLTE(png, info, &pal, &npal)) {
      out.palette.resize(static_cast<std::size_t>(npal) * 3);
      for (int i = 0; i < npal; ++i) {
        out.palette[3 * static_cast<std::size_t>(i)] = pal[i].red;
        out.palette[3 * static_cast<std::size_t>(i) + 1] = pal[i].green;
        out.palette[3 * static_cast<std::size_t>(i) + 2] = pal[i].blue;
      }
    }
  } else {
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  out.pixels.resize(rowbytes * out.height);
  rows.resize(out.height);
  for (std::size_t i = 0; i < out.height; ++i) rows[i] = out.pixels.data() + i * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out.channels == 1 || out.channels == 3;
}

inline bool png_encode_raw(const RawPng& img, std::string& sink, std::vector<png_bytep>& rows,
                           std::vector<png_color>& pal) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_quiet_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, &sink, png_write_mem, png_flush_mem);
  const int color = img.indexed ? PNG_COLOR_TYPE_PALETTE : (img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (img.indexed) png_set_PLTE(png, info, pal.data(), static_cast<int>(pal.size()));
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

}  // namespace detail

inline RawPng decode_png(const std::string& bytes) {
  RawPng out;
  std::vector<png_bytep> rows;
  require(detail::png_decode_raw(bytes, out, rows), "bad_image", "data is not a decodable 8-bit PNG");
  require(out.width > 0 && out.height > 0, "bad_image", "PNG has zero size");
  return out;
}

inline std::string encode_png(const RawPng& img) {
  require(img.channels == 1 || img.channels == 3, "bad_image", "PNG encoder supports 1 or 3 channels");
  require(img.pixels.size() == img.width * img.height * img.channels, "bad_image", "pixel buffer size mismatch");
  std::vector<png_bytep> rows(img.height);
  for (std::size_t i = 0; i < img.height; ++i)
    rows[i] = const_cast<png_bytep>(img.pixels.data() + i * img.width * img.channels);
  std::vector<png_color> pal;
  if (img.indexed) {
    std::size_t n = img.palette.size() / 3;
    std::uint8_t top = 0;
    for (auto p : img.pixels) top = std::max(top, p);
    n = std::max<std::size_t>(n, static_cast<std::size_t>(top) + 1);
    pal.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (3 * i + 2 < img.palette.size()) {
        pal[i] = {img.palette[3 * i], img.palette[3 * i + 1], img.palette[3 * i + 2]};
      } else {
        const auto v = static_cast<png_byte>((i * 97) & 0xff);
        pal[i] = {v, v, v};
      }
    }
  }
  std::string sink;
  require(detail::png_encode_raw(img, sink, rows, pal), "bad_image", "PNG encoding failed");
  return sink;
}

/// 1 x 3 x H x W float image in [0, 1]. Gray and indexed files expand to RGB.
inline Tensor<float> png_to_tensor(const RawPng& png) {
  Tensor<float> t(Shape{1, 3, png.height, png.width});
  const std::size_t plane = png.height * png.width;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      std::uint8_t v;
      if (png.indexed) {
        const std::size_t idx = png.pixels[i];
        v = 3 * idx + c < png.palette.size() ? png.palette[3 * idx + c] : 0;
      } else {
        v = png.channels == 3 ? png.pixels[3 * i + c] : png.pixels[i];
      }
      t[c * plane + i] = static_cast<float>(v) / 255.0f;
    }
  }
  return t;
}

inline std::uint8_t to_u8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

/// Encodes a 3 x H x W (or 1 x 3 x H x W) image as an 8-bit RGB PNG.
inline std::string tensor_to_png(const Tensor<float>& image) {
  const Tensor<float> x = as_batch(image);
  require(x.dim(0) == 1 && x.dim(1) == 3, "shape", "PNG export needs a single 3-channel image");
  RawPng png;
  png.height = x.dim(2);
  png.width = x.dim(3);
  png.channels = 3;
  const std::size_t plane = png.height * png.width;
  png.pixels.resize(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) png.pixels[3 * i + c] = to_u8(x[c * plane + i]);
  return encode_png(png);
}

inline Tensor<float> read_image(const std::string& path) { return png_to_tensor(decode_png(read_file(path))); }

inline void write_image(const std::string& path, const Tensor<float>& image) { write_file(path, tensor_to_png(image)); }

/// Center-crops to a square, then bilinearly resizes to `resolution`.
inline Tensor<float> crop_and_resize(const Tensor<float>& image, std::size_t resolution) {
  const Tensor<float> x = as_batch(image);
  const std::size_t h = x.dim(2), w = x.dim(3), side = std::min(h, w);
  const std::size_t top = (h - side) / 2, left = (w - side) / 2;
  Tensor<float> crop(Shape{x.dim(0), x.dim(1), side, side});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t i = 0; i < side; ++i)
        for (std::size_t j = 0; j < side; ++j) crop.at(n, c, i, j) = x.at(n, c, top + i, left + j);
  NoGradGuard guard;
  return resize_bilinear(Var<float>(std::move(crop)), resolution, resolution).value();
}

}  // namespace spyr
