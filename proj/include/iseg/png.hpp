#pragma once

// 8-bit single-channel PNG I/O for label masks and grayscale renders.

#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "iseg/types.hpp"

namespace iseg {

struct GrayImage {
  Grid grid;
  std::vector<std::uint8_t> pixels;  // row-major
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what != nullptr) *what = msg;
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

inline void write_png(const std::string& path, const GrayImage& img) {
  if (img.pixels.size() != img.grid.size()) throw ShapeError("image buffer does not match " + to_string(img.grid));
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialization failed");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.grid.rows));
  for (int r = 0; r < img.grid.rows; ++r)
    rows[static_cast<std::size_t>(r)] = const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(r) * img.grid.cols);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("writing '" + path + "': " + err);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.grid.cols), static_cast<png_uint_32>(img.grid.rows), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(f.get()) != 0) throw IoError("writing '" + path + "' failed");
}

/// Reads an 8-bit grayscale PNG (palette or 16-bit inputs are rejected).
inline GrayImage read_png(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open '" + path + "'");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialization failed");
  }
  GrayImage img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("reading '" + path + "': " + err);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("'" + path + "' is not an 8-bit grayscale PNG");
  }
  img.grid = {static_cast<int>(png_get_image_height(png, info)), static_cast<int>(png_get_image_width(png, info))};
  img.pixels.resize(img.grid.size());
  rows.resize(static_cast<std::size_t>(img.grid.rows));
  for (int r = 0; r < img.grid.rows; ++r) rows[static_cast<std::size_t>(r)] = img.pixels.data() + static_cast<std::size_t>(r) * img.grid.cols;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_mask_png(const std::string& path, const SegMask& mask) { write_png(path, {mask.grid, mask.labels}); }

inline SegMask read_mask_png(const std::string& path) {
  GrayImage img = read_png(path);
  SegMask m(img.grid);
  m.labels = std::move(img.pixels);
  return m;
}

}  // namespace iseg
