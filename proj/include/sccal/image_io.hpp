#pragma once

// PNG (libpng) and binary PPM/PGM reading and writing.

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "sccal/error.hpp"
#include "sccal/image.hpp"

namespace sccal {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngPixels {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;
};

// Decodes any 8/16-bit PNG into 8-bit RGB, or a gray PNG into 8-bit gray.
inline PngPixels read_png(const std::filesystem::path& path, bool want_rgb) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open image: " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw DataError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  PngPixels out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  // Palette label maps (e.g. VOC) carry the category in the index itself.
  const bool palette_indices = color == PNG_COLOR_TYPE_PALETTE && !want_rgb;
  if (palette_indices) png_set_packing(png);
  else if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (!palette_indices && (png_get_valid(png, info, PNG_INFO_tRNS) || (color & PNG_COLOR_MASK_ALPHA))) {
    png_set_strip_alpha(png);
  }
  const bool is_gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA || palette_indices;
  if (want_rgb && is_gray) png_set_gray_to_rgb(png);
  if (!want_rgb && !is_gray) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("expected a single-channel PNG: " + path.string());
  }
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = static_cast<int>(png_get_channels(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  out.data.resize(stride * static_cast<std::size_t>(out.height));
  rows.resize(static_cast<std::size_t>(out.height));
  for (int y = 0; y < out.height; ++y) rows[static_cast<std::size_t>(y)] = out.data.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline void write_png(const std::filesystem::path& path, int height, int width, int channels,
                      const std::vector<std::uint8_t>& data) {
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot write image: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(data.data() + static_cast<std::size_t>(y) * width * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Binary P5/P6 with maxval 255.
inline PngPixels read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw DataError("unsupported PNM variant in " + path.string());
  auto next_int = [&] {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') in.ignore(1 << 20, '\n');
    if (!(in >> v)) throw DataError("bad PNM header in " + path.string());
    return v;
  };
  PngPixels out;
  out.width = next_int();
  out.height = next_int();
  if (next_int() != 255) throw DataError("only maxval 255 PNM supported: " + path.string());
  in.get();
  out.channels = magic == "P6" ? 3 : 1;
  out.data.resize(static_cast<std::size_t>(out.width) * out.height * out.channels);
  if (!in.read(reinterpret_cast<char*>(out.data.data()), static_cast<std::streamsize>(out.data.size()))) {
    throw DataError("truncated PNM: " + path.string());
  }
  return out;
}

inline bool is_pnm(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

}  // namespace detail

inline RgbImage read_rgb_image(const std::filesystem::path& path) {
  detail::PngPixels px = detail::is_pnm(path) ? detail::read_pnm(path) : detail::read_png(path, true);
  RgbImage img{px.height, px.width, {}};
  if (px.channels == 3) {
    img.pixels = std::move(px.data);
  } else {
    img.pixels.reserve(px.data.size() * 3);
    for (auto v : px.data) img.pixels.insert(img.pixels.end(), {v, v, v});
  }
  return img;
}

inline LabelMap read_label_map(const std::filesystem::path& path) {
  const detail::PngPixels px = detail::is_pnm(path) ? detail::read_pnm(path) : detail::read_png(path, false);
  if (px.channels != 1) throw DataError("label map must be single-channel: " + path.string());
  return LabelMap{px.height, px.width, std::vector<int>(px.data.begin(), px.data.end())};
}

inline void write_rgb_png(const std::filesystem::path& path, const RgbImage& img) {
  detail::write_png(path, img.height, img.width, 3, img.pixels);
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image: " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

// 8-bit single-channel label PNG; labels must fit in [0, 255].
inline void write_label_png(const std::filesystem::path& path, int height, int width, const std::vector<int>& labels) {
  std::vector<std::uint8_t> bytes(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 255) throw DataError("label " + std::to_string(labels[i]) + " does not fit in 8 bits");
    bytes[i] = static_cast<std::uint8_t>(labels[i]);
  }
  detail::write_png(path, height, width, 1, bytes);
}

inline void write_label_png(const std::filesystem::path& path, const LabelMap& m) {
  write_label_png(path, m.height, m.width, m.labels);
}

}  // namespace sccal
