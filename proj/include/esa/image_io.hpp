#pragma once

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <cctype>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "esa/tensor.hpp"

namespace esa {

/// I/O failure (missing, unreadable or undecodable file).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved image.
struct Image8 {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, channels interleaved

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

inline std::string lower_extension(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

}  // namespace detail

/// Writes a 1 (gray) or 3 (RGB) channel PNG. Output bytes depend only on the pixels.
inline void write_png(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_png: need 1 or 3 channels");
  if (img.pixels.size() != img.height * img.width * img.channels) {
    throw std::invalid_argument("write_png: pixel buffer does not match the image size");
  }
  auto f = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("write_png: libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("write_png: failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads a PNG, converted to 8-bit gray (if `keep_gray` and the file is gray) or RGB.
inline Image8 read_png(const std::filesystem::path& path, bool keep_gray = true) {
  auto f = detail::open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw IoError("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("read_png: libpng initialisation failed");
  }
  Image8 img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("read_png: corrupt PNG " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if ((color & PNG_COLOR_MASK_COLOR) == 0 && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  const bool gray = (color & PNG_COLOR_MASK_COLOR) == 0 && color != PNG_COLOR_TYPE_PALETTE;
  if (gray && !keep_gray) png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.pixels.resize(img.height * img.width * img.channels);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

namespace detail {

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  std::longjmp(reinterpret_cast<JpegError*>(cinfo->err)->jump, 1);
}

}  // namespace detail

/// Reads a JPEG as RGB.
inline Image8 read_jpeg(const std::filesystem::path& path) {
  auto f = detail::open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  detail::JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = detail::jpeg_error_exit;
  Image8 img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("read_jpeg: corrupt JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = cinfo.output_width;
  img.height = cinfo.output_height;
  img.channels = 3;
  img.pixels.resize(img.height * img.width * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

/// Reads a PNG or JPEG (by extension) as RGB.
inline Image8 read_rgb(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing image: " + path.string());
  const auto ext = detail::lower_extension(path);
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
  return read_png(path, false);
}

/// [3, H, W] tensor in [0, 1].
inline Tensor<double> to_tensor(const Image8& img) {
  if (img.channels != 3) throw std::invalid_argument("to_tensor: expected an RGB image");
  Tensor<double> t({3, img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) t(c, y, x) = img.at(y, x, c) / 255.0;
    }
  }
  return t;
}

/// RGB image from a [3, H, W] tensor, clamped to [0, 1] and rounded.
inline Image8 from_tensor(const Tensor<double>& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw std::invalid_argument("from_tensor: expected [3, H, W]");
  Image8 img{t.dim(1), t.dim(2), 3, {}};
  img.pixels.resize(img.height * img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(t(c, y, x), 0.0, 1.0) * 255.0));
      }
    }
  }
  return img;
}

/// Gray image holding a label map; values must lie in [0, 255].
inline Image8 label_image(const Tensor<int>& label) {
  Image8 img{label.dim(0), label.dim(1), 1, {}};
  img.pixels.reserve(label.size());
  for (int v : label) {
    if (v < 0 || v > 255) throw std::invalid_argument("label_image: label value out of range");
    img.pixels.push_back(static_cast<std::uint8_t>(v));
  }
  return img;
}

/// Label map from the first channel of an image.
inline Tensor<int> label_from_image(const Image8& img) {
  Tensor<int> t({img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) t(y, x) = img.at(y, x, 0);
  }
  return t;
}

/// Bilinear (half-pixel) resize of an 8-bit image.
inline Image8 resize_bilinear(const Image8& src, std::size_t height, std::size_t width) {
  Image8 dst{height, width, src.channels, std::vector<std::uint8_t>(height * width * src.channels)};
  const double sy = static_cast<double>(src.height) / static_cast<double>(height);
  const double sx = static_cast<double>(src.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::max(0.0, (static_cast<double>(y) + 0.5) * sy - 0.5);
    const auto y0 = std::min(static_cast<std::size_t>(fy), src.height - 1);
    const auto y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::max(0.0, (static_cast<double>(x) + 0.5) * sx - 0.5);
      const auto x0 = std::min(static_cast<std::size_t>(fx), src.width - 1);
      const auto x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c)) +
                         wy * ((1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
        dst.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return dst;
}

/// Nearest-neighbour resize, used for label maps.
inline Image8 resize_nearest(const Image8& src, std::size_t height, std::size_t width) {
  Image8 dst{height, width, src.channels, std::vector<std::uint8_t>(height * width * src.channels)};
  for (std::size_t y = 0; y < height; ++y) {
    const auto sy = std::min(src.height - 1, y * src.height / height);
    for (std::size_t x = 0; x < width; ++x) {
      const auto sx = std::min(src.width - 1, x * src.width / width);
      for (std::size_t c = 0; c < src.channels; ++c) dst.at(y, x, c) = src.at(sy, sx, c);
    }
  }
  return dst;
}

}  // namespace esa
