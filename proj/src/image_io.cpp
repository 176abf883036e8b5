#include "cnnp/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>

#include <jpeglib.h>

namespace cnnp {
namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

RgbImage decode_jpeg(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  RgbImage img;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw Error(ErrorCode::io, "cannot decode JPEG " + name + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  img.width = cinfo.output_width;
  img.height = cinfo.output_height;
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height * 3));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * img.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

RgbImage decode_png_bytes(std::span<const std::uint8_t> bytes, const std::string& name) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw Error(ErrorCode::io, "cannot decode PNG " + name + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage img;
  img.width = image.width;
  img.height = image.height;
  img.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::io, "cannot decode PNG " + name + ": " + msg);
  }
  return img;
}

std::string encode_png(std::span<const std::uint8_t> pixels, Index width, Index height,
                       png_uint_32 format, Index channels) {
  if (static_cast<Index>(pixels.size()) != width * height * channels) {
    throw Error(ErrorCode::shape_mismatch, "PNG pixel buffer does not match " +
                                               std::to_string(width) + "x" + std::to_string(height));
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw Error(ErrorCode::io, std::string("PNG encode failed: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw Error(ErrorCode::io, std::string("PNG encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

}  // namespace

RgbImage decode_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  static constexpr std::uint8_t kPng[] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kPng, 4) == 0) {
    return decode_png_bytes(bytes, path.string());
  }
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
    return decode_jpeg(bytes, path.string());
  }
  throw Error(ErrorCode::io, "unrecognized image format: " + path.string());
}

RgbImage decode_png(std::span<const std::uint8_t> bytes) { return decode_png_bytes(bytes, "<memory>"); }

Tensorf resize_bilinear(const RgbImage& img, Index height, Index width) {
  if (img.width <= 0 || img.height <= 0 || height <= 0 || width <= 0) {
    throw Error(ErrorCode::invalid_argument, "resize_bilinear needs positive extents");
  }
  Tensorf out({3, height, width});
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  auto px = [&](Index y, Index x, Index c) {
    return static_cast<double>(img.pixels[static_cast<std::size_t>((y * img.width + x) * 3 + c)]);
  };
  for (Index y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(img.height - 1));
    const Index y0 = static_cast<Index>(std::floor(fy));
    const Index y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (Index x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(img.width - 1));
      const Index x0 = static_cast<Index>(std::floor(fx));
      const Index x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (Index c = 0; c < 3; ++c) {
        const double top = px(y0, x0, c) * (1 - wx) + px(y0, x1, c) * wx;
        const double bottom = px(y1, x0, c) * (1 - wx) + px(y1, x1, c) * wx;
        out[(c * height + y) * width + x] = static_cast<float>((top * (1 - wy) + bottom * wy) / 255.0);
      }
    }
  }
  return out;
}

std::string encode_png_gray(std::span<const std::uint8_t> pixels, Index width, Index height) {
  return encode_png(pixels, width, height, PNG_FORMAT_GRAY, 1);
}

std::string encode_png_rgb(std::span<const std::uint8_t> pixels, Index width, Index height) {
  return encode_png(pixels, width, height, PNG_FORMAT_RGB, 3);
}

}  // namespace cnnp
