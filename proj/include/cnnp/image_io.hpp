#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cnnp/tensor.hpp"

namespace cnnp {

/// Interleaved 8-bit RGB.
struct RgbImage {
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;
};

/// Decodes PNG or JPEG (sniffed from the file signature). Throws io on failure.
RgbImage decode_image(const std::filesystem::path& path);

/// Planar float RGB [3, H, W] from `img`, bilinearly resampled (half-pixel
/// centers, edge clamped) and scaled by 1/255.
Tensorf resize_bilinear(const RgbImage& img, Index height, Index width);

/// 8-bit grayscale PNG bytes.
std::string encode_png_gray(std::span<const std::uint8_t> pixels, Index width, Index height);
std::string encode_png_rgb(std::span<const std::uint8_t> pixels, Index width, Index height);

/// Decodes a PNG held in memory into RGB (grayscale is expanded).
RgbImage decode_png(std::span<const std::uint8_t> bytes);

}  // namespace cnnp
