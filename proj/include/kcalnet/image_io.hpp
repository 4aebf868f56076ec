#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "kcalnet/tensor.hpp"

namespace kcalnet {

/// 8-bit RGB raster, row-major with interleaved channels.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h * 3, 0) {}

  std::uint8_t* at(std::size_t x, std::size_t y) { return &pixels[(y * width + x) * 3]; }

  friend bool operator==(const Image8&, const Image8&) = default;
};

/// Decodes any PNG libpng understands into RGB (alpha dropped, gray expanded).
/// Throws IoError on a missing or undecodable file.
Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

/// H x W x 3 tensor with values v / 255.
Tensor to_tensor(const Image8& image);
/// Inverse of to_tensor with rounding and clamping to [0, 255].
Image8 to_image8(const Tensor& hwc);

/// Bilinear resampling of an H x W x C tensor with half-pixel centers and edge
/// clamping, so a 2x downscale averages each 2 x 2 block.
Tensor resize_bilinear(const Tensor& hwc, std::size_t height, std::size_t width);

/// read_png, scale to [0, 1] and resize to size x size.
Tensor load_image(const std::filesystem::path& path, std::size_t size);

}  // namespace kcalnet
