#include "kcalnet/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "kcalnet/errors.hpp"

namespace kcalnet {

Image8 read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    const std::string why = img.message;
    png_image_free(&img);
    throw IoError("cannot decode image " + path.string() + ": " + why);
  }
  img.format = PNG_FORMAT_RGB;
  Image8 out(img.width, img.height);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string why = img.message;
    png_image_free(&img);
    throw IoError("cannot decode image " + path.string() + ": " + why);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.pixels.size() != image.width * image.height * 3) throw ArgumentError("image buffer size mismatch");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.pixels.data(), 0, nullptr)) {
    const std::string why = img.message;
    png_image_free(&img);
    throw IoError("cannot write image " + path.string() + ": " + why);
  }
}

Tensor to_tensor(const Image8& image) {
  Tensor out({image.height, image.width, 3});
  for (std::size_t i = 0; i < image.pixels.size(); ++i) out[i] = image.pixels[i] / 255.0;
  return out;
}

Image8 to_image8(const Tensor& hwc) {
  if (hwc.rank() != 3 || hwc.dim(2) != 3) throw DimensionError("to_image8 expects H x W x 3, got " + shape_string(hwc.shape()));
  Image8 out(hwc.dim(1), hwc.dim(0));
  for (std::size_t i = 0; i < hwc.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(hwc[i] * 255.0), 0L, 255L));
  }
  return out;
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double frac;
};

std::vector<Tap> taps(std::size_t in, std::size_t out) {
  std::vector<Tap> t(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double src = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t[i] = {lo, std::min(lo + 1, in - 1), src - lo};
  }
  return t;
}

}  // namespace

Tensor resize_bilinear(const Tensor& hwc, std::size_t height, std::size_t width) {
  if (hwc.rank() != 3) throw DimensionError("resize_bilinear expects H x W x C, got " + shape_string(hwc.shape()));
  if (height == 0 || width == 0) throw ArgumentError("resize target must be non-empty");
  const std::size_t H = hwc.dim(0), W = hwc.dim(1), C = hwc.dim(2);
  if (H == height && W == width) return hwc;
  const auto ty = taps(H, height);
  const auto tx = taps(W, width);
  Tensor out({height, width, C});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < C; ++c) {
        auto px = [&](std::size_t r, std::size_t q) { return hwc[(r * W + q) * C + c]; };
        const double top = px(ty[y].lo, tx[x].lo) * (1 - tx[x].frac) + px(ty[y].lo, tx[x].hi) * tx[x].frac;
        const double bottom = px(ty[y].hi, tx[x].lo) * (1 - tx[x].frac) + px(ty[y].hi, tx[x].hi) * tx[x].frac;
        out[(y * width + x) * C + c] = top * (1 - ty[y].frac) + bottom * ty[y].frac;
      }
    }
  }
  return out;
}

Tensor load_image(const std::filesystem::path& path, std::size_t size) {
  return resize_bilinear(to_tensor(read_png(path)), size, size);
}

}  // namespace kcalnet
