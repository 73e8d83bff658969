#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "updetr/tensor.hpp"

namespace updetr {

inline constexpr std::size_t kMinImageSide = 16;

/// 8-bit RGB raster, row-major, channels interleaved.
struct ImageRaster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  ImageRaster() = default;
  ImageRaster(std::size_t w, std::size_t h);

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) {
    return pixels[(y * width + x) * 3 + c];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
  friend bool operator==(const ImageRaster&, const ImageRaster&) = default;
};

/// Binary P6 with maxval 255.
void write_ppm(const std::filesystem::path& path, const ImageRaster& img);
ImageRaster read_ppm(const std::filesystem::path& path);

/// Bilinear resample of the source rectangle [x0, x0+w) × [y0, y0+h)
/// (pixel units) to out_w × out_h; supersamples when shrinking.
ImageRaster resample(const ImageRaster& img, double x0, double y0, double w, double h,
                     std::size_t out_w, std::size_t out_h);

ImageRaster resize(const ImageRaster& img, std::size_t out_w, std::size_t out_h);

/// [3×H×W] with every channel mapped to (v/255 − 0.5) / 0.25.
Tensor image_to_tensor(const ImageRaster& img);

}  // namespace updetr
