#include "updetr/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "updetr/error.hpp"
#include "updetr/random.hpp"

namespace updetr {

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

ImageRaster::ImageRaster(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h * 3, 0) {
  if (w == 0 || h == 0) throw InputError("image extents must be positive");
}

void write_ppm(const std::filesystem::path& path, const ImageRaster& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("short write to " + path.string());
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

}  // namespace

ImageRaster read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (header_token(in) != "P6") throw IoError(path.string() + ": not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(header_token(in));
    h = std::stoul(header_token(in));
    maxval = std::stoul(header_token(in));
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed PPM header");
  }
  if (maxval != 255) throw IoError(path.string() + ": only maxval 255 is supported");
  if (w < kMinImageSide || h < kMinImageSide)
    throw InputError(path.string() + ": image smaller than " + std::to_string(kMinImageSide) +
                     " pixels");
  ImageRaster img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw IoError(path.string() + ": truncated pixel data");
  return img;
}

ImageRaster resample(const ImageRaster& img, double x0, double y0, double w, double h,
                     std::size_t out_w, std::size_t out_h) {
  ImageRaster out(out_w, out_h);
  const double sx = w / static_cast<double>(out_w), sy = h / static_cast<double>(out_h);
  const auto nx = static_cast<std::size_t>(std::max(1.0, std::ceil(sx)));
  const auto ny = static_cast<std::size_t>(std::max(1.0, std::ceil(sy)));
  const double max_x = static_cast<double>(img.width - 1), max_y = static_cast<double>(img.height - 1);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      double acc[3] = {0, 0, 0};
      for (std::size_t j = 0; j < ny; ++j) {
        for (std::size_t i = 0; i < nx; ++i) {
          // Sample position in source pixel-centre coordinates.
          const double fx = std::clamp(
              x0 + (static_cast<double>(ox) + (static_cast<double>(i) + 0.5) / static_cast<double>(nx)) * sx - 0.5,
              0.0, max_x);
          const double fy = std::clamp(
              y0 + (static_cast<double>(oy) + (static_cast<double>(j) + 0.5) / static_cast<double>(ny)) * sy - 0.5,
              0.0, max_y);
          const auto xa = static_cast<std::size_t>(fx), ya = static_cast<std::size_t>(fy);
          const std::size_t xb = std::min(xa + 1, img.width - 1), yb = std::min(ya + 1, img.height - 1);
          const double tx = fx - static_cast<double>(xa), ty = fy - static_cast<double>(ya);
          for (std::size_t c = 0; c < 3; ++c) {
            const double top = img.at(xa, ya, c) * (1 - tx) + img.at(xb, ya, c) * tx;
            const double bottom = img.at(xa, yb, c) * (1 - tx) + img.at(xb, yb, c) * tx;
            acc[c] += top * (1 - ty) + bottom * ty;
          }
        }
      }
      for (std::size_t c = 0; c < 3; ++c)
        out.at(ox, oy, c) = static_cast<std::uint8_t>(
            std::clamp(std::lround(acc[c] / static_cast<double>(nx * ny)), 0L, 255L));
    }
  }
  return out;
}

ImageRaster resize(const ImageRaster& img, std::size_t out_w, std::size_t out_h) {
  if (out_w == img.width && out_h == img.height) return img;
  return resample(img, 0.0, 0.0, static_cast<double>(img.width), static_cast<double>(img.height),
                  out_w, out_h);
}

Tensor image_to_tensor(const ImageRaster& img) {
  const std::size_t hw = img.width * img.height;
  std::vector<double> v(3 * hw);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      v[c * hw + i] = (img.pixels[i * 3 + c] / 255.0 - 0.5) / 0.25;
  return Tensor({3, img.height, img.width}, std::move(v));
}

}  // namespace updetr
