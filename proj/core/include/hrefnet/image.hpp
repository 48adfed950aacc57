#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace hrefnet {

// Interleaved 8-bit image, RGB channel order when channels == 3.
struct Image8 {
  std::int64_t height = 0;
  std::int64_t width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(std::int64_t h, std::int64_t w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h * w * c), fill) {}

  std::uint8_t& at(std::int64_t r, std::int64_t c, int ch) {
    return pixels[static_cast<std::size_t>((r * width + c) * channels + ch)];
  }
  std::uint8_t at(std::int64_t r, std::int64_t c, int ch) const {
    return pixels[static_cast<std::size_t>((r * width + c) * channels + ch)];
  }
};

// Real-valued single-channel grid, row-major.
struct Grid {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(std::int64_t h, std::int64_t w, double fill = 0.0)
      : height(h), width(w), values(static_cast<std::size_t>(h * w), fill) {}

  double& operator()(std::int64_t r, std::int64_t c) { return values[static_cast<std::size_t>(r * width + c)]; }
  double operator()(std::int64_t r, std::int64_t c) const {
    return values[static_cast<std::size_t>(r * width + c)];
  }
  std::int64_t size() const { return height * width; }
};

struct BinaryMask {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::int64_t h, std::int64_t w, bool fill = false)
      : height(h), width(w), bits(static_cast<std::size_t>(h * w), fill ? 1 : 0) {}

  std::uint8_t& operator()(std::int64_t r, std::int64_t c) { return bits[static_cast<std::size_t>(r * width + c)]; }
  bool operator()(std::int64_t r, std::int64_t c) const { return bits[static_cast<std::size_t>(r * width + c)] != 0; }
  bool contains(std::int64_t r, std::int64_t c) const {
    return r >= 0 && c >= 0 && r < height && c < width && (*this)(r, c);
  }
  std::int64_t size() const { return height * width; }
  std::int64_t count() const;
  bool same_shape(const BinaryMask& o) const { return height == o.height && width == o.width; }

  // pixel >= threshold
  static BinaryMask threshold(const Grid& g, double threshold = 0.5);

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

// Decodes PNG, TIFF, PPM/PGM, JPEG (via OpenCV) and GIF (first frame).
Image8 read_image(const std::filesystem::path& path);
Image8 decode_gif(std::span<const std::uint8_t> bytes);

// 8-bit PNG, gray or RGB.
void write_png(const std::filesystem::path& path, const Image8& image);

// 0.299 R + 0.587 G + 0.114 B scaled to [0, 1]. Requires three channels.
Grid to_grayscale(const Image8& rgb);
// Gray input is scaled to [0, 1]; RGB input goes through to_grayscale.
Grid to_unit_gray(const Image8& image);
// Pixels above 127 (on the gray value) are set.
BinaryMask binarize(const Image8& image);

Image8 grid_to_image(const Grid& g);  // [0, 1] -> 0..255, rounded, clamped
Image8 mask_to_image(const BinaryMask& m);

}  // namespace hrefnet
