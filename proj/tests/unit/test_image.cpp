#include <gtest/gtest.h>

#include <array>
#include <filesystem>
#include <random>

#include "hrefnet/errors.hpp"
#include "hrefnet/image.hpp"

using namespace hrefnet;
namespace fs = std::filesystem;

namespace {

// 5 x 9, palette {black, red, green, blue, (200, 100, 50)}, pixel (r, c) = (r + 2c) % 5.
const std::vector<std::uint8_t> kPlainGif{
    0x47, 0x49, 0x46, 0x38, 0x37, 0x61, 0x05, 0x00, 0x09, 0x00, 0x82, 0x00, 0x00, 0x00, 0x00, 0x00, 0xff,
    0x00, 0x00, 0x00, 0xff, 0x00, 0x00, 0x00, 0xff, 0xc8, 0x64, 0x32, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
    0x00, 0x00, 0x00, 0x2c, 0x00, 0x00, 0x00, 0x00, 0x05, 0x00, 0x09, 0x00, 0x00, 0x08, 0x1e, 0x00, 0x01,
    0x08, 0x20, 0x10, 0x60, 0x40, 0x41, 0x81, 0x04, 0x06, 0x1e, 0x1c, 0x80, 0x30, 0x00, 0x41, 0x86, 0x02,
    0x1a, 0x1a, 0x84, 0x98, 0xf0, 0x21, 0x00, 0x8a, 0x01, 0x02, 0x02, 0x00, 0x3b};

// Same picture stored with interlaced rows.
const std::vector<std::uint8_t> kInterlacedGif{
    0x47, 0x49, 0x46, 0x38, 0x37, 0x61, 0x05, 0x00, 0x09, 0x00, 0x82, 0x00, 0x00, 0x00, 0x00, 0x00, 0xff,
    0x00, 0x00, 0x00, 0xff, 0x00, 0x00, 0x00, 0xff, 0xc8, 0x64, 0x32, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
    0x00, 0x00, 0x00, 0x2c, 0x00, 0x00, 0x00, 0x00, 0x05, 0x00, 0x09, 0x00, 0x40, 0x08, 0x1e, 0x00, 0x01,
    0x08, 0x20, 0x10, 0x60, 0xc0, 0x00, 0x81, 0x04, 0x09, 0x1e, 0x14, 0x30, 0xb0, 0x20, 0x00, 0x87, 0x0d,
    0x17, 0x12, 0x90, 0x18, 0x00, 0x61, 0xc1, 0x88, 0x00, 0x02, 0x02, 0x00, 0x3b};

const std::array<std::array<std::uint8_t, 3>, 5> kPalette{
    {{0, 0, 0}, {255, 0, 0}, {0, 255, 0}, {0, 0, 255}, {200, 100, 50}}};

void expect_pattern(const Image8& img) {
  ASSERT_EQ(img.height, 9);
  ASSERT_EQ(img.width, 5);
  ASSERT_EQ(img.channels, 3);
  for (int r = 0; r < 9; ++r)
    for (int c = 0; c < 5; ++c)
      for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(img.at(r, c, ch), kPalette[(r + 2 * c) % 5][ch]) << r << "," << c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hrefnet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Gif, DecodesPlainAndInterlaced) {
  expect_pattern(decode_gif(kPlainGif));
  expect_pattern(decode_gif(kInterlacedGif));
}

TEST(Gif, LongStreamMatchesPngRendering) {
  // 97 x 61 with a 256-entry palette: the code width reaches 12 bits.
  const fs::path dir = HREFNET_TEST_DATA_DIR;
  const Image8 gif = read_image(dir / "noise.gif");
  const Image8 png = read_image(dir / "noise.png");
  EXPECT_EQ(gif.height, 61);
  EXPECT_EQ(gif.width, 97);
  EXPECT_EQ(gif.pixels, png.pixels);
}

TEST(Gif, RejectsCorruptInput) {
  std::vector<std::uint8_t> bad = kPlainGif;
  bad[0] = 'X';
  EXPECT_THROW(decode_gif(bad), LoadError);
  std::vector<std::uint8_t> cut(kPlainGif.begin(), kPlainGif.begin() + 50);
  EXPECT_THROW(decode_gif(cut), LoadError);
}

TEST(Image, PngRoundTrip) {
  const fs::path dir = temp_dir("png");
  Image8 rgb(4, 3, 3);
  std::mt19937 rng(1);
  for (auto& p : rgb.pixels) p = static_cast<std::uint8_t>(rng());
  write_png(dir / "sub" / "a.png", rgb);
  EXPECT_EQ(read_image(dir / "sub" / "a.png").pixels, rgb.pixels);
  Image8 gray(2, 5, 1);
  for (auto& p : gray.pixels) p = static_cast<std::uint8_t>(rng());
  write_png(dir / "g.png", gray);
  const Image8 back = read_image(dir / "g.png");
  EXPECT_EQ(back.channels, 1);
  EXPECT_EQ(back.pixels, gray.pixels);
  fs::remove_all(dir);
}

TEST(Image, MissingFileNamesThePath) {
  try {
    read_image("/nonexistent/dir/x.tif");
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/x.tif"), std::string::npos);
  }
  EXPECT_THROW(read_image("/nonexistent/y.gif"), LoadError);
}

TEST(Image, GrayscaleWeights) {
  Image8 rgb(1, 3, 3);
  rgb.pixels = {255, 0, 0, 0, 255, 0, 0, 0, 255};
  const Grid g = to_grayscale(rgb);
  EXPECT_NEAR(g.values[0], 0.299, 1e-15);
  EXPECT_NEAR(g.values[1], 0.587, 1e-15);
  EXPECT_NEAR(g.values[2], 0.114, 1e-15);
  EXPECT_THROW(to_grayscale(Image8(1, 1, 1)), InvalidArgument);
  Image8 white(2, 2, 3, 255);
  for (double v : to_grayscale(white).values) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(Image, BinarizeAndConversions) {
  Image8 m(1, 4, 1);
  m.pixels = {0, 127, 128, 255};
  const BinaryMask b = binarize(m);
  EXPECT_EQ(b.bits, (std::vector<std::uint8_t>{0, 0, 1, 1}));
  EXPECT_EQ(mask_to_image(b).pixels, (std::vector<std::uint8_t>{0, 0, 255, 255}));
  Grid g(1, 3);
  g.values = {-0.5, 0.5, 2.0};
  EXPECT_EQ(grid_to_image(g).pixels, (std::vector<std::uint8_t>{0, 128, 255}));
  Grid t(1, 3);
  t.values = {0.49, 0.5, 0.51};
  EXPECT_EQ(BinaryMask::threshold(t, 0.5).bits, (std::vector<std::uint8_t>{0, 1, 1}));
}
