#include "hrefnet/image.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "hrefnet/errors.hpp"

namespace hrefnet {

std::int64_t BinaryMask::count() const {
  return std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; });
}

BinaryMask BinaryMask::threshold(const Grid& g, double t) {
  BinaryMask m(g.height, g.width);
  for (std::size_t i = 0; i < g.values.size(); ++i) m.bits[i] = g.values[i] >= t ? 1 : 0;
  return m;
}

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct ByteReader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  std::uint8_t u8() {
    if (pos >= bytes.size()) throw LoadError("gif: truncated stream");
    return bytes[pos++];
  }
  std::uint16_t u16() {
    const std::uint16_t lo = u8();
    return static_cast<std::uint16_t>(lo | (u8() << 8));
  }
  void skip(std::size_t n) {
    if (pos + n > bytes.size()) throw LoadError("gif: truncated stream");
    pos += n;
  }
  std::vector<std::uint8_t> sub_blocks() {
    std::vector<std::uint8_t> out;
    for (std::uint8_t n = u8(); n != 0; n = u8()) {
      if (pos + n > bytes.size()) throw LoadError("gif: truncated data block");
      out.insert(out.end(), bytes.begin() + pos, bytes.begin() + pos + n);
      pos += n;
    }
    return out;
  }
};

std::vector<std::uint8_t> lzw_decode(const std::vector<std::uint8_t>& data, int min_code_size, std::size_t expected) {
  if (min_code_size < 2 || min_code_size > 11) throw LoadError("gif: bad LZW code size");
  const int clear = 1 << min_code_size;
  const int stop = clear + 1;
  std::vector<std::uint16_t> prefix(4096);
  std::vector<std::uint8_t> suffix(4096), first(4096);
  for (int i = 0; i < clear; ++i) {
    suffix[i] = static_cast<std::uint8_t>(i);
    first[i] = static_cast<std::uint8_t>(i);
  }
  std::vector<std::uint8_t> out;
  out.reserve(expected);
  std::vector<std::uint8_t> stack;

  int width = min_code_size + 1;
  int next = clear + 2;
  int prev = -1;
  std::uint32_t acc = 0;
  int bits = 0;
  std::size_t pos = 0;
  while (out.size() < expected) {
    while (bits < width && pos < data.size()) {
      acc |= static_cast<std::uint32_t>(data[pos++]) << bits;
      bits += 8;
    }
    if (bits < width) break;
    const int code = static_cast<int>(acc & ((1u << width) - 1));
    acc >>= width;
    bits -= width;

    if (code == clear) {
      width = min_code_size + 1;
      next = clear + 2;
      prev = -1;
      continue;
    }
    if (code == stop) break;
    if (prev < 0) {
      if (code >= clear) throw LoadError("gif: corrupt LZW stream");
      out.push_back(static_cast<std::uint8_t>(code));
      prev = code;
      continue;
    }
    int cur = code;
    stack.clear();
    if (code >= next) {
      if (code > next) throw LoadError("gif: corrupt LZW stream");
      stack.push_back(first[prev]);
      cur = prev;
    }
    while (cur >= clear) {
      stack.push_back(suffix[cur]);
      cur = prefix[cur];
    }
    stack.push_back(static_cast<std::uint8_t>(cur));
    out.insert(out.end(), stack.rbegin(), stack.rend());
    if (next < 4096) {
      prefix[next] = static_cast<std::uint16_t>(prev);
      suffix[next] = static_cast<std::uint8_t>(cur);
      first[next] = first[prev];
      ++next;
      if (next == (1 << width) && width < 12) ++width;
    }
    prev = code;
  }
  out.resize(expected, 0);
  return out;
}

Image8 from_mat(const cv::Mat& mat, const std::filesystem::path& path) {
  cv::Mat m = mat;
  if (m.depth() == CV_16U) m.convertTo(m, CV_8U, 1.0 / 257.0);
  if (m.depth() != CV_8U) throw LoadError("unsupported pixel depth in " + path.string());
  Image8 img;
  img.height = m.rows;
  img.width = m.cols;
  const int ch = m.channels();
  img.channels = ch == 1 ? 1 : 3;
  img.pixels.resize(static_cast<std::size_t>(img.height * img.width * img.channels));
  for (int r = 0; r < m.rows; ++r) {
    const std::uint8_t* row = m.ptr<std::uint8_t>(r);
    for (int c = 0; c < m.cols; ++c) {
      if (ch == 1) {
        img.at(r, c, 0) = row[c];
      } else {
        // OpenCV stores BGR(A)
        img.at(r, c, 0) = row[c * ch + 2];
        img.at(r, c, 1) = row[c * ch + 1];
        img.at(r, c, 2) = row[c * ch];
      }
    }
  }
  return img;
}

}  // namespace

Image8 decode_gif(std::span<const std::uint8_t> bytes) {
  ByteReader rd{bytes};
  if (bytes.size() < 13 || !std::equal(bytes.begin(), bytes.begin() + 3, "GIF")) throw LoadError("gif: bad signature");
  rd.skip(6);
  const int screen_w = rd.u16();
  const int screen_h = rd.u16();
  const std::uint8_t flags = rd.u8();
  const std::uint8_t background = rd.u8();
  rd.skip(1);
  std::vector<std::array<std::uint8_t, 3>> global;
  if (flags & 0x80) {
    global.resize(std::size_t{1} << ((flags & 7) + 1));
    for (auto& c : global) c = {rd.u8(), rd.u8(), rd.u8()};
  }

  for (;;) {
    const std::uint8_t tag = rd.u8();
    if (tag == 0x21) {
      rd.skip(1);
      rd.sub_blocks();
    } else if (tag == 0x2C) {
      const int left = rd.u16();
      const int top = rd.u16();
      const int w = rd.u16();
      const int h = rd.u16();
      const std::uint8_t f = rd.u8();
      std::vector<std::array<std::uint8_t, 3>> local;
      if (f & 0x80) {
        local.resize(std::size_t{1} << ((f & 7) + 1));
        for (auto& c : local) c = {rd.u8(), rd.u8(), rd.u8()};
      }
      const auto& palette = local.empty() ? global : local;
      if (palette.empty()) throw LoadError("gif: no color table");
      const int code_size = rd.u8();
      const auto indices = lzw_decode(rd.sub_blocks(), code_size, static_cast<std::size_t>(w) * h);

      std::vector<int> rows(static_cast<std::size_t>(h));
      if (f & 0x40) {
        int i = 0;
        for (const auto& [start, step] : {std::pair{0, 8}, {4, 8}, {2, 4}, {1, 2}}) {
          for (int r = start; r < h; r += step) rows[i++] = r;
        }
      } else {
        for (int r = 0; r < h; ++r) rows[r] = r;
      }

      const int cw = std::max(screen_w, left + w);
      const int chh = std::max(screen_h, top + h);
      Image8 img(chh, cw, 3);
      const auto bg = background < global.size() ? global[background] : std::array<std::uint8_t, 3>{0, 0, 0};
      for (std::int64_t i = 0; i < img.height * img.width; ++i) {
        std::copy(bg.begin(), bg.end(), img.pixels.begin() + i * 3);
      }
      for (int i = 0; i < h; ++i) {
        for (int c = 0; c < w; ++c) {
          const std::uint8_t idx = indices[static_cast<std::size_t>(i) * w + c];
          const auto& rgb = palette[std::min<std::size_t>(idx, palette.size() - 1)];
          for (int ch = 0; ch < 3; ++ch) img.at(top + rows[i], left + c, ch) = rgb[ch];
        }
      }
      return img;
    } else if (tag == 0x3B) {
      throw LoadError("gif: no image frame");
    } else {
      throw LoadError("gif: unknown block");
    }
  }
}

Image8 read_image(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (ext == ".gif") {
    const auto bytes = read_bytes(path);
    try {
      return decode_gif(bytes);
    } catch (const LoadError& e) {
      throw LoadError(path.string() + ": " + e.what());
    }
  }
  if (!std::filesystem::exists(path)) throw LoadError("cannot open " + path.string());
  const cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw LoadError("cannot decode " + path.string());
  return from_mat(mat, path);
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw InvalidArgument("write_png: need 1 or 3 channels");
  cv::Mat mat(static_cast<int>(image.height), static_cast<int>(image.width), image.channels == 1 ? CV_8UC1 : CV_8UC3);
  for (int r = 0; r < mat.rows; ++r) {
    std::uint8_t* row = mat.ptr<std::uint8_t>(r);
    for (int c = 0; c < mat.cols; ++c) {
      if (image.channels == 1) {
        row[c] = image.at(r, c, 0);
      } else {
        row[c * 3] = image.at(r, c, 2);
        row[c * 3 + 1] = image.at(r, c, 1);
        row[c * 3 + 2] = image.at(r, c, 0);
      }
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat)) throw Error("cannot write " + path.string());
}

Grid to_grayscale(const Image8& rgb) {
  if (rgb.channels != 3) {
    throw InvalidArgument("to_grayscale: expected 3 channels, got " + std::to_string(rgb.channels));
  }
  Grid g(rgb.height, rgb.width);
  for (std::int64_t i = 0; i < g.size(); ++i) {
    const std::uint8_t* p = rgb.pixels.data() + i * 3;
    g.values[i] = (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0;
  }
  return g;
}

Grid to_unit_gray(const Image8& image) {
  if (image.channels == 3) return to_grayscale(image);
  if (image.channels != 1) throw InvalidArgument("unsupported channel count " + std::to_string(image.channels));
  Grid g(image.height, image.width);
  for (std::int64_t i = 0; i < g.size(); ++i) g.values[i] = image.pixels[i] / 255.0;
  return g;
}

BinaryMask binarize(const Image8& image) {
  const Grid g = to_unit_gray(image);
  BinaryMask m(g.height, g.width);
  for (std::int64_t i = 0; i < g.size(); ++i) m.bits[i] = g.values[i] * 255.0 > 127.0 ? 1 : 0;
  return m;
}

Image8 grid_to_image(const Grid& g) {
  Image8 img(g.height, g.width, 1);
  for (std::int64_t i = 0; i < g.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(g.values[i], 0.0, 1.0) * 255.0));
  }
  return img;
}

Image8 mask_to_image(const BinaryMask& m) {
  Image8 img(m.height, m.width, 1);
  for (std::int64_t i = 0; i < m.size(); ++i) img.pixels[i] = m.bits[i] ? 255 : 0;
  return img;
}

}  // namespace hrefnet
