#pragma once

#include <png.h>

#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "vce/errors.hpp"

namespace vce::io {

// 8-bit grayscale raster, row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

enum class ImageFormat { png, pgm_binary, pgm_ascii };

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

// Any PNG colour type is accepted and reduced to 8-bit gray by libpng.
inline GrayImage decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name = "<memory>") {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw DecodeError("cannot decode PNG " + name + ": " + img.message);
  }
  img.format = PNG_FORMAT_GRAY;
  GrayImage out{img.width, img.height, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(img))};
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DecodeError("cannot decode PNG " + name + ": " + img.message);
  }
  return out;
}

inline std::vector<std::uint8_t> encode_png(const GrayImage& image) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(img, size, 0, image.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

namespace detail {
inline void skip_pgm_space(std::istream& is) {
  for (;;) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}
}  // namespace detail

// P2 (ASCII) and P5 (binary) graymaps with maxval <= 255.
inline GrayImage decode_pgm(const std::vector<std::uint8_t>& bytes, const std::string& name = "<memory>") {
  std::istringstream is(std::string(bytes.begin(), bytes.end()));
  std::string magic;
  is >> magic;
  if (magic != "P2" && magic != "P5") throw DecodeError("not a PGM file: " + name);
  std::size_t w = 0, h = 0, maxval = 0;
  detail::skip_pgm_space(is);
  is >> w;
  detail::skip_pgm_space(is);
  is >> h;
  detail::skip_pgm_space(is);
  is >> maxval;
  if (!is || w == 0 || h == 0 || maxval == 0 || maxval > 255) throw DecodeError("bad PGM header in " + name);
  GrayImage out{w, h, std::vector<std::uint8_t>(w * h)};
  if (magic == "P5") {
    is.get();
    is.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(w * h));
    if (static_cast<std::size_t>(is.gcount()) != w * h) throw DecodeError("truncated PGM " + name);
  } else {
    for (auto& p : out.pixels) {
      unsigned v = 0;
      if (!(is >> v) || v > maxval) throw DecodeError("bad PGM sample in " + name);
      p = static_cast<std::uint8_t>(v);
    }
  }
  if (maxval != 255) {
    for (auto& p : out.pixels) p = static_cast<std::uint8_t>((p * 255u + maxval / 2) / maxval);
  }
  return out;
}

inline std::vector<std::uint8_t> encode_pgm(const GrayImage& image, bool ascii) {
  std::ostringstream os;
  os << (ascii ? "P2" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  if (ascii) {
    for (std::size_t r = 0; r < image.height; ++r) {
      for (std::size_t c = 0; c < image.width; ++c) os << (c ? " " : "") << int(image.at(r, c));
      os << '\n';
    }
  } else {
    os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  }
  const std::string s = os.str();
  return std::vector<std::uint8_t>(s.begin(), s.end());
}

inline bool looks_like_png(const std::vector<std::uint8_t>& b) {
  static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  return b.size() >= 8 && std::memcmp(b.data(), sig, 8) == 0;
}

// Decodes PNG or PGM by content, not by extension.
inline GrayImage read_image(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (looks_like_png(bytes)) return decode_png(bytes, path.string());
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '2' || bytes[1] == '5')) {
    return decode_pgm(bytes, path.string());
  }
  throw DecodeError("unrecognised image format: " + path.string());
}

inline void write_image(const std::filesystem::path& path, const GrayImage& image, ImageFormat format) {
  switch (format) {
    case ImageFormat::png:
      write_file_bytes(path, encode_png(image));
      break;
    case ImageFormat::pgm_binary:
      write_file_bytes(path, encode_pgm(image, false));
      break;
    case ImageFormat::pgm_ascii:
      write_file_bytes(path, encode_pgm(image, true));
      break;
  }
}

inline ImageFormat parse_image_format(const std::string& s) {
  if (s == "png") return ImageFormat::png;
  if (s == "pgm") return ImageFormat::pgm_binary;
  if (s == "pgm-ascii") return ImageFormat::pgm_ascii;
  throw ConfigError("unknown image format '" + s + "' (png, pgm, pgm-ascii)");
}

}  // namespace vce::io
