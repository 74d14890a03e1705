#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mde/errors.hpp"

namespace mde {

/// Interleaved 8-bit image, 1 or 3 channels.
struct RasterU8 {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
};

/// Single-channel 16-bit raster.
struct RasterU16 {
  std::size_t height = 0, width = 0;
  std::vector<std::uint16_t> pixels;
};

namespace detail {

inline int pnm_token(std::istream& is, const std::string& path) {
  // skip whitespace and '#' comments
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (!std::isspace(c)) {
      break;
    } else {
      c = is.get();
    }
  }
  if (c == EOF || !std::isdigit(c)) throw DataError("malformed PNM header in '" + path + "'");
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
  }
  return v;
}

}  // namespace detail

/// Reads binary PGM (P5) and PPM (P6). 8-bit maxval gives channels x H x W
/// bytes; a 16-bit PGM (maxval > 255) is reported through `raw16`.
struct PnmImage {
  RasterU8 u8;
  RasterU16 raw16;
  bool is16 = false;
  std::size_t channels() const { return is16 ? 1 : u8.channels; }
  std::size_t height() const { return is16 ? raw16.height : u8.height; }
  std::size_t width() const { return is16 ? raw16.width : u8.width; }
};

inline PnmImage read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open raster '" + path + "'");
  char p, kind;
  f.get(p);
  f.get(kind);
  if (p != 'P' || (kind != '5' && kind != '6'))
    throw DataError("unsupported raster format in '" + path + "' (expected binary PGM/PPM)");
  const std::size_t channels = kind == '6' ? 3 : 1;
  const std::size_t width = std::size_t(detail::pnm_token(f, path));
  const std::size_t height = std::size_t(detail::pnm_token(f, path));
  const int maxval = detail::pnm_token(f, path);
  if (width == 0 || height == 0 || maxval <= 0 || maxval > 65535)
    throw DataError("invalid PNM dimensions in '" + path + "'");
  PnmImage img;
  if (maxval > 255) {
    if (channels != 1) throw DataError("16-bit PPM not supported: '" + path + "'");
    img.is16 = true;
    img.raw16.height = height;
    img.raw16.width = width;
    img.raw16.pixels.resize(height * width);
    std::vector<std::uint8_t> buf(height * width * 2);
    f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (!f) throw DataError("truncated raster '" + path + "'");
    for (std::size_t i = 0; i < img.raw16.pixels.size(); ++i)  // big-endian per PNM
      img.raw16.pixels[i] = std::uint16_t((buf[2 * i] << 8) | buf[2 * i + 1]);
  } else {
    img.u8.channels = channels;
    img.u8.height = height;
    img.u8.width = width;
    img.u8.pixels.resize(channels * height * width);
    f.read(reinterpret_cast<char*>(img.u8.pixels.data()), std::streamsize(img.u8.pixels.size()));
    if (!f) throw DataError("truncated raster '" + path + "'");
  }
  return img;
}

inline void write_ppm(const std::string& path, const RasterU8& img) {
  if (img.channels != 3) throw IoError("write_ppm: expected 3 channels");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  if (!f) throw IoError("write failed: '" + path + "'");
}

inline void write_pgm8(const std::string& path, const RasterU8& img) {
  if (img.channels != 1) throw IoError("write_pgm8: expected 1 channel");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  if (!f) throw IoError("write failed: '" + path + "'");
}

inline void write_pgm16(const std::string& path, const RasterU16& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << "P5\n" << img.width << " " << img.height << "\n65535\n";
  std::vector<std::uint8_t> buf(img.pixels.size() * 2);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    buf[2 * i] = std::uint8_t(img.pixels[i] >> 8);
    buf[2 * i + 1] = std::uint8_t(img.pixels[i] & 0xff);
  }
  f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  if (!f) throw IoError("write failed: '" + path + "'");
}

}  // namespace mde
