// SPDX-License-Identifier: Apache-2.0
#include "sardiff/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>

#include "sardiff/serialize.hpp"

namespace sardiff {

namespace {

std::string read_all(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void put_be32(std::string& s, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xFF));
}

void png_chunk(std::string& out, const char* type, const std::string& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

std::string encode_pgm(const GrayImage& image) {
  if (image.maxval == 0) throw std::invalid_argument("PGM maxval must be positive");
  if (image.pixels.size() != image.width * image.height) throw std::invalid_argument("PGM pixel count mismatch");
  std::ostringstream os(std::ios::binary);
  os << "P5\n" << image.width << ' ' << image.height << '\n' << image.maxval << '\n';
  std::string out = os.str();
  const bool wide = image.maxval > 255;
  out.reserve(out.size() + image.pixels.size() * (wide ? 2 : 1));
  for (std::uint16_t p : image.pixels) {
    if (p > image.maxval) throw std::invalid_argument("PGM pixel exceeds maxval");
    if (wide) out.push_back(static_cast<char>(p >> 8));
    out.push_back(static_cast<char>(p & 0xFF));
  }
  return out;
}

GrayImage decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw std::runtime_error("PGM: truncated header");
    return bytes.substr(start, pos - start);
  };
  if (next_token() != "P5") throw std::runtime_error("PGM: only binary P5 images are supported");
  GrayImage img;
  img.width = std::stoul(next_token());
  img.height = std::stoul(next_token());
  const unsigned long maxval = std::stoul(next_token());
  if (maxval == 0 || maxval > 65535) throw std::runtime_error("PGM: invalid maxval");
  img.maxval = static_cast<std::uint16_t>(maxval);
  ++pos;  // single whitespace after maxval
  const bool wide = img.maxval > 255;
  const std::size_t n = img.width * img.height;
  if (bytes.size() < pos + n * (wide ? 2 : 1)) throw std::runtime_error("PGM: truncated pixel data");
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (wide) {
      img.pixels[i] = static_cast<std::uint16_t>((static_cast<unsigned char>(bytes[pos + 2 * i]) << 8) |
                                                 static_cast<unsigned char>(bytes[pos + 2 * i + 1]));
    } else {
      img.pixels[i] = static_cast<unsigned char>(bytes[pos + i]);
    }
  }
  return img;
}

GrayImage read_pgm(const std::filesystem::path& path) {
  try {
    return decode_pgm(read_all(path));
  } catch (const std::exception& e) {
    throw std::runtime_error("'" + path.string() + "': " + e.what());
  }
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  write_file_atomic(path, encode_pgm(image));
}

void write_png(const std::filesystem::path& path, const GrayImage& image) {
  const bool wide = image.maxval > 255;
  const int depth = wide ? 16 : 8;
  std::string raw;
  raw.reserve(image.height * (1 + image.width * (wide ? 2 : 1)));
  for (std::size_t y = 0; y < image.height; ++y) {
    raw.push_back(0);  // filter: none
    for (std::size_t x = 0; x < image.width; ++x) {
      std::uint32_t v = image.pixels[y * image.width + x];
      // Rescale to the full range of the PNG bit depth.
      const std::uint32_t full = wide ? 65535u : 255u;
      v = static_cast<std::uint32_t>(std::lround(static_cast<double>(v) * full / image.maxval));
      if (wide) raw.push_back(static_cast<char>(v >> 8));
      raw.push_back(static_cast<char>(v & 0xFF));
    }
  }
  uLongf packed_len = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(packed_len, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_len, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw std::runtime_error("PNG: deflate failed");
  }
  packed.resize(packed_len);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(image.width));
  put_be32(ihdr, static_cast<std::uint32_t>(image.height));
  ihdr.push_back(static_cast<char>(depth));
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  png_chunk(out, "IHDR", ihdr);
  png_chunk(out, "IDAT", packed);
  png_chunk(out, "IEND", "");
  write_file_atomic(path, out);
}

Tensor to_tensor(const GrayImage& image) {
  Tensor t({1, 1, image.height, image.width});
  for (std::size_t i = 0; i < image.pixels.size(); ++i) t[i] = static_cast<double>(image.pixels[i]) / image.maxval;
  return t;
}

GrayImage from_tensor(const Tensor& t, std::uint16_t maxval) {
  std::size_t h = 0, w = 0;
  if (t.rank() == 4 && t.dim(0) == 1 && t.dim(1) == 1) {
    h = t.dim(2);
    w = t.dim(3);
  } else if (t.rank() == 2) {
    h = t.dim(0);
    w = t.dim(1);
  } else {
    throw ShapeError("from_tensor: expected [1,1,H,W] or [H,W], got " + shape_str(t.shape()));
  }
  GrayImage img{w, h, maxval, std::vector<std::uint16_t>(h * w)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = static_cast<std::uint16_t>(std::lround(std::clamp(t[i], 0.0, 1.0) * maxval));
  }
  return img;
}

void write_image(const std::filesystem::path& path, const Tensor& t, std::uint16_t maxval) {
  const std::string ext = path.extension().string();
  if (ext == ".png") {
    write_png(path, from_tensor(t, maxval));
  } else if (ext == ".pgm") {
    write_pgm(path, from_tensor(t, maxval));
  } else {
    throw std::invalid_argument("unsupported image extension '" + ext + "' (use .pgm or .png)");
  }
}

Tensor read_image(const std::filesystem::path& path) {
  if (path.extension() != ".pgm") throw std::invalid_argument("only PGM input is supported: '" + path.string() + "'");
  return to_tensor(read_pgm(path));
}

}  // namespace sardiff
