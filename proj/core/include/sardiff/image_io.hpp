// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sardiff/tensor.hpp"

namespace sardiff {

/// Quantized single-band image as stored in PGM files.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::uint16_t maxval = 255;
  std::vector<std::uint16_t> pixels;

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

/// Binary PGM (P5); maxval < 256 is 8-bit, otherwise 16-bit big-endian.
GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
std::string encode_pgm(const GrayImage& image);
GrayImage decode_pgm(const std::string& bytes);

/// Grayscale PNG (8 or 16 bit), write-only.
void write_png(const std::filesystem::path& path, const GrayImage& image);

/// [1, 1, H, W] tensor with values pixel / maxval.
Tensor to_tensor(const GrayImage& image);
/// Quantizes round(clamp(v, 0, 1) * maxval). Accepts [1,1,H,W] or [H,W].
GrayImage from_tensor(const Tensor& t, std::uint16_t maxval = 65535);

/// Writes PGM or PNG depending on the file extension.
void write_image(const std::filesystem::path& path, const Tensor& t, std::uint16_t maxval = 65535);
Tensor read_image(const std::filesystem::path& path);

}  // namespace sardiff
