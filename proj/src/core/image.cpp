// SPDX-License-Identifier: Apache-2.0
#include "capstare/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "capstare/errors.hpp"

namespace capstare {

namespace {

void write_image(const std::string& path, png_uint_32 format, std::int64_t height, std::int64_t width,
                 const std::uint8_t* bytes) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = format;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes, 0, nullptr))
    throw DataError(DataError::Kind::invalid, "cannot write " + path + ": " + img.message);
}

}  // namespace

void write_png(const std::string& path, const Image& img) {
  if (img.channels != 3) throw DataError(DataError::Kind::invalid, "write_png: only RGB images are supported");
  const auto plane = img.height * img.width;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(plane * 3));
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(img.data[c * plane + i], 0.0f, 1.0f);
      rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  write_image(path, PNG_FORMAT_RGB, img.height, img.width, rgb.data());
}

Image read_png(const std::string& path) {
  if (!std::filesystem::exists(path)) throw DataError(DataError::Kind::missing_file, "missing file " + path);
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw DataError(DataError::Kind::parse, path + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, rgb.data(), 0, nullptr)) {
    png_image_free(&png);
    throw DataError(DataError::Kind::parse, path + ": " + png.message);
  }
  Image img{3, png.height, png.width, {}};
  const auto plane = img.height * img.width;
  img.data.resize(static_cast<std::size_t>(plane * 3));
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) img.data[c * plane + i] = static_cast<float>(rgb[i * 3 + c]) / 255.0f;
  return img;
}

void write_gray_png(const std::string& path, std::int64_t height, std::int64_t width,
                    const std::vector<std::uint8_t>& pixels) {
  if (static_cast<std::int64_t>(pixels.size()) != height * width)
    throw DataError(DataError::Kind::invalid, "write_gray_png: pixel count does not match " +
                                                  std::to_string(height) + "x" + std::to_string(width));
  write_image(path, PNG_FORMAT_GRAY, height, width, pixels.data());
}

}  // namespace capstare
