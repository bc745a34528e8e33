// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace capstare {

/// Planar float image, channel-major [C, H, W], values in [0, 1].
struct Image {
  std::int64_t channels = 3;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> data;

  float& at(std::int64_t c, std::int64_t y, std::int64_t x) { return data[(c * height + y) * width + x]; }
  float at(std::int64_t c, std::int64_t y, std::int64_t x) const { return data[(c * height + y) * width + x]; }
};

/// 8-bit RGB PNG; values are rounded to the nearest level.
void write_png(const std::string& path, const Image& img);
/// Any PNG, converted to 8-bit RGB. DataError(missing_file) when absent,
/// DataError(parse) when undecodable.
Image read_png(const std::string& path);

void write_gray_png(const std::string& path, std::int64_t height, std::int64_t width,
                    const std::vector<std::uint8_t>& pixels);

}  // namespace capstare
