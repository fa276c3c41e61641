#pragma once

#include <lsc/common.hpp>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace lsc::png {

void write_indexed8(const std::filesystem::path& path, Grid grid, const std::vector<int>& labels);
void write_gray16(const std::filesystem::path& path, Grid grid, const std::vector<int>& labels);
void write_rgb8(const std::filesystem::path& path, Grid grid, const std::vector<std::uint8_t>& rgb);

struct Decoded {
  Grid grid;
  std::vector<int> values;  // palette index or gray level
  bool sixteen_bit = false;
};

/// Reads palette-indexed or grayscale PNGs; anything else is an InputError.
Decoded read_labels(const std::filesystem::path& path);

}  // namespace lsc::png
