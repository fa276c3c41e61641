#include <lsc/render.hpp>

#include "png_io.hpp"

#include <cmath>

namespace lsc {

std::vector<std::uint8_t> render_triplet(const EigenField& field, const std::array<int, 3>& channels) {
  if (!field.consistent()) throw InputError("field values do not match its grid");
  for (int c : channels) {
    if (c < 0 || c >= field.channels()) {
      throw InputError("channel " + std::to_string(c) + " outside [0, " + std::to_string(field.channels()) + ")");
    }
  }
  const Eigen::Index n = field.values.rows();
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(n) * 3);
  for (int k = 0; k < 3; ++k) {
    const auto col = field.values.col(channels[k]);
    const double lo = col.minCoeff(), hi = col.maxCoeff();
    for (Eigen::Index i = 0; i < n; ++i) {
      const double t = hi > lo ? (col[i] - lo) / (hi - lo) : 0.5;
      rgb[static_cast<std::size_t>(i) * 3 + k] = static_cast<std::uint8_t>(std::lround(t * 255.0));
    }
  }
  return rgb;
}

void write_triplet_png(const EigenField& field, const std::array<int, 3>& channels, const std::filesystem::path& path) {
  png::write_rgb8(path, field.grid, render_triplet(field, channels));
}

}  // namespace lsc
