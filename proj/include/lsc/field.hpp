#pragma once

#include <lsc/common.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace lsc {

/// Learnable pseudo-eigenvector field: one row per grid node (raster order), one column per channel.
struct EigenField {
  Grid grid;
  Matrix values;

  EigenField() = default;
  EigenField(Grid g, int channels) : grid(g), values(Matrix::Zero(static_cast<Eigen::Index>(g.size()), channels)) {}
  EigenField(Grid g, Matrix v) : grid(g), values(std::move(v)) {}

  [[nodiscard]] int channels() const { return static_cast<int>(values.cols()); }
  [[nodiscard]] bool consistent() const {
    return grid.valid() && values.rows() == static_cast<Eigen::Index>(grid.size()) && values.cols() > 0;
  }
};

/// Orthogonalized field: channels sorted by decreasing eigenvalue of the Gram matrix.
struct OrthoEigenField {
  EigenField field;
  Vector eigenvalues;
};

/// Hard segmentation over a grid with provenance.
struct SegmentationMap {
  Grid grid;
  std::vector<int> labels;
  int k = 0;
  std::uint64_t seed = 0;
  std::string k_mode = "fixed";  // "auto" or "fixed"
  std::string source;
  bool degenerate = false;  // some label in [0, k) is unused
};

/// Ground-truth style label grid. Pixels equal to `ignore` are excluded from metrics.
struct LabelGrid {
  Grid grid;
  std::vector<int> labels;

  [[nodiscard]] int at(int r, int c) const { return labels[static_cast<std::size_t>(r) * grid.cols + c]; }
};

inline constexpr int kIgnoreLabel = 255;

}  // namespace lsc
