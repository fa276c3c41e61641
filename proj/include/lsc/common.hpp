#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lsc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Malformed input: bad files, shapes, arguments. The CLI maps this to exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numerical or algorithmic failure on valid input (divergence, isolated nodes, ...). Exit code 1.
class ComputeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Spatial node grid. Node index of (r, c) is r * cols + c (row-major raster order).
struct Grid {
  int rows = 0;
  int cols = 0;

  [[nodiscard]] std::size_t size() const {
    return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }
  [[nodiscard]] bool valid() const { return rows > 0 && cols > 0; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

inline std::string to_string(const Grid& g) {
  return std::to_string(g.rows) + "x" + std::to_string(g.cols);
}

}  // namespace lsc
