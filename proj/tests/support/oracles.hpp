#pragma once

// Independent reference implementations. Written from the definitions, with no
// shared code paths with the library, so they can serve as test oracles.

#include <lsc/common.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace lsc::oracle {

/// Align-corners bilinear sample of a row-major (src.rows x src.cols) scalar field.
inline double bilinear_at(const Vector& f, Grid src, double r, double c) {
  const int r0 = std::min(static_cast<int>(std::floor(r)), src.rows - 1);
  const int c0 = std::min(static_cast<int>(std::floor(c)), src.cols - 1);
  const int r1 = std::min(r0 + 1, src.rows - 1);
  const int c1 = std::min(c0 + 1, src.cols - 1);
  const double fr = r - r0, fc = c - c0;
  auto v = [&](int rr, int cc) { return f[static_cast<Eigen::Index>(rr) * src.cols + cc]; };
  return (1 - fr) * (1 - fc) * v(r0, c0) + (1 - fr) * fc * v(r0, c1) + fr * (1 - fc) * v(r1, c0) + fr * fc * v(r1, c1);
}

inline Matrix bilinear(const Matrix& x, Grid src, Grid dst) {
  Matrix out(static_cast<Eigen::Index>(dst.size()), x.cols());
  for (Eigen::Index ch = 0; ch < x.cols(); ++ch) {
    const Vector f = x.col(ch);
    for (int i = 0; i < dst.rows; ++i) {
      for (int j = 0; j < dst.cols; ++j) {
        const double r = dst.rows == 1 ? 0.0 : i * double(src.rows - 1) / (dst.rows - 1);
        const double c = dst.cols == 1 ? 0.0 : j * double(src.cols - 1) / (dst.cols - 1);
        out(static_cast<Eigen::Index>(i) * dst.cols + j, ch) = bilinear_at(f, src, r, c);
      }
    }
  }
  return out;
}

struct DenseGraph {
  Matrix a;
  Grid grid;
};

/// Loss straight from the definition: per-channel |ĝᵀ D⁻¹A ĝ − 1| averaged over
/// graphs, plus ‖XᵀX − I‖_F on the raw field.
inline double loss(const Matrix& x, Grid field_grid, const std::vector<DenseGraph>& graphs) {
  double rayleigh = 0.0;
  for (const auto& g : graphs) {
    const Matrix y = bilinear(x, field_grid, g.grid);
    const Vector deg = g.a.rowwise().sum();
    const Matrix p = deg.cwiseInverse().asDiagonal() * g.a;
    for (Eigen::Index c = 0; c < y.cols(); ++c) {
      const Vector yc = y.col(c) / y.col(c).norm();
      rayleigh += std::abs(yc.dot(p * yc) - 1.0);
    }
  }
  rayleigh /= static_cast<double>(graphs.size());
  const Matrix e = x.transpose() * x - Matrix::Identity(x.cols(), x.cols());
  return rayleigh + e.norm();
}

/// Row-wise softmax of s.
inline Matrix softmax_rows(const Matrix& s) {
  Matrix out(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) z += std::exp(s(i, j) - m);
    for (Eigen::Index j = 0; j < s.cols(); ++j) out(i, j) = std::exp(s(i, j) - m) / z;
  }
  return out;
}

/// Best one-to-one total over all permutations of the columns (square counts).
template <typename M>
std::int64_t best_assignment_total(const M& counts) {
  const int k = static_cast<int>(counts.rows());
  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  std::int64_t best = -1;
  do {
    std::int64_t total = 0;
    for (int r = 0; r < k; ++r) total += counts(r, perm[static_cast<std::size_t>(r)]);
    best = std::max(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Lexicographically smallest optimal permutation (rows -> columns).
template <typename M>
std::vector<int> best_assignment(const M& counts) {
  const int k = static_cast<int>(counts.rows());
  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  std::int64_t best = -1;
  std::vector<int> arg;
  do {
    std::int64_t total = 0;
    for (int r = 0; r < k; ++r) total += counts(r, perm[static_cast<std::size_t>(r)]);
    if (total > best) {  // first optimum in lexicographic order wins
      best = total;
      arg = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return arg;
}

/// O(n²) silhouette over all points.
inline double silhouette(const Matrix& pts, const std::vector<int>& labels) {
  const auto n = static_cast<std::size_t>(pts.rows());
  const int k = *std::max_element(labels.begin(), labels.end()) + 1;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> sum(static_cast<std::size_t>(k), 0.0);
    std::vector<int> cnt(static_cast<std::size_t>(k), 0);
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      sum[static_cast<std::size_t>(labels[j])] += (pts.row(static_cast<Eigen::Index>(i)) - pts.row(static_cast<Eigen::Index>(j))).norm();
      ++cnt[static_cast<std::size_t>(labels[j])];
    }
    const auto own = static_cast<std::size_t>(labels[i]);
    if (cnt[own] == 0) continue;  // singleton contributes 0
    const double a = sum[own] / cnt[own];
    double b = INFINITY;
    for (int c = 0; c < k; ++c) {
      if (static_cast<std::size_t>(c) == own || cnt[static_cast<std::size_t>(c)] == 0) continue;
      b = std::min(b, sum[static_cast<std::size_t>(c)] / cnt[static_cast<std::size_t>(c)]);
    }
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(n);
}

/// Pair-counting Rand statistics turned into ARI (Hubert and Arabie).
inline double ari(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size();
  double both = 0, in_a = 0, in_b = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      both += sa && sb;
      in_a += sa;
      in_b += sb;
    }
  }
  const double pairs = n * (n - 1) / 2.0;
  const double expected = in_a * in_b / pairs;
  const double max_index = 0.5 * (in_a + in_b);
  if (max_index == expected) return 1.0;
  return (both - expected) / (max_index - expected);
}

/// Matches labels up to a permutation (bijection between label sets).
inline bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      if ((a[i] == a[j]) != (b[i] == b[j])) return false;
    }
  }
  return true;
}

}  // namespace lsc::oracle
