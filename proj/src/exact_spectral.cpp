#include <lsc/exact_spectral.hpp>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace lsc {

namespace {

struct Prepared {
  Matrix a;
  Vector deg;
  bool symmetrized = false;
};

Prepared prepare(const AffinityGraph& graph, int requested) {
  const Eigen::Index n = graph.n_nodes();
  if (requested < 0) throw InputError("number of eigenpairs must be non-negative");
  if (requested > n) {
    throw InputError("requested " + std::to_string(requested) + " eigenpairs from a " + std::to_string(n) +
                     "-node graph");
  }
  Prepared p;
  p.a = graph.to_dense();
  if (!graph.is_symmetric()) {
    p.a = (0.5 * (p.a + p.a.transpose())).eval();
    p.symmetrized = true;
  }
  p.deg = p.a.rowwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(p.deg[i] > 0.0)) throw ComputeError("node " + std::to_string(i) + " has zero degree");
  }
  return p;
}

}  // namespace

SpectralResult solve_ncut(const AffinityGraph& graph, int m) {
  Prepared p = prepare(graph, m);
  SpectralResult out;
  out.symmetrized = p.symmetrized;
  if (m == 0) return out;

  // D^-1/2 (D - A) D^-1/2 v = λ v, x = D^-1/2 v.
  const Vector inv_sqrt = p.deg.cwiseSqrt().cwiseInverse();
  Matrix lap = -(inv_sqrt.asDiagonal() * p.a * inv_sqrt.asDiagonal());
  lap.diagonal().array() += 1.0;
  lap = (0.5 * (lap + lap.transpose())).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> solver(lap);
  if (solver.info() != Eigen::Success) throw ComputeError("normalized Laplacian eigendecomposition failed");

  for (int k = 0; k < m; ++k) {
    Vector x = inv_sqrt.asDiagonal() * solver.eigenvectors().col(k);
    x.normalize();
    out.pairs.push_back({std::max(solver.eigenvalues()[k], 0.0), std::move(x)});
  }
  return out;
}

SpectralResult sym_randomwalk_topc(const AffinityGraph& graph, int c) {
  Prepared p = prepare(graph, c);
  SpectralResult out;
  out.symmetrized = p.symmetrized;
  if (c == 0) return out;
  const Matrix walk = p.deg.cwiseInverse().asDiagonal() * p.a;
  const Matrix sym = 0.5 * (walk + walk.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
  if (solver.info() != Eigen::Success) throw ComputeError("random-walk eigendecomposition failed");
  const Eigen::Index n = sym.rows();
  for (int k = 0; k < c; ++k) {
    out.pairs.push_back({solver.eigenvalues()[n - 1 - k], solver.eigenvectors().col(n - 1 - k)});
  }
  return out;
}

namespace {

Matrix orthonormal_basis(const Matrix& m, const char* which) {
  if (m.cols() == 0) return m;
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU);
  const Vector& s = svd.singularValues();
  const double tol = std::max(m.rows(), m.cols()) * std::numeric_limits<double>::epsilon() * s[0];
  if (!(s[0] > 0.0) || s[s.size() - 1] <= tol) {
    throw InputError(std::string(which) + " basis is rank-deficient");
  }
  return svd.matrixU();
}

}  // namespace

std::vector<double> principal_angles(const Matrix& u, const Matrix& v) {
  if (u.rows() != v.rows()) throw InputError("subspace bases live in different dimensions");
  const Matrix qu = orthonormal_basis(u, "first");
  const Matrix qv = orthonormal_basis(v, "second");
  std::vector<double> angles;
  if (qu.cols() == 0 || qv.cols() == 0) return angles;
  Eigen::JacobiSVD<Matrix> svd(qu.transpose() * qv);
  const Vector& s = svd.singularValues();  // descending cosines
  for (Eigen::Index k = 0; k < s.size(); ++k) {
    angles.push_back(std::acos(std::clamp(s[k], 0.0, 1.0)) * 180.0 / std::numbers::pi);
  }
  std::sort(angles.begin(), angles.end());
  return angles;
}

int connected_components(const AffinityGraph& graph) {
  const Eigen::Index n = graph.n_nodes();
  std::vector<Eigen::Index> parent(static_cast<std::size_t>(n));
  std::iota(parent.begin(), parent.end(), Eigen::Index{0});
  auto find = [&](Eigen::Index x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  };
  auto unite = [&](Eigen::Index a, Eigen::Index b) { parent[static_cast<std::size_t>(find(a))] = find(b); };
  if (graph.is_sparse()) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (SparseMatrix::InnerIterator it(graph.sparse(), i); it; ++it) {
        if (it.value() > 0.0) unite(i, it.col());
      }
    }
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (graph.dense()(i, j) > 0.0) unite(i, j);
      }
    }
  }
  int count = 0;
  for (Eigen::Index i = 0; i < n; ++i) count += find(i) == i ? 1 : 0;
  return count;
}

Matrix eigenvector_matrix(const std::vector<EigenPair>& pairs) {
  if (pairs.empty()) return {};
  Matrix m(pairs.front().eigenvector.size(), static_cast<Eigen::Index>(pairs.size()));
  for (std::size_t k = 0; k < pairs.size(); ++k) m.col(static_cast<Eigen::Index>(k)) = pairs[k].eigenvector;
  return m;
}

}  // namespace lsc
