#pragma once

// Dense exact solvers: the normalized-cut baseline and the oracles used to check
// the gradient method.

#include <lsc/graph_builder.hpp>

#include <string>
#include <vector>

namespace lsc {

struct EigenPair {
  double eigenvalue = 0.0;
  Vector eigenvector;  // unit Euclidean norm
};

struct SpectralResult {
  std::vector<EigenPair> pairs;
  bool symmetrized = false;  // input was asymmetric and replaced by (A + A^T) / 2
};

/// Smallest m generalized eigenpairs of (D - A) x = λ D x, ascending λ.
SpectralResult solve_ncut(const AffinityGraph& graph, int m);

/// Largest C eigenpairs of (D^-1 A + (D^-1 A)^T) / 2, descending.
SpectralResult sym_randomwalk_topc(const AffinityGraph& graph, int c);

/// Principal angles in degrees (ascending) between the column spans of u and v.
std::vector<double> principal_angles(const Matrix& u, const Matrix& v);

/// Number of connected components of the (symmetrized) nonzero pattern.
int connected_components(const AffinityGraph& graph);

/// Stacks eigenvectors as columns.
Matrix eigenvector_matrix(const std::vector<EigenPair>& pairs);

}  // namespace lsc
