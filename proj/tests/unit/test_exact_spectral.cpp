#include <doctest.h>

#include "synthetic.hpp"

#include <lsc/exact_spectral.hpp>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

using namespace lsc;

namespace {

int union_find_components(const Matrix& a) {
  const auto n = static_cast<int>(a.rows());
  std::vector<int> parent(static_cast<std::size_t>(n));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    return x;
  };
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (a(i, j) != 0.0 || a(j, i) != 0.0) parent[static_cast<std::size_t>(find(i))] = find(j);
    }
  }
  std::set<int> roots;
  for (int i = 0; i < n; ++i) roots.insert(find(i));
  return static_cast<int>(roots.size());
}

double ncut_residual(const Matrix& a, const EigenPair& p) {
  const Vector d = a.rowwise().sum();
  const Matrix l = Matrix(d.asDiagonal()) - a;
  return (l * p.eigenvector - p.eigenvalue * (d.asDiagonal() * p.eigenvector)).norm();
}

// Symmetric circulant: every row sums to the same value, so D^-1 A is doubly stochastic.
AffinityGraph circulant(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::vector<double> w(static_cast<std::size_t>(n / 2 + 1));
  for (auto& x : w) x = u(rng);
  Matrix a(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const int k = std::abs(i - j);
      a(i, j) = w[static_cast<std::size_t>(std::min(k, n - k))];
    }
  }
  return {a, {1, n}};
}

}  // namespace

TEST_CASE("normalized-cut eigenproblem") {
  SUBCASE("two-node graph") {
    const SpectralResult r = solve_ncut(AffinityGraph((Matrix(2, 2) << 0, 1, 1, 0).finished(), {1, 2}), 2);
    REQUIRE(r.pairs.size() == 2);
    CHECK(r.pairs[0].eigenvalue == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.pairs[1].eigenvalue == doctest::Approx(2.0));
    CHECK(std::abs(r.pairs[0].eigenvector(0) - r.pairs[0].eigenvector(1)) < 1e-12);
    CHECK(std::abs(r.pairs[1].eigenvector(0) + r.pairs[1].eigenvector(1)) < 1e-12);
    CHECK_FALSE(r.symmetrized);
  }
  SUBCASE("path with m = n") {
    Matrix a = Matrix::Zero(4, 4);
    for (int i = 0; i < 3; ++i) a(i, i + 1) = a(i + 1, i) = 1;
    const SpectralResult r = solve_ncut(AffinityGraph(a, {1, 4}), 4);
    REQUIRE(r.pairs.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(r.pairs[i].eigenvector.norm() == doctest::Approx(1.0));
      CHECK(ncut_residual(a, r.pairs[i]) < 1e-8 * 2);
      if (i > 0) CHECK(r.pairs[i].eigenvalue >= r.pairs[i - 1].eigenvalue);
    }
    // Path spectrum of the normalized Laplacian is 1 - cos(pi k / 3).
    for (int k = 0; k < 4; ++k) CHECK(r.pairs[static_cast<std::size_t>(k)].eigenvalue == doctest::Approx(1 - std::cos(M_PI * k / 3)));
  }
  SUBCASE("components, residuals and spectrum bound on random graphs") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 100; ++t) {
      const int n = 4 + static_cast<int>(rng() % 20);
      const int comps = 1 + static_cast<int>(rng() % std::min(4, n / 2));
      const AffinityGraph g = testing::random_component_graph(n, comps, rng);
      const Matrix a = g.to_dense();
      const int expected = union_find_components(a);
      CHECK(connected_components(g) == expected);
      const SpectralResult r = solve_ncut(g, n);
      int zeros = 0;
      for (const auto& p : r.pairs) {
        CHECK(ncut_residual(a, p) < 1e-8 * a.rowwise().sum().maxCoeff());
        CHECK(p.eigenvalue > -1e-10);
        CHECK(p.eigenvalue < 2 + 1e-10);
        zeros += std::abs(p.eigenvalue) < 1e-9;
      }
      CHECK(zeros == expected);
    }
  }
  SUBCASE("connected graph has the constant vector first") {
    std::mt19937_64 rng(2);
    const SpectralResult r = solve_ncut(testing::random_graph(9, 0.0, rng), 3);
    const Vector& v = r.pairs[0].eigenvector;
    CHECK((v.array() - v(0)).abs().maxCoeff() < 1e-9);
  }
  SUBCASE("asymmetric input is symmetrized") {
    Matrix a(3, 3);
    a << 0, 2, 1, 0, 0, 1, 1, 1, 0;
    const SpectralResult r = solve_ncut(AffinityGraph(a, {1, 3}), 3);
    CHECK(r.symmetrized);
    const Matrix s = (a + a.transpose()) / 2;
    for (const auto& p : r.pairs) CHECK(ncut_residual(s, p) < 1e-8);
  }
  SUBCASE("errors") {
    Matrix a = Matrix::Zero(3, 3);
    a(0, 1) = a(1, 0) = 1;
    CHECK_THROWS_AS(solve_ncut(AffinityGraph(a, {1, 3}), 2), ComputeError);
    CHECK_THROWS_AS(solve_ncut(testing::block_graph({2, 2}), 5), InputError);
  }
}

TEST_CASE("symmetrized random-walk eigenpairs") {
  SUBCASE("two blocks") {
    const SpectralResult r = sym_randomwalk_topc(testing::block_graph({2, 2}), 2);
    REQUIRE(r.pairs.size() == 2);
    CHECK(r.pairs[0].eigenvalue == doctest::Approx(1.0));
    CHECK(r.pairs[1].eigenvalue == doctest::Approx(1.0));
    Matrix ind(4, 2);
    ind << 1, 0, 1, 0, 0, 1, 0, 1;
    for (double ang : principal_angles(eigenvector_matrix(r.pairs), ind)) CHECK(ang < 1e-4);
  }
  SUBCASE("doubly stochastic inputs top out at exactly 1 with a constant vector") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
      const int n = 3 + static_cast<int>(rng() % 12);
      const SpectralResult r = sym_randomwalk_topc(circulant(n, rng), 2);
      CHECK(r.pairs[0].eigenvalue == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(r.pairs[0].eigenvalue <= 1 + 1e-8);
      const Vector& v = r.pairs[0].eigenvector;
      CHECK((v.array() - v(0)).abs().maxCoeff() < 1e-8);
      CHECK(r.pairs[1].eigenvalue <= r.pairs[0].eigenvalue);
    }
  }
  SUBCASE("empty request") { CHECK(sym_randomwalk_topc(testing::block_graph({2, 2}), 0).pairs.empty()); }
  SUBCASE("errors") { CHECK_THROWS_AS(sym_randomwalk_topc(testing::block_graph({2}), 3), InputError); }
}

TEST_CASE("principal angles") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  SUBCASE("hand examples") {
    const Matrix e1 = (Matrix(2, 1) << 1, 0).finished();
    const Matrix e2 = (Matrix(2, 1) << 0, 1).finished();
    const Matrix diag = (Matrix(2, 1) << 1, 1).finished() / std::sqrt(2.0);
    CHECK(principal_angles(e1, e1)[0] == doctest::Approx(0.0));
    CHECK(principal_angles(e1, e2)[0] == doctest::Approx(90.0));
    CHECK(principal_angles(e1, diag)[0] == doctest::Approx(45.0));
  }
  SUBCASE("invariant to basis change and scaling") {
    Matrix u(8, 3), m(3, 3);
    for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = nd(rng);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    for (double a : principal_angles(u, 5.0 * u * m)) CHECK(a < 1e-5);
  }
  SUBCASE("count is min(p, q), sorted, within range") {
    Matrix u(6, 2), v(6, 4);
    for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = nd(rng);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = nd(rng);
    const auto a = principal_angles(u, v);
    REQUIRE(a.size() == 2);
    CHECK(a[0] <= a[1]);
    CHECK(a[0] >= 0.0);
    CHECK(a[1] <= 90.0);
  }
  SUBCASE("rank deficiency") {
    Matrix u(4, 2);
    u.col(0) = Vector::Ones(4);
    u.col(1) = 2 * Vector::Ones(4);
    CHECK_THROWS_AS(principal_angles(u, Matrix::Identity(4, 2)), InputError);
    CHECK_THROWS_AS(principal_angles(Matrix::Identity(4, 2), Matrix::Identity(3, 2)), InputError);
  }
}
