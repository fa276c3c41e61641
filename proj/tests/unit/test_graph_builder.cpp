#include <doctest.h>

#include "oracles.hpp"
#include "synthetic.hpp"

#include <lsc/graph_builder.hpp>

#include <cmath>
#include <random>
#include <set>

using namespace lsc;
namespace fs = std::filesystem;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

// Writes a bundle whose value/query/key tokens at layer 0 are `tokens` (grid 1 x n).
FeatureBundle token_bundle(const fs::path& dir, const std::string& id, const Matrix& tokens) {
  fs::create_directories(dir / id);
  Manifest m;
  m.image_id = id;
  m.root = dir / id;
  const Grid g{1, static_cast<int>(tokens.rows())};
  const Tensor3 t = Tensor3::from_matrix(g, tokens);
  add_tensor(m, {"q", TensorKind::query, 0, std::nullopt, 0, 0, {}, {}}, t);
  add_tensor(m, {"k", TensorKind::key, 0, std::nullopt, 0, 0, {}, {}}, t);
  add_tensor(m, {"v", TensorKind::value, 0, std::nullopt, 0, 0, {}, {}}, t);
  save_manifest(m, m.root / "manifest.json");
  return FeatureBundle::load(m.root / "manifest.json");
}

// Bundle with `layers` layers x `heads` heads of random q/k on a 2x2 grid, d = 3 per head.
FeatureBundle headed_bundle(const fs::path& dir, int layers, int heads, int timesteps = 1) {
  Manifest m;
  m.image_id = "heads";
  m.root = dir;
  std::mt19937_64 rng(5);
  for (int t = 0; t < timesteps; ++t) {
    for (int l = 0; l < layers; ++l) {
      for (int h = 0; h < heads; ++h) {
        const std::string s = "_l" + std::to_string(l) + "_h" + std::to_string(h) + "_t" + std::to_string(t);
        add_tensor(m, {"q" + s, TensorKind::query, l, h, t, 0, {}, {}},
                   Tensor3::from_matrix({2, 2}, random_matrix(4, 3, rng)));
        add_tensor(m, {"k" + s, TensorKind::key, l, h, t, 0, {}, {}},
                   Tensor3::from_matrix({2, 2}, random_matrix(4, 3, rng)));
      }
    }
  }
  save_manifest(m, dir / "manifest.json");
  return FeatureBundle::load(dir / "manifest.json");
}

void check_graph_invariants(const AffinityGraph& g) {
  const Matrix a = g.to_dense();
  CHECK(a.minCoeff() >= 0.0);
  const Vector rows = a.rowwise().sum();
  for (Eigen::Index i = 0; i < rows.size(); ++i) {
    CHECK(g.degrees()[i] == doctest::Approx(rows[i]).epsilon(1e-12));
    CHECK(g.degrees()[i] > 0.0);
  }
}

}  // namespace

TEST_CASE("qk affinity is exp of scaled dot products") {
  SUBCASE("zero tokens give all ones") {
    const AffinityGraph g = build_qk_affinity(Matrix::Zero(2, 3), Matrix::Zero(2, 3), 3, {1, 2});
    CHECK(g.dense() == Matrix::Ones(2, 2));
  }
  SUBCASE("identity tokens") {
    const AffinityGraph g = build_qk_affinity(Matrix::Identity(2, 2), Matrix::Identity(2, 2), 2, {1, 2});
    CHECK(g.dense()(0, 0) == doctest::Approx(2.02812).epsilon(1e-5));
    CHECK(g.dense()(1, 1) == doctest::Approx(std::exp(1.0 / std::sqrt(2.0))));
    CHECK(g.dense()(0, 1) == 1.0);
    CHECK(g.dense()(1, 0) == 1.0);
  }
  SUBCASE("entries are strictly positive and degrees are row sums") {
    std::mt19937_64 rng(3);
    const AffinityGraph g = build_qk_affinity(random_matrix(6, 4, rng), random_matrix(6, 4, rng), 4, {2, 3});
    CHECK(g.dense().minCoeff() > 0.0);
    check_graph_invariants(g);
  }
  SUBCASE("bad inputs") {
    CHECK_THROWS_AS(build_qk_affinity(Matrix::Zero(2, 3), Matrix::Zero(3, 3), 3, {1, 2}), InputError);
    CHECK_THROWS_AS(build_qk_affinity(Matrix::Zero(2, 3), Matrix::Zero(2, 3), 0, {1, 2}), InputError);
    CHECK_THROWS_AS(build_qk_affinity(Matrix::Zero(2, 3), Matrix::Zero(2, 3), 3, {2, 2}), InputError);
    Matrix nan = Matrix::Zero(2, 3);
    nan(0, 0) = std::nan("");
    CHECK_THROWS_AS(build_qk_affinity(nan, Matrix::Zero(2, 3), 3, {1, 2}), InputError);
  }
}

TEST_CASE("row normalization") {
  SUBCASE("hand example") {
    Matrix a(2, 2);
    a << 2, 2, 1, 3;
    Matrix expected(2, 2);
    expected << 0.5, 0.5, 0.25, 0.75;
    CHECK(row_normalize(AffinityGraph(a, {1, 2})).isApprox(expected, 1e-15));
  }
  SUBCASE("ones block") {
    const Matrix p = row_normalize(AffinityGraph(Matrix::Ones(2, 2), {1, 2}));
    CHECK(p == Matrix::Constant(2, 2, 0.5));
  }
  SUBCASE("zero row is an error") {
    Matrix a(2, 2);
    a << 1, 1, 0, 0;
    CHECK_THROWS_AS(row_normalize(AffinityGraph(a, {1, 2})), ComputeError);
  }
  SUBCASE("negative weights are rejected") {
    Matrix a(2, 2);
    a << 1, -1, 1, 1;
    CHECK_THROWS_AS(AffinityGraph(a, {1, 2}), InputError);
  }
}

TEST_CASE("row-normalized attention graph equals softmax attention") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 10), d = 1 + static_cast<int>(rng() % 6);
    const Matrix q = random_matrix(n, d, rng), k = random_matrix(n, d, rng);
    const Matrix p = row_normalize(build_qk_affinity(q, k, d, {1, n}));
    const Matrix s = oracle::softmax_rows(q * k.transpose() / std::sqrt(static_cast<double>(d)));
    CHECK((p - s).cwiseAbs().maxCoeff() < 1e-6);
    for (Eigen::Index i = 0; i < p.rows(); ++i) CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("transition products match the dense random-walk matrix") {
  std::mt19937_64 rng(4);
  const AffinityGraph g = testing::random_graph(9, 0.3, rng);
  const Matrix y = random_matrix(9, 3, rng);
  const Matrix p = row_normalize(g);
  CHECK(g.transition_times(y).isApprox(p * y, 1e-12));
  CHECK(g.transition_transpose_times(y).isApprox(p.transpose() * y, 1e-12));
}

TEST_CASE("top-c sparsification") {
  SUBCASE("keeps the largest intra entry") {
    Matrix a(3, 3);
    a << 0.1, 0.9, 0.8, 0.9, 1.0, 0.2, 0.8, 0.2, 1.0;
    GraphConfig cfg;
    cfg.c_intra = 1;
    const AffinityGraph s = sparsify_topc(AffinityGraph(a, {1, 3}), cfg);
    CHECK(s.is_sparse());
    CHECK(s.weight(0, 0) == 0.0);
    CHECK(s.weight(0, 1) == 0.9);
    CHECK(s.weight(0, 2) == 0.0);
    CHECK(s.degrees()[0] == 0.9);
  }
  SUBCASE("c at least the row length is a no-op") {
    std::mt19937_64 rng(2);
    const AffinityGraph g = testing::random_graph(7, 0.0, rng);
    GraphConfig cfg;
    cfg.c_intra = 7;
    CHECK(sparsify_topc(g, cfg).to_dense() == g.to_dense());
  }
  SUBCASE("threshold above every entry isolates nodes") {
    Matrix a(3, 3);
    a << 0.5, 0.2, 0.3, 0.2, 0.6, 0.1, 0.3, 0.1, 0.7;
    GraphConfig cfg;
    cfg.threshold = 1.0;
    CHECK_THROWS_WITH_AS(sparsify_topc(AffinityGraph(a, {1, 3}), cfg), doctest::Contains("isolated"), ComputeError);
  }
  SUBCASE("invalid configs") {
    GraphConfig cfg;
    cfg.c_intra = 0;
    CHECK_THROWS_AS(sparsify_topc(AffinityGraph(Matrix::Ones(2, 2), {1, 2}), cfg), InputError);
    cfg = {};
    cfg.c_inter = -1;
    CHECK_THROWS_AS(sparsify_topc(AffinityGraph(Matrix::Ones(2, 2), {1, 2}), cfg), InputError);
    cfg = {};
    cfg.threshold = -0.5;
    CHECK_THROWS_AS(sparsify_topc(AffinityGraph(Matrix::Ones(2, 2), {1, 2}), cfg), InputError);
  }
  SUBCASE("idempotent on random multi-image graphs") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
      const int b = 1 + static_cast<int>(rng() % 3), per = 3 + static_cast<int>(rng() % 4);
      const int n = b * per;
      Matrix a = testing::random_graph(n, 0.2, rng).to_dense();
      SparseMatrix s = a.sparseView();
      const AffinityGraph g(std::move(s), std::vector<Grid>(static_cast<std::size_t>(b), Grid{1, per}));
      GraphConfig cfg;
      cfg.c_intra = 1 + static_cast<int>(rng() % 3);
      cfg.c_inter = static_cast<int>(rng() % 3);
      const AffinityGraph once = sparsify_topc(g, cfg);
      const AffinityGraph twice = sparsify_topc(once, cfg);
      CHECK(once.to_dense() == twice.to_dense());
      check_graph_invariants(once);
      // Each row keeps at most c_intra + c_inter entries, split by image.
      for (Eigen::Index i = 0; i < n; ++i) {
        int intra = 0, inter = 0;
        for (SparseMatrix::InnerIterator it(once.sparse(), i); it; ++it) {
          (once.image_of(it.col()) == once.image_of(i) ? intra : inter)++;
        }
        CHECK(intra <= cfg.c_intra);
        CHECK(inter <= cfg.c_inter);
      }
    }
  }
  SUBCASE("ties resolve to the lower column") {
    GraphConfig cfg;
    cfg.c_intra = 2;
    const AffinityGraph s = sparsify_topc(AffinityGraph(Matrix::Ones(4, 4), {1, 4}), cfg);
    for (Eigen::Index i = 0; i < 4; ++i) {
      CHECK(s.weight(i, 0) == 1.0);
      CHECK(s.weight(i, 1) == 1.0);
      CHECK(s.weight(i, 2) == 0.0);
    }
  }
}

TEST_CASE("batch graph") {
  const auto dir = testing::scratch_dir("gb_batch");
  GraphConfig cfg;

  SUBCASE("two one-token images with orthogonal tokens") {
    const FeatureBundle a = token_bundle(dir, "a", (Matrix(1, 2) << 1, 0).finished());
    const FeatureBundle b = token_bundle(dir, "b", (Matrix(1, 2) << 0, 1).finished());
    for (auto src : {GraphSource::qk, GraphSource::vv}) {
      const AffinityGraph g = build_batch_graph({&a, &b}, 0, src, cfg, {});
      CHECK(g.is_sparse());
      CHECK(g.to_dense() == Matrix::Identity(2, 2));
      CHECK(g.offsets() == std::vector<Eigen::Index>{0, 1});
    }
  }

  SUBCASE("duplicated images have equal intra and inter blocks") {
    std::mt19937_64 rng(1);
    const Matrix t = random_matrix(5, 3, rng).cwiseAbs();
    const FeatureBundle a = token_bundle(dir, "a", t);
    const FeatureBundle b = token_bundle(dir, "b", t);
    cfg.c_intra = 5;
    cfg.c_inter = 5;
    const Matrix g = build_batch_graph({&a, &b}, 0, GraphSource::vv, cfg, {}).to_dense();
    CHECK(g.block(0, 5, 5, 5) == g.block(0, 0, 5, 5));
    CHECK(g.block(5, 0, 5, 5) == g.block(5, 5, 5, 5));
  }

  SUBCASE("negative cosines are clamped") {
    const FeatureBundle a = token_bundle(dir, "a", (Matrix(2, 2) << 1, 0, -1, 0.1).finished());
    cfg.c_intra = 2;
    const Matrix g = build_batch_graph({&a}, 0, GraphSource::vv, cfg, {}).to_dense();
    CHECK(g(0, 1) == 0.0);
    CHECK(g(1, 0) == 0.0);
    CHECK(g(0, 0) == doctest::Approx(1.0));
  }

  SUBCASE("orthogonal images share no edges") {
    const FeatureBundle a = token_bundle(dir, "a", (Matrix(3, 4) << 1, 0, 0, 0, 0, 1, 0, 0, 1, 1, 0, 0).finished());
    const FeatureBundle b = token_bundle(dir, "b", (Matrix(3, 4) << 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 1, 1).finished());
    cfg.c_inter = 10;
    const Matrix g = build_batch_graph({&a, &b}, 0, GraphSource::qk, cfg, {}).to_dense();
    CHECK(g.block(0, 3, 3, 3).isZero());
    CHECK(g.block(3, 0, 3, 3).isZero());
  }

  SUBCASE("entries within an image stay in its diagonal block and inter edges cross images") {
    std::mt19937_64 rng(6);
    const FeatureBundle a = token_bundle(dir, "a", random_matrix(3, 4, rng));
    const FeatureBundle b = token_bundle(dir, "b", random_matrix(4, 4, rng));
    const FeatureBundle c = token_bundle(dir, "c", random_matrix(2, 4, rng));
    cfg.c_intra = 2;
    cfg.c_inter = 2;
    for (auto src : {GraphSource::qk, GraphSource::vv}) {
      const AffinityGraph g = build_batch_graph({&a, &b, &c}, 0, src, cfg, {{"a", "b", "c"}, {}});
      const std::vector<Eigen::Index> off{0, 3, 7, 9};
      CHECK(g.offsets() == std::vector<Eigen::Index>{0, 3, 7});
      check_graph_invariants(g);
      // Exhaustive index check against direct clamped cosines.
      std::vector<Matrix> toks{batch_tokens(a, 0, src).rows, batch_tokens(b, 0, src).rows, batch_tokens(c, 0, src).rows};
      for (int bi = 0; bi < 3; ++bi) {
        for (Eigen::Index i = off[bi]; i < off[bi + 1]; ++i) {
          CHECK(g.image_of(i) == bi);
          int intra = 0, inter = 0;
          for (int bj = 0; bj < 3; ++bj) {
            for (Eigen::Index j = off[bj]; j < off[bj + 1]; ++j) {
              const double w = g.weight(i, j);
              if (w == 0.0) continue;
              const double cosine = toks[bi].row(i - off[bi]).dot(toks[bj].row(j - off[bj]));
              CHECK(w == doctest::Approx(cosine).epsilon(1e-12));
              (bi == bj ? intra : inter)++;
            }
          }
          CHECK(intra >= 1);
          CHECK(intra <= 2);
          CHECK(inter <= 2);
        }
      }
    }
  }

  SUBCASE("errors") {
    CHECK_THROWS_AS(build_batch_graph(std::vector<const FeatureBundle*>{}, 0, GraphSource::vv, cfg, {}), InputError);
    const FeatureBundle z = token_bundle(dir, "z", (Matrix(2, 2) << 1, 0, 0, 0).finished());
    CHECK_THROWS_WITH_AS(build_batch_graph({&z}, 0, GraphSource::vv, cfg, {}), doctest::Contains("token 1"), InputError);
    const FeatureBundle a = token_bundle(dir, "a", Matrix::Ones(3, 2));
    cfg.max_resolution = {1, 2};
    CHECK_THROWS_WITH_AS(build_batch_graph({&a}, 0, GraphSource::vv, cfg, {}), doctest::Contains("maximum resolution"),
                         InputError);
    cfg = {};
    CHECK_THROWS_AS(build_batch_graph({&a}, 0, GraphSource::vv, cfg, {{"wrong"}, {}}), InputError);
    cfg.threshold = 1.5;
    CHECK_THROWS_AS(build_batch_graph({&a}, 0, GraphSource::vv, cfg, {}), ComputeError);
  }
}

TEST_CASE("per-image graph sets") {
  const auto dir = testing::scratch_dir("gb_sets");
  SUBCASE("2 layers x 3 heads") {
    const FeatureBundle b = headed_bundle(dir, 2, 3);
    const auto ind = assemble_per_image_set(b, HeadMode::independent);
    CHECK(ind.size() == 6);
    std::set<std::pair<int, int>> tags;
    for (const auto& t : ind) {
      tags.insert({t.layer, t.head});
      CHECK(t.graph.grid() == Grid{2, 2});
      check_graph_invariants(t.graph);
    }
    CHECK(tags.size() == 6);
    const auto cat = assemble_per_image_set(b, HeadMode::concatenated);
    CHECK(cat.size() == 2);
    CHECK(cat[0].head == -1);

    // Concatenated graph uses all heads' dimensions.
    Matrix q(4, 9), k(4, 9);
    for (int h = 0; h < 3; ++h) {
      const std::string s = "_l0_h" + std::to_string(h) + "_t0";
      q.middleCols(3 * h, 3) = load_tensor(b.manifest(), "q" + s).as_matrix();
      k.middleCols(3 * h, 3) = load_tensor(b.manifest(), "k" + s).as_matrix();
    }
    CHECK(cat[0].graph.dense().isApprox(build_qk_affinity(q, k, 9, {2, 2}).dense(), 1e-12));
  }
  SUBCASE("16 layers x 8 heads") {
    CHECK(assemble_per_image_set(headed_bundle(dir, 16, 8), HeadMode::independent).size() == 128);
  }
  SUBCASE("timesteps multiply the set") {
    CHECK(assemble_per_image_set(headed_bundle(dir, 1, 2, 3), HeadMode::independent).size() == 6);
  }
  SUBCASE("no query/key pairs") {
    const FeatureBundle b = [&] {
      Manifest m;
      m.image_id = "v";
      m.root = dir;
      add_tensor(m, {"v", TensorKind::value, 0, std::nullopt, 0, 0, {}, {}}, Tensor3(1, 1, 1));
      save_manifest(m, dir / "manifest.json");
      return FeatureBundle::load(dir / "manifest.json");
    }();
    CHECK_THROWS_AS(assemble_per_image_set(b, HeadMode::independent), InputError);
  }
}
