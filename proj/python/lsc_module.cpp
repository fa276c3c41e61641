#include "cli.hpp"

#include <lsc/eigen_optimizer.hpp>
#include <lsc/evaluator.hpp>
#include <lsc/exact_spectral.hpp>
#include <lsc/graph_builder.hpp>
#include <lsc/segmenter.hpp>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

namespace py = pybind11;
using namespace lsc;

namespace {

using GridTuple = std::pair<int, int>;
using GraphSpec = std::pair<Matrix, GridTuple>;

Grid grid_of(GridTuple g) { return {g.first, g.second}; }

std::vector<AffinityGraph> graphs_of(const std::vector<GraphSpec>& specs) {
  std::vector<AffinityGraph> out;
  out.reserve(specs.size());
  for (const auto& [a, g] : specs) out.emplace_back(a, grid_of(g));
  return out;
}

py::dict loss_dict(const LossTerms& l) {
  py::dict d;
  d["total"] = l.total;
  d["rayleigh_l1"] = l.rayleigh_l1;
  d["ortho_penalty"] = l.ortho_penalty;
  return d;
}

std::pair<Vector, Matrix> unpack(const SpectralResult& r) {
  Vector values(static_cast<Eigen::Index>(r.pairs.size()));
  for (std::size_t i = 0; i < r.pairs.size(); ++i) values[static_cast<Eigen::Index>(i)] = r.pairs[i].eigenvalue;
  return {values, eigenvector_matrix(r.pairs)};
}

KMode k_mode(std::optional<int> k, int kmin, int kmax) {
  KMode m;
  m.kmin = kmin;
  m.kmax = kmax;
  if (k) {
    m.automatic = false;
    m.k = *k;
  }
  return m;
}

}  // namespace

PYBIND11_MODULE(_lsc, m) {
  m.doc() = "Spectral eigenvector fields over attention graphs";

  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<ComputeError>(m, "ComputeError", PyExc_RuntimeError);

  m.def(
      "qk_affinity",
      [](const Matrix& q, const Matrix& k, int d, GridTuple grid) { return build_qk_affinity(q, k, d, grid_of(grid)).to_dense(); },
      py::arg("queries"), py::arg("keys"), py::arg("d"), py::arg("grid"),
      "Dense softmax(Q K^T / sqrt(d)) attention affinity.");

  m.def(
      "resample_bilinear",
      [](const Matrix& x, GridTuple src, GridTuple dst) { return resample_bilinear(EigenField(grid_of(src), x), grid_of(dst)); },
      py::arg("values"), py::arg("source"), py::arg("target"));

  m.def(
      "loss",
      [](const Matrix& x, GridTuple grid, const std::vector<GraphSpec>& graphs) {
        return loss_dict(loss_eval(EigenField(grid_of(grid), x), graphs_of(graphs)));
      },
      py::arg("values"), py::arg("grid"), py::arg("graphs"),
      "Loss terms for a field; graphs are (affinity, (rows, cols)) pairs.");

  m.def(
      "loss_grad",
      [](const Matrix& x, GridTuple grid, const std::vector<GraphSpec>& graphs) {
        return loss_grad(EigenField(grid_of(grid), x), graphs_of(graphs));
      },
      py::arg("values"), py::arg("grid"), py::arg("graphs"));

  m.def(
      "optimize",
      [](const std::vector<GraphSpec>& graphs, int channels, int iterations, double lr, const std::string& schedule,
         std::uint64_t seed) {
        FixedGraphProvider provider(graphs_of(graphs));
        PerImageConfig cfg;
        cfg.channels = channels;
        cfg.iterations = iterations;
        cfg.lr = lr;
        cfg.schedule = lr_schedule_from_string(schedule);
        cfg.seed = seed;
        OptimizeResult r;
        {
          py::gil_scoped_release release;
          r = optimize_per_image(provider, cfg);
        }
        return py::make_tuple(r.field.values, loss_dict(r.final_loss), r.history);
      },
      py::arg("graphs"), py::arg("channels"), py::arg("iterations") = 2000, py::arg("lr") = 1e-2,
      py::arg("schedule") = "cosine", py::arg("seed") = 0,
      "Adam on a fixed graph set. Returns (values, final_loss, history).");

  m.def(
      "orthogonalize",
      [](const Matrix& x) {
        const OrthoEigenField o = orthogonalize(EigenField({1, static_cast<int>(x.rows())}, x));
        return std::make_pair(o.field.values, o.eigenvalues);
      },
      py::arg("values"), "Rotate channels onto the Gram eigenbasis. Returns (values, eigenvalues).");

  m.def(
      "solve_ncut",
      [](const Matrix& a, int count) { return unpack(solve_ncut(AffinityGraph(a, {1, static_cast<int>(a.rows())}), count)); },
      py::arg("affinity"), py::arg("m"), "Smallest generalized eigenpairs of (D - A) x = lambda D x.");

  m.def(
      "sym_randomwalk_topc",
      [](const Matrix& a, int c) { return unpack(sym_randomwalk_topc(AffinityGraph(a, {1, static_cast<int>(a.rows())}), c)); },
      py::arg("affinity"), py::arg("c"));

  m.def("principal_angles", &principal_angles, py::arg("u"), py::arg("v"), "Principal angles in degrees, ascending.");

  m.def(
      "kmeans", [](const Matrix& points, int k, std::uint64_t seed) { return kmeans(points, k, seed).labels; },
      py::arg("points"), py::arg("k"), py::arg("seed") = 0);

  m.def(
      "segment",
      [](const Matrix& x, GridTuple grid, std::optional<int> k, int kmin, int kmax, std::uint64_t seed) {
        const OrthoEigenField o = orthogonalize(EigenField(grid_of(grid), x));
        const SegmentationMap s = segment_field(o, k_mode(k, kmin, kmax), seed);
        return std::make_pair(s.labels, s.k);
      },
      py::arg("values"), py::arg("grid"), py::arg("k") = py::none(), py::arg("kmin") = 2, py::arg("kmax") = 10,
      py::arg("seed") = 0, "K-Means segmentation of an orthogonalized field. k=None selects K by silhouette.");

  m.def(
      "matched_miou",
      [](const std::vector<int>& pred, int k_pred, const std::vector<int>& gt, const std::string& match, int ignore) {
        return matched_miou(pred, k_pred, gt, match_mode_from_string(match), ignore);
      },
      py::arg("pred"), py::arg("k_pred"), py::arg("gt"), py::arg("match") = "hungarian", py::arg("ignore") = kIgnoreLabel);

  m.def(
      "hungarian_match",
      [](const Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>& counts) {
        ConfusionMatrix cm;
        cm.counts = counts;
        return hungarian_match(cm);
      },
      py::arg("counts"));

  m.def("adjusted_rand_index", &adjusted_rand_index, py::arg("a"), py::arg("b"));

  m.def(
      "coord_regression",
      [](const Matrix& features, std::uint64_t seed) {
        const RegressionResult r = coord_regression(features, seed);
        py::dict d;
        d["mse"] = r.mse;
        d["mse_rows"] = r.mse_rows;
        d["mse_cols"] = r.mse_cols;
        d["ridge_fallback"] = r.ridge_fallback;
        return d;
      },
      py::arg("features"), py::arg("seed") = 0, "Regress 32x32 tile coordinates from stacked per-pixel features.");

  m.def(
      "spatial_labels",
      [](const std::vector<int>& labels, GridTuple grid, std::size_t min_px, double center_band) {
        return gen_spatial_labels({grid_of(grid), labels}, min_px, center_band).labels;
      },
      py::arg("labels"), py::arg("grid"), py::arg("min_px") = 50, py::arg("center_band") = 0.2,
      "Left/right labels 2 * class + side; -1 where ignored.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the lsc command line in-process. Returns (exit_code, stdout, stderr).");
}
