#pragma once

#include <lsc/common.hpp>
#include <lsc/tensor_store.hpp>

#include <Eigen/SparseCore>

#include <optional>
#include <string>
#include <vector>

namespace lsc {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Nonnegative weighted graph over grid nodes. A batch graph concatenates the
/// nodes of several images; segment b covers [offsets[b], offsets[b] + grids[b].size()).
class AffinityGraph {
 public:
  AffinityGraph() = default;
  AffinityGraph(Matrix dense, Grid grid);
  AffinityGraph(SparseMatrix sparse, std::vector<Grid> grids);

  [[nodiscard]] Eigen::Index n_nodes() const { return degrees_.size(); }
  [[nodiscard]] bool is_sparse() const { return sparse_.has_value(); }
  [[nodiscard]] const Matrix& dense() const { return dense_; }
  [[nodiscard]] const SparseMatrix& sparse() const { return *sparse_; }
  [[nodiscard]] const Vector& degrees() const { return degrees_; }
  [[nodiscard]] const std::vector<Grid>& grids() const { return grids_; }
  [[nodiscard]] const std::vector<Eigen::Index>& offsets() const { return offsets_; }
  [[nodiscard]] int n_images() const { return static_cast<int>(grids_.size()); }
  /// Grid shared by every image segment; throws if segments differ.
  [[nodiscard]] Grid grid() const;

  /// Weight (i, j); O(log nnz) for sparse graphs.
  [[nodiscard]] double weight(Eigen::Index i, Eigen::Index j) const;
  [[nodiscard]] Matrix to_dense() const;
  [[nodiscard]] bool is_symmetric(double tol = 1e-12) const;

  /// P Y and P^T Y with P = D^-1 A. Requires positive degrees.
  [[nodiscard]] Matrix transition_times(const Matrix& y) const;
  [[nodiscard]] Matrix transition_transpose_times(const Matrix& y) const;

  /// Index of the image segment containing `node`.
  [[nodiscard]] int image_of(Eigen::Index node) const;

 private:
  void finish();

  Matrix dense_;
  std::optional<SparseMatrix> sparse_;
  std::vector<Grid> grids_;
  std::vector<Eigen::Index> offsets_;
  Vector degrees_;
};

enum class HeadMode { independent, concatenated };
enum class GraphSource { qk, vv };

std::string to_string(GraphSource s);
GraphSource graph_source_from_string(const std::string& s);
HeadMode head_mode_from_string(const std::string& s);

struct GraphConfig {
  int c_intra = 10;
  int c_inter = 10;
  double threshold = 0.0;
  HeadMode heads = HeadMode::concatenated;
  Grid max_resolution{32, 32};
};

/// A manifest plus its loaded tensors.
class FeatureBundle {
 public:
  explicit FeatureBundle(Manifest manifest) : manifest_(std::move(manifest)) {}
  static FeatureBundle load(const std::filesystem::path& manifest_path);

  [[nodiscard]] const Manifest& manifest() const { return manifest_; }
  [[nodiscard]] const std::string& id() const { return manifest_.image_id; }
  [[nodiscard]] Tensor3 tensor(const TensorRecord& record) const;

  /// Records of `kind`, sorted by (layer, timestep, noise_seed, head).
  [[nodiscard]] std::vector<const TensorRecord*> records(TensorKind kind) const;
  [[nodiscard]] std::vector<int> layers() const;
  [[nodiscard]] Grid layer_grid(int layer) const;

  /// (h*w) x d token matrix of `kind` for one layer at the first sampled timestep,
  /// heads concatenated in head order (or the merged record if present).
  [[nodiscard]] Matrix layer_tokens(int layer, TensorKind kind) const;

 private:
  Manifest manifest_;
};

struct BatchSpec {
  std::vector<std::string> image_ids;
  std::vector<Grid> grids;  // per image, for the layer being built
};

/// A = exp(Q K^T / sqrt(d_l)); dense and strictly positive.
AffinityGraph build_qk_affinity(const Matrix& queries, const Matrix& keys, int d_l, Grid grid);

/// Row-stochastic D^-1 A, materialized densely.
Matrix row_normalize(const AffinityGraph& graph);

/// Keeps per row the c_intra largest same-image and c_inter largest other-image
/// entries, drops entries below the threshold (and zeros), recomputes degrees.
AffinityGraph sparsify_topc(const AffinityGraph& graph, const GraphConfig& cfg);

/// Cross-image graph from unit-normalized, head-concatenated tokens of one layer.
/// Dot products are clamped at zero, then sparsified as in sparsify_topc.
AffinityGraph build_batch_graph(const std::vector<const FeatureBundle*>& bundles, int layer, GraphSource source,
                                const GraphConfig& cfg, const BatchSpec& spec);

/// Unit-normalized row/column tokens of one image at one layer (query/key for qk,
/// value/value for vv). Lets repeated batches skip re-reading tensors.
struct BatchTokens {
  std::string id;
  Grid grid;
  Matrix rows;
  Matrix cols;
};
BatchTokens batch_tokens(const FeatureBundle& bundle, int layer, GraphSource source);
AffinityGraph build_batch_graph(const std::vector<const BatchTokens*>& batch, const GraphConfig& cfg);

struct TaggedGraph {
  AffinityGraph graph;
  int layer = 0;
  int head = -1;  // -1 when heads are concatenated
  int timestep = 0;
  int noise_seed = 0;
};

/// One attention graph per (layer, head, timestep, noise_seed) in independent
/// mode, or per (layer, timestep, noise_seed) with heads concatenated.
/// Layers whose grid exceeds `max_resolution` (when given) are skipped.
std::vector<TaggedGraph> assemble_per_image_set(const FeatureBundle& bundle, HeadMode mode,
                                                std::optional<Grid> max_resolution = std::nullopt);

}  // namespace lsc
