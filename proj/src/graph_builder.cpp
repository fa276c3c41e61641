#include <lsc/graph_builder.hpp>

#include "parallel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <tuple>

namespace lsc {

AffinityGraph::AffinityGraph(Matrix dense, Grid grid) : dense_(std::move(dense)), grids_{grid} {
  if (dense_.rows() != dense_.cols()) throw InputError("affinity matrix must be square");
  if (static_cast<std::size_t>(dense_.rows()) != grid.size()) {
    throw InputError("affinity size " + std::to_string(dense_.rows()) + " does not match grid " + to_string(grid));
  }
  if (!dense_.allFinite()) throw InputError("affinity matrix has non-finite entries");
  if ((dense_.array() < 0.0).any()) throw InputError("affinity matrix has negative entries");
  finish();
}

AffinityGraph::AffinityGraph(SparseMatrix sparse, std::vector<Grid> grids)
    : sparse_(std::move(sparse)), grids_(std::move(grids)) {
  sparse_->makeCompressed();
  std::size_t total = 0;
  for (const auto& g : grids_) total += g.size();
  if (sparse_->rows() != sparse_->cols() || static_cast<std::size_t>(sparse_->rows()) != total) {
    throw InputError("sparse affinity size does not match its image grids");
  }
  for (Eigen::Index k = 0; k < sparse_->nonZeros(); ++k) {
    const double v = sparse_->valuePtr()[k];
    if (!std::isfinite(v) || v < 0.0) throw InputError("sparse affinity has negative or non-finite entries");
  }
  finish();
}

void AffinityGraph::finish() {
  offsets_.clear();
  Eigen::Index off = 0;
  for (const auto& g : grids_) {
    offsets_.push_back(off);
    off += static_cast<Eigen::Index>(g.size());
  }
  if (sparse_) {
    degrees_ = *sparse_ * Vector::Ones(sparse_->cols());
  } else {
    degrees_ = dense_.rowwise().sum();
  }
}

Grid AffinityGraph::grid() const {
  if (grids_.empty()) throw InputError("graph has no image segments");
  for (const auto& g : grids_) {
    if (!(g == grids_.front())) throw InputError("graph segments have different grids");
  }
  return grids_.front();
}

double AffinityGraph::weight(Eigen::Index i, Eigen::Index j) const {
  return sparse_ ? sparse_->coeff(i, j) : dense_(i, j);
}

Matrix AffinityGraph::to_dense() const { return sparse_ ? Matrix(*sparse_) : dense_; }

bool AffinityGraph::is_symmetric(double tol) const {
  if (sparse_) {
    const SparseMatrix t = sparse_->transpose();
    return (*sparse_ - t).norm() <= tol * std::max(1.0, sparse_->norm());
  }
  return (dense_ - dense_.transpose()).norm() <= tol * std::max(1.0, dense_.norm());
}

Matrix AffinityGraph::transition_times(const Matrix& y) const {
  Matrix ay = sparse_ ? Matrix(*sparse_ * y) : Matrix(dense_ * y);
  return degrees_.cwiseInverse().asDiagonal() * ay;
}

Matrix AffinityGraph::transition_transpose_times(const Matrix& y) const {
  const Matrix scaled = degrees_.cwiseInverse().asDiagonal() * y;
  return sparse_ ? Matrix(sparse_->transpose() * scaled) : Matrix(dense_.transpose() * scaled);
}

int AffinityGraph::image_of(Eigen::Index node) const {
  auto it = std::upper_bound(offsets_.begin(), offsets_.end(), node);
  return static_cast<int>(std::distance(offsets_.begin(), it)) - 1;
}

std::string to_string(GraphSource s) { return s == GraphSource::qk ? "qk" : "vv"; }

GraphSource graph_source_from_string(const std::string& s) {
  if (s == "qk") return GraphSource::qk;
  if (s == "vv") return GraphSource::vv;
  throw InputError("graph source must be qk or vv, got '" + s + "'");
}

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "independent") return HeadMode::independent;
  if (s == "concat" || s == "concatenated") return HeadMode::concatenated;
  throw InputError("head mode must be independent or concat, got '" + s + "'");
}

FeatureBundle FeatureBundle::load(const std::filesystem::path& manifest_path) {
  return FeatureBundle(load_manifest(manifest_path));
}

Tensor3 FeatureBundle::tensor(const TensorRecord& record) const { return load_tensor(manifest_, record.name); }

std::vector<const TensorRecord*> FeatureBundle::records(TensorKind kind) const {
  std::vector<const TensorRecord*> out;
  for (const auto& r : manifest_.records) {
    if (r.kind == kind) out.push_back(&r);
  }
  std::sort(out.begin(), out.end(), [](const TensorRecord* a, const TensorRecord* b) {
    return std::tuple(a->layer, a->timestep, a->noise_seed, a->head.value_or(-1)) <
           std::tuple(b->layer, b->timestep, b->noise_seed, b->head.value_or(-1));
  });
  return out;
}

std::vector<int> FeatureBundle::layers() const {
  std::set<int> layers;
  for (const auto& r : manifest_.records) {
    if (r.kind == TensorKind::query || r.kind == TensorKind::key || r.kind == TensorKind::value) {
      layers.insert(r.layer);
    }
  }
  return {layers.begin(), layers.end()};
}

Grid FeatureBundle::layer_grid(int layer) const {
  for (const auto& r : manifest_.records) {
    if (r.layer == layer && r.kind != TensorKind::class_embedding && r.kind != TensorKind::final_feature) {
      return {r.shape.h, r.shape.w};
    }
  }
  throw InputError("image " + id() + " has no layer " + std::to_string(layer));
}

Matrix FeatureBundle::layer_tokens(int layer, TensorKind kind) const {
  std::vector<const TensorRecord*> picked;
  for (const TensorRecord* r : records(kind)) {
    if (r->layer != layer) continue;
    if (!picked.empty() &&
        (r->timestep != picked.front()->timestep || r->noise_seed != picked.front()->noise_seed)) {
      continue;
    }
    picked.push_back(r);
  }
  if (picked.empty()) {
    throw InputError("image " + id() + " has no " + to_string(kind) + " records for layer " + std::to_string(layer));
  }
  for (const TensorRecord* r : picked) {
    if (!r->head) return tensor(*r).as_matrix();
  }
  std::vector<Matrix> parts;
  Eigen::Index cols = 0;
  for (const TensorRecord* r : picked) {
    parts.push_back(tensor(*r).as_matrix());
    if (parts.back().rows() != parts.front().rows()) throw InputError("heads of one layer differ in token count");
    cols += parts.back().cols();
  }
  Matrix out(parts.front().rows(), cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p;
    at += p.cols();
  }
  return out;
}

AffinityGraph build_qk_affinity(const Matrix& queries, const Matrix& keys, int d_l, Grid grid) {
  if (queries.rows() != keys.rows() || queries.cols() != keys.cols()) {
    throw InputError("query and key matrices differ in shape");
  }
  if (d_l <= 0) throw InputError("embedding dimension must be positive");
  if (!queries.allFinite() || !keys.allFinite()) throw InputError("non-finite query/key entries");
  Matrix a = ((queries * keys.transpose()) / std::sqrt(static_cast<double>(d_l))).array().exp().matrix();
  if (!a.allFinite()) throw ComputeError("attention logits overflow exp()");
  return AffinityGraph(std::move(a), grid);
}

Matrix row_normalize(const AffinityGraph& graph) {
  const Vector& deg = graph.degrees();
  for (Eigen::Index i = 0; i < deg.size(); ++i) {
    if (!(deg[i] > 0.0)) throw ComputeError("node " + std::to_string(i) + " has zero degree");
  }
  return deg.cwiseInverse().asDiagonal() * graph.to_dense();
}

namespace {

struct Entry {
  Eigen::Index col;
  double value;
};

bool stronger(const Entry& a, const Entry& b) { return a.value > b.value || (a.value == b.value && a.col < b.col); }

void keep_top(std::vector<Entry>& entries, int c) {
  const auto keep = std::min<std::size_t>(entries.size(), static_cast<std::size_t>(std::max(c, 0)));
  std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep), entries.end(), stronger);
  entries.resize(keep);
}

// Applies the per-row selection rule and appends survivors to `triplets`.
void select_row(Eigen::Index row, std::vector<Entry>& intra, std::vector<Entry>& inter, const GraphConfig& cfg,
                std::vector<Eigen::Triplet<double>>& triplets) {
  keep_top(intra, cfg.c_intra);
  keep_top(inter, cfg.c_inter);
  std::vector<Entry> kept;
  for (const auto* part : {&intra, &inter}) {
    for (const Entry& e : *part) {
      if (e.value > 0.0 && e.value >= cfg.threshold) kept.push_back(e);
    }
  }
  std::sort(kept.begin(), kept.end(), [](const Entry& a, const Entry& b) { return a.col < b.col; });
  for (const Entry& e : kept) triplets.emplace_back(row, e.col, e.value);
}

void check_config(const GraphConfig& cfg, bool has_intra) {
  if (has_intra && cfg.c_intra < 1) throw InputError("c_intra must be >= 1");
  if (cfg.c_inter < 0) throw InputError("c_inter must be >= 0");
  if (cfg.threshold < 0.0) throw InputError("threshold must be >= 0");
}

AffinityGraph finish_sparse(Eigen::Index n, std::vector<Eigen::Triplet<double>>& triplets, std::vector<Grid> grids) {
  SparseMatrix s(n, n);
  s.setFromTriplets(triplets.begin(), triplets.end());
  AffinityGraph g(std::move(s), std::move(grids));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(g.degrees()[i] > 0.0)) {
      const int img = g.image_of(i);
      throw ComputeError("node " + std::to_string(i) + " (image " + std::to_string(img) + ", token " +
                         std::to_string(i - g.offsets()[img]) + ") is isolated after sparsification");
    }
  }
  return g;
}

Matrix unit_rows(const Matrix& m, const std::string& image_id) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw InputError("image " + image_id + ": token " + std::to_string(i) + " is a zero vector and cannot be normalized");
    }
    out.row(i) /= n;
  }
  return out;
}

}  // namespace

AffinityGraph sparsify_topc(const AffinityGraph& graph, const GraphConfig& cfg) {
  check_config(cfg, true);
  const Eigen::Index n = graph.n_nodes();
  std::vector<Eigen::Triplet<double>> triplets;
  std::vector<Entry> intra, inter;
  for (Eigen::Index i = 0; i < n; ++i) {
    intra.clear();
    inter.clear();
    const int img = graph.image_of(i);
    auto push = [&](Eigen::Index j, double v) { (graph.image_of(j) == img ? intra : inter).push_back({j, v}); };
    if (graph.is_sparse()) {
      for (SparseMatrix::InnerIterator it(graph.sparse(), i); it; ++it) push(it.col(), it.value());
    } else {
      for (Eigen::Index j = 0; j < n; ++j) push(j, graph.dense()(i, j));
    }
    select_row(i, intra, inter, cfg, triplets);
  }
  return finish_sparse(n, triplets, graph.grids());
}

BatchTokens batch_tokens(const FeatureBundle& bundle, int layer, GraphSource source) {
  BatchTokens t;
  t.id = bundle.id();
  t.grid = bundle.layer_grid(layer);
  if (source == GraphSource::qk) {
    t.rows = unit_rows(bundle.layer_tokens(layer, TensorKind::query), bundle.id());
    t.cols = unit_rows(bundle.layer_tokens(layer, TensorKind::key), bundle.id());
  } else {
    t.rows = unit_rows(bundle.layer_tokens(layer, TensorKind::value), bundle.id());
    t.cols = t.rows;
  }
  if (t.cols.cols() != t.rows.cols()) throw InputError("query and key dimensions differ for " + bundle.id());
  return t;
}

AffinityGraph build_batch_graph(const std::vector<const FeatureBundle*>& bundles, int layer, GraphSource source,
                                const GraphConfig& cfg, const BatchSpec& spec) {
  if (bundles.empty()) throw InputError("empty batch");
  if (!spec.image_ids.empty() && spec.image_ids.size() != bundles.size()) {
    throw InputError("batch spec lists " + std::to_string(spec.image_ids.size()) + " images for " +
                     std::to_string(bundles.size()) + " bundles");
  }
  std::vector<BatchTokens> tokens;
  tokens.reserve(bundles.size());
  for (std::size_t b = 0; b < bundles.size(); ++b) {
    const FeatureBundle& fb = *bundles[b];
    if (!spec.image_ids.empty() && spec.image_ids[b] != fb.id()) {
      throw InputError("batch spec image " + spec.image_ids[b] + " does not match bundle " + fb.id());
    }
    const Grid grid = fb.layer_grid(layer);
    if (!spec.grids.empty() && !(spec.grids.at(b) == grid)) {
      throw InputError("batch spec grid for " + fb.id() + " disagrees with its manifest");
    }
    if (grid.rows > cfg.max_resolution.rows || grid.cols > cfg.max_resolution.cols) {
      throw InputError("layer " + std::to_string(layer) + " of " + fb.id() + " is " + to_string(grid) +
                       ", above the maximum resolution " + to_string(cfg.max_resolution));
    }
    tokens.push_back(batch_tokens(fb, layer, source));
  }
  std::vector<const BatchTokens*> ptrs;
  for (const auto& t : tokens) ptrs.push_back(&t);
  return build_batch_graph(ptrs, cfg);
}

AffinityGraph build_batch_graph(const std::vector<const BatchTokens*>& batch_in, const GraphConfig& cfg) {
  if (batch_in.empty()) throw InputError("empty batch");
  check_config(cfg, true);
  const std::size_t batch = batch_in.size();
  std::vector<Grid> grids(batch);
  std::vector<Eigen::Index> offsets(batch);
  Eigen::Index n = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const BatchTokens& t = *batch_in[b];
    if (t.rows.rows() != static_cast<Eigen::Index>(t.grid.size()) || t.cols.rows() != t.rows.rows()) {
      throw InputError("token rows of " + t.id + " do not match its grid " + to_string(t.grid));
    }
    if (t.rows.cols() != batch_in[0]->rows.cols() || t.cols.cols() != t.rows.cols()) {
      throw InputError("token dimensions differ across the batch");
    }
    grids[b] = t.grid;
    offsets[b] = n;
    n += t.rows.rows();
  }

  Matrix all_cols(n, batch_in[0]->cols.cols());
  for (std::size_t b = 0; b < batch; ++b) all_cols.middleRows(offsets[b], batch_in[b]->cols.rows()) = batch_in[b]->cols;

  std::vector<std::vector<Eigen::Triplet<double>>> per_row(static_cast<std::size_t>(n));
  for (std::size_t b = 0; b < batch; ++b) {
    const Eigen::Index nb = batch_in[b]->rows.rows();
    const Matrix sims = (batch_in[b]->rows * all_cols.transpose()).cwiseMax(0.0);
    const Eigen::Index lo = offsets[b], hi = offsets[b] + nb;
    detail::parallel_for(static_cast<std::size_t>(nb), [&](std::size_t r) {
      const auto i = static_cast<Eigen::Index>(r);
      std::vector<Entry> intra, inter;
      intra.reserve(static_cast<std::size_t>(nb));
      inter.reserve(static_cast<std::size_t>(n - nb));
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j >= lo && j < hi) {
          intra.push_back({j, sims(i, j)});
        } else if (sims(i, j) > 0.0) {
          inter.push_back({j, sims(i, j)});
        }
      }
      select_row(lo + i, intra, inter, cfg, per_row[static_cast<std::size_t>(lo + i)]);
    });
  }
  std::vector<Eigen::Triplet<double>> triplets;
  for (auto& row : per_row) triplets.insert(triplets.end(), row.begin(), row.end());
  return finish_sparse(n, triplets, grids);
}

std::vector<TaggedGraph> assemble_per_image_set(const FeatureBundle& bundle, HeadMode mode,
                                                std::optional<Grid> max_resolution) {
  const auto queries = bundle.records(TensorKind::query);
  if (queries.empty()) throw InputError("image " + bundle.id() + " has no query/key pairs");

  auto find_key = [&](const TensorRecord& q) -> const TensorRecord& {
    for (const TensorRecord* k : bundle.records(TensorKind::key)) {
      if (k->layer == q.layer && k->head == q.head && k->timestep == q.timestep && k->noise_seed == q.noise_seed) {
        return *k;
      }
    }
    throw InputError("query record '" + q.name + "' has no matching key");
  };
  auto allowed = [&](const TensorRecord& r) {
    return !max_resolution || (r.shape.h <= max_resolution->rows && r.shape.w <= max_resolution->cols);
  };

  std::vector<TaggedGraph> out;
  if (mode == HeadMode::independent) {
    for (const TensorRecord* q : queries) {
      if (!allowed(*q)) continue;
      const TensorRecord& k = find_key(*q);
      const Grid grid{q->shape.h, q->shape.w};
      out.push_back({build_qk_affinity(bundle.tensor(*q).as_matrix(), bundle.tensor(k).as_matrix(), q->shape.d, grid),
                     q->layer, q->head.value_or(-1), q->timestep, q->noise_seed});
    }
    return out;
  }

  // Concatenate heads per (layer, timestep, noise_seed), in head order.
  std::map<std::tuple<int, int, int>, std::vector<const TensorRecord*>> groups;
  for (const TensorRecord* q : queries) {
    if (allowed(*q)) groups[{q->layer, q->timestep, q->noise_seed}].push_back(q);
  }
  for (const auto& [key, members] : groups) {
    const auto& [layer, timestep, noise_seed] = key;
    const TensorRecord* merged = nullptr;
    for (const TensorRecord* q : members) {
      if (!q->head) merged = q;
    }
    std::vector<const TensorRecord*> use = merged ? std::vector{merged} : members;
    const Grid grid{use.front()->shape.h, use.front()->shape.w};
    Eigen::Index dim = 0;
    for (const TensorRecord* q : use) dim += q->shape.d;
    Matrix qm(static_cast<Eigen::Index>(grid.size()), dim), km(static_cast<Eigen::Index>(grid.size()), dim);
    Eigen::Index at = 0;
    for (const TensorRecord* q : use) {
      qm.middleCols(at, q->shape.d) = bundle.tensor(*q).as_matrix();
      km.middleCols(at, q->shape.d) = bundle.tensor(find_key(*q)).as_matrix();
      at += q->shape.d;
    }
    out.push_back({build_qk_affinity(qm, km, static_cast<int>(dim), grid), layer, -1, timestep, noise_seed});
  }
  return out;
}

}  // namespace lsc
