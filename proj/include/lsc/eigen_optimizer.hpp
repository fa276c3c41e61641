#pragma once

// Gradient-based pseudo-eigenvector fields.
//
// The field X (nodes x C) is optimized against a set of affinity graphs with
//
//   mean_A  sum_c | ĝ_c^T D^-1 A ĝ_c - 1 |  +  || X^T X - I ||_F
//
// where g bilinearly resamples X to each graph's grid and ĝ_c is channel c of
// g(X) scaled to unit norm. Batch graphs span several images; the field is
// then the row-stack of per-image fields in graph segment order.

#include <lsc/field.hpp>
#include <lsc/graph_builder.hpp>

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lsc {

/// Align-corners bilinear resampling operator, (dst.size() x src.size()).
SparseMatrix resample_operator(Grid src, Grid dst);

/// g(X): (target.size() x C), rows in raster order.
Matrix resample_bilinear(const EigenField& field, Grid target);

/// Adjoint of resample_bilinear: maps (target.size() x C) back to (source.size() x C).
Matrix resample_bilinear_vjp(Grid source, Grid target, const Matrix& upstream);

struct LossTerms {
  double rayleigh_l1 = 0.0;
  double ortho_penalty = 0.0;
  double total = 0.0;
};

struct LossAndGrad {
  LossTerms loss;
  Matrix grad;
};

using GraphRefs = std::span<const AffinityGraph* const>;

/// `x` stacks one field per image segment of the graphs (all graphs must have the same
/// segment count); each segment is field_grid.size() rows.
LossAndGrad loss_and_grad(const Matrix& x, Grid field_grid, GraphRefs graphs, bool want_grad = true);

LossTerms loss_eval(const EigenField& field, GraphRefs graphs);
Matrix loss_grad(const EigenField& field, GraphRefs graphs);
LossTerms loss_eval(const EigenField& field, const std::vector<AffinityGraph>& graphs);
Matrix loss_grad(const EigenField& field, const std::vector<AffinityGraph>& graphs);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  Matrix m;
  Matrix v;

  AdamState() = default;
  AdamState(Eigen::Index rows, Eigen::Index cols, double lr_)
      : lr(lr_), m(Matrix::Zero(rows, cols)), v(Matrix::Zero(rows, cols)) {}
};

/// Bias-corrected Adam update of `values` in place.
void adam_step(AdamState& state, Matrix& values, const Matrix& gradient);

using AffinitySet = std::shared_ptr<const std::vector<AffinityGraph>>;

/// Source of affinity sets. Stochastic providers (e.g. diffusion backbones) return
/// a fresh sample on each draw; static ones always return the same set.
class GraphProvider {
 public:
  virtual ~GraphProvider() = default;
  virtual AffinitySet draw(std::mt19937_64& rng) = 0;
  [[nodiscard]] virtual bool stochastic() const = 0;
};

class FixedGraphProvider final : public GraphProvider {
 public:
  explicit FixedGraphProvider(std::vector<AffinityGraph> graphs);
  AffinitySet draw(std::mt19937_64&) override { return set_; }
  [[nodiscard]] bool stochastic() const override { return false; }

 private:
  AffinitySet set_;
};

/// Per-image attention graphs from a feature bundle; each (timestep, noise_seed)
/// sample is one affinity set, drawn uniformly.
class BundleGraphProvider final : public GraphProvider {
 public:
  BundleGraphProvider(const FeatureBundle& bundle, HeadMode mode, std::optional<Grid> max_resolution = std::nullopt);
  AffinitySet draw(std::mt19937_64& rng) override;
  [[nodiscard]] bool stochastic() const override { return sets_.size() > 1; }
  [[nodiscard]] std::size_t n_sets() const { return sets_.size(); }

 private:
  std::vector<AffinitySet> sets_;
};

/// Cache of recently drawn affinity sets. A draw fetches a new set with probability
/// `new_sample_prob` (always when empty), evicting the oldest when full; otherwise it
/// reuses a uniformly chosen cached set.
class GraphBuffer {
 public:
  GraphBuffer(std::size_t capacity = 5, double new_sample_prob = 0.25);
  AffinitySet draw(GraphProvider& provider, std::mt19937_64& rng);
  [[nodiscard]] std::size_t size() const { return sets_.size(); }
  [[nodiscard]] std::size_t capacity() const { return capacity_; }
  [[nodiscard]] std::size_t fetches() const { return fetches_; }

 private:
  std::size_t capacity_;
  double new_sample_prob_;
  std::deque<AffinitySet> sets_;
  std::size_t fetches_ = 0;
};

/// Standard normal entries scaled by 1/sqrt(rows).
Matrix init_field_values(Eigen::Index rows, int channels, std::mt19937_64& rng);

/// Learning-rate schedule over the run. Cosine anneals to zero at the last step,
/// which removes the lr-sized jitter Adam keeps around the non-smooth penalty.
enum class LrSchedule { constant, cosine };
LrSchedule lr_schedule_from_string(const std::string& s);
std::string to_string(LrSchedule s);
double scheduled_lr(double base, LrSchedule schedule, std::int64_t step, std::int64_t total);

struct PerImageConfig {
  int channels = 10;
  int iterations = 2000;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t buffer_size = 5;
  double new_sample_prob = 0.25;
  int accumulation = 0;  // 0: 20 for stochastic providers, 1 otherwise
  LrSchedule schedule = LrSchedule::constant;
};

struct OptimizeResult {
  EigenField field;
  LossTerms final_loss;
  std::vector<double> history;  // total loss per optimizer step
};

/// Field resolution is the finest graph grid of the first drawn set.
OptimizeResult optimize_per_image(GraphProvider& provider, const PerImageConfig& cfg);

struct DatasetConfig {
  int channels = 50;
  GraphConfig graph;
  GraphSource source = GraphSource::qk;
  int batch = 160;
  double lr = 1e-2;
  int iterations = 2100;  // mini-batch draws
  int steps_per_batch = 1;
  std::uint64_t seed = 0;
  LrSchedule schedule = LrSchedule::constant;
};

struct DatasetResult {
  std::vector<std::string> image_ids;  // dataset order
  std::map<std::string, EigenField> fields;
  std::vector<int> layers;  // layers included (grid within max resolution)
  std::vector<double> history;  // total loss per optimizer step
  int batch = 0;  // effective batch size after clamping
  std::vector<std::string> warnings;
};

DatasetResult optimize_dataset(const std::vector<FeatureBundle>& dataset, const DatasetConfig& cfg);

/// X U with U the eigenvectors of X^T X, ordered by decreasing eigenvalue. Each
/// column of U is signed so its largest-magnitude entry is positive.
OrthoEigenField orthogonalize(const EigenField& field);

/// One rotation from the summed Gram matrix, applied to every field.
std::vector<OrthoEigenField> orthogonalize_jointly(const std::vector<EigenField>& fields);

}  // namespace lsc
