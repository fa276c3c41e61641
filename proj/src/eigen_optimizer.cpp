#include <lsc/eigen_optimizer.hpp>

#include "parallel.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <set>
#include <array>
#include <cmath>
#include <map>
#include <numeric>

namespace lsc {

namespace {

constexpr double kKinkTol = 1e-12;

// Per-axis align-corners interpolation: (dst index) -> up to two (src index, weight).
std::vector<std::array<std::pair<int, double>, 2>> axis_weights(int src, int dst) {
  std::vector<std::array<std::pair<int, double>, 2>> out(static_cast<std::size_t>(dst));
  for (int i = 0; i < dst; ++i) {
    const double pos =
        dst == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
    int lo = static_cast<int>(std::floor(pos));
    lo = std::clamp(lo, 0, src - 1);
    const int hi = std::min(lo + 1, src - 1);
    const double frac = pos - lo;
    out[static_cast<std::size_t>(i)] = {{{lo, 1.0 - frac}, {hi, frac}}};
  }
  return out;
}

void check_grid(Grid g, const char* what) {
  if (!g.valid()) throw InputError(std::string(what) + " grid must have positive dimensions, got " + to_string(g));
}

}  // namespace

SparseMatrix resample_operator(Grid src, Grid dst) {
  check_grid(src, "source");
  check_grid(dst, "target");
  const auto wy = axis_weights(src.rows, dst.rows);
  const auto wx = axis_weights(src.cols, dst.cols);
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(dst.size() * 4);
  for (int r = 0; r < dst.rows; ++r) {
    for (int c = 0; c < dst.cols; ++c) {
      const Eigen::Index row = static_cast<Eigen::Index>(r) * dst.cols + c;
      for (const auto& [sy, fy] : wy[static_cast<std::size_t>(r)]) {
        for (const auto& [sx, fx] : wx[static_cast<std::size_t>(c)]) {
          const double w = fy * fx;
          if (w != 0.0) triplets.emplace_back(row, static_cast<Eigen::Index>(sy) * src.cols + sx, w);
        }
      }
    }
  }
  SparseMatrix g(static_cast<Eigen::Index>(dst.size()), static_cast<Eigen::Index>(src.size()));
  g.setFromTriplets(triplets.begin(), triplets.end());
  return g;
}

Matrix resample_bilinear(const EigenField& field, Grid target) {
  check_grid(target, "target");
  if (!field.consistent()) throw InputError("field values do not match its grid");
  if (target == field.grid) return field.values;
  return resample_operator(field.grid, target) * field.values;
}

Matrix resample_bilinear_vjp(Grid source, Grid target, const Matrix& upstream) {
  check_grid(source, "source");
  check_grid(target, "target");
  if (upstream.rows() != static_cast<Eigen::Index>(target.size())) {
    throw InputError("upstream gradient has " + std::to_string(upstream.rows()) + " rows, expected " +
                     std::to_string(target.size()));
  }
  if (source == target) return upstream;
  return resample_operator(source, target).transpose() * upstream;
}

namespace {

struct GraphTerm {
  double rayleigh = 0.0;
  Matrix grad;  // w.r.t. the stacked field
};

GraphTerm graph_term(const Matrix& x, Grid field_grid, const AffinityGraph& graph, bool want_grad) {
  const int segments = graph.n_images();
  const auto n0 = static_cast<Eigen::Index>(field_grid.size());
  if (x.rows() != n0 * segments) {
    throw InputError("field has " + std::to_string(x.rows()) + " rows but the graph expects " +
                     std::to_string(segments) + " images of " + std::to_string(n0) + " nodes");
  }
  for (Eigen::Index i = 0; i < graph.n_nodes(); ++i) {
    if (!(graph.degrees()[i] > 0.0)) throw ComputeError("graph node " + std::to_string(i) + " has zero degree");
  }

  // g(X), one block per image segment.
  std::vector<SparseMatrix> ops(static_cast<std::size_t>(segments));
  Matrix y(graph.n_nodes(), x.cols());
  for (int b = 0; b < segments; ++b) {
    const Grid g = graph.grids()[static_cast<std::size_t>(b)];
    const Eigen::Index rows = static_cast<Eigen::Index>(g.size());
    if (g == field_grid) {
      y.middleRows(graph.offsets()[b], rows) = x.middleRows(n0 * b, n0);
    } else {
      ops[static_cast<std::size_t>(b)] = resample_operator(field_grid, g);
      y.middleRows(graph.offsets()[b], rows) = ops[static_cast<std::size_t>(b)] * x.middleRows(n0 * b, n0);
    }
  }

  const Matrix py = graph.transition_times(y);
  GraphTerm out;
  Matrix gy;
  Matrix pty;
  if (want_grad) {
    pty = graph.transition_transpose_times(y);
    gy.resize(y.rows(), y.cols());
  }
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double sq = y.col(c).squaredNorm();
    if (!(sq > 0.0)) throw ComputeError("channel " + std::to_string(c) + " of g(X) has zero norm");
    const double r = y.col(c).dot(py.col(c)) / sq;
    out.rayleigh += std::abs(r - 1.0);
    if (want_grad) {
      // Residuals at rounding level sit on the kink; take the zero subgradient there.
      const double dev = r - 1.0;
      const double sign = std::abs(dev) <= kKinkTol ? 0.0 : (dev > 0.0 ? 1.0 : -1.0);
      gy.col(c) = sign * (py.col(c) + pty.col(c) - 2.0 * r * y.col(c)) / sq;
    }
  }
  if (want_grad) {
    out.grad.resize(x.rows(), x.cols());
    for (int b = 0; b < segments; ++b) {
      const Grid g = graph.grids()[static_cast<std::size_t>(b)];
      const auto block = gy.middleRows(graph.offsets()[b], static_cast<Eigen::Index>(g.size()));
      if (g == field_grid) {
        out.grad.middleRows(n0 * b, n0) = block;
      } else {
        out.grad.middleRows(n0 * b, n0) = ops[static_cast<std::size_t>(b)].transpose() * block;
      }
    }
  }
  return out;
}

}  // namespace

LossAndGrad loss_and_grad(const Matrix& x, Grid field_grid, GraphRefs graphs, bool want_grad) {
  if (graphs.empty()) throw InputError("affinity set is empty");
  check_grid(field_grid, "field");
  if (!x.allFinite()) throw ComputeError("field has non-finite values");

  std::vector<GraphTerm> terms(graphs.size());
  detail::parallel_for(graphs.size(), [&](std::size_t i) { terms[i] = graph_term(x, field_grid, *graphs[i], want_grad); });

  LossAndGrad out;
  const double inv = 1.0 / static_cast<double>(graphs.size());
  if (want_grad) out.grad = Matrix::Zero(x.rows(), x.cols());
  for (const auto& t : terms) {
    out.loss.rayleigh_l1 += t.rayleigh;
    if (want_grad) out.grad += t.grad;
  }
  out.loss.rayleigh_l1 *= inv;
  if (want_grad) out.grad *= inv;

  const Matrix gram_dev = x.transpose() * x - Matrix::Identity(x.cols(), x.cols());
  const double frob = gram_dev.norm();
  out.loss.ortho_penalty = frob;
  if (want_grad && frob > kKinkTol * std::max(1.0, static_cast<double>(x.cols()))) out.grad += (2.0 / frob) * (x * gram_dev);
  out.loss.total = out.loss.rayleigh_l1 + out.loss.ortho_penalty;
  return out;
}

LossTerms loss_eval(const EigenField& field, GraphRefs graphs) {
  return loss_and_grad(field.values, field.grid, graphs, false).loss;
}

Matrix loss_grad(const EigenField& field, GraphRefs graphs) {
  return loss_and_grad(field.values, field.grid, graphs, true).grad;
}

namespace {
std::vector<const AffinityGraph*> refs(const std::vector<AffinityGraph>& graphs) {
  std::vector<const AffinityGraph*> out;
  out.reserve(graphs.size());
  for (const auto& g : graphs) out.push_back(&g);
  return out;
}
}  // namespace

LossTerms loss_eval(const EigenField& field, const std::vector<AffinityGraph>& graphs) {
  const auto r = refs(graphs);
  return loss_eval(field, GraphRefs(r));
}

Matrix loss_grad(const EigenField& field, const std::vector<AffinityGraph>& graphs) {
  const auto r = refs(graphs);
  return loss_grad(field, GraphRefs(r));
}

void adam_step(AdamState& s, Matrix& values, const Matrix& gradient) {
  if (gradient.rows() != values.rows() || gradient.cols() != values.cols()) {
    throw InputError("gradient shape does not match the field");
  }
  if (s.m.rows() != values.rows() || s.m.cols() != values.cols()) {
    throw InputError("optimizer moments do not match the field");
  }
  if (!gradient.allFinite()) throw ComputeError("non-finite gradient entries");
  ++s.step;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * gradient;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * gradient.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  values.array() -= s.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.epsilon);
}

FixedGraphProvider::FixedGraphProvider(std::vector<AffinityGraph> graphs) {
  if (graphs.empty()) throw InputError("fixed provider needs at least one graph");
  set_ = std::make_shared<const std::vector<AffinityGraph>>(std::move(graphs));
}

BundleGraphProvider::BundleGraphProvider(const FeatureBundle& bundle, HeadMode mode,
                                         std::optional<Grid> max_resolution) {
  auto tagged = assemble_per_image_set(bundle, mode, max_resolution);
  if (tagged.empty()) throw InputError("image " + bundle.id() + " has no attention layers within the resolution cap");
  std::map<std::pair<int, int>, std::vector<AffinityGraph>> by_sample;
  for (auto& t : tagged) by_sample[{t.timestep, t.noise_seed}].push_back(std::move(t.graph));
  for (auto& [key, graphs] : by_sample) {
    sets_.push_back(std::make_shared<const std::vector<AffinityGraph>>(std::move(graphs)));
  }
}

AffinitySet BundleGraphProvider::draw(std::mt19937_64& rng) {
  if (sets_.size() == 1) return sets_.front();
  std::uniform_int_distribution<std::size_t> pick(0, sets_.size() - 1);
  return sets_[pick(rng)];
}

GraphBuffer::GraphBuffer(std::size_t capacity, double new_sample_prob)
    : capacity_(capacity), new_sample_prob_(new_sample_prob) {
  if (capacity_ == 0) throw InputError("graph buffer capacity must be positive");
  if (new_sample_prob_ < 0.0 || new_sample_prob_ > 1.0) throw InputError("new-sample probability must be in [0, 1]");
}

AffinitySet GraphBuffer::draw(GraphProvider& provider, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (sets_.empty() || coin(rng) < new_sample_prob_) {
    AffinitySet fresh = provider.draw(rng);
    if (!fresh || fresh->empty()) throw ComputeError("graph provider returned an empty affinity set");
    ++fetches_;
    if (sets_.size() == capacity_) sets_.pop_front();
    sets_.push_back(fresh);
    return fresh;
  }
  std::uniform_int_distribution<std::size_t> pick(0, sets_.size() - 1);
  return sets_[pick(rng)];
}

Matrix init_field_values(Eigen::Index rows, int channels, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
  Matrix x(rows, channels);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, j) = normal(rng) * scale;
  }
  return x;
}

namespace {

Grid finest_grid(const std::vector<AffinityGraph>& graphs) {
  Grid best{0, 0};
  for (const auto& g : graphs) {
    const Grid grid = g.grid();
    if (grid.size() > best.size()) best = grid;
  }
  return best;
}

void check_finite(const LossTerms& loss, std::int64_t step) {
  if (!std::isfinite(loss.total)) {
    throw ComputeError("optimization diverged at step " + std::to_string(step) + " (rayleigh " +
                       std::to_string(loss.rayleigh_l1) + ", ortho " + std::to_string(loss.ortho_penalty) + ")");
  }
}

}  // namespace

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  throw InputError("unknown lr schedule '" + s + "' (expected constant|cosine)");
}

std::string to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

double scheduled_lr(double base, LrSchedule schedule, std::int64_t step, std::int64_t total) {
  if (schedule == LrSchedule::constant || total <= 1) return base;
  const double t = static_cast<double>(std::min(step, total - 1)) / static_cast<double>(total - 1);
  return 0.5 * base * (1.0 + std::cos(M_PI * t));
}

OptimizeResult optimize_per_image(GraphProvider& provider, const PerImageConfig& cfg) {
  if (cfg.channels < 1) throw InputError("channel count must be >= 1");
  if (cfg.iterations < 0) throw InputError("iteration count must be >= 0");
  std::mt19937_64 rng(cfg.seed);
  GraphBuffer buffer(cfg.buffer_size, cfg.new_sample_prob);
  const bool stochastic = provider.stochastic();
  const int accumulation = cfg.accumulation > 0 ? cfg.accumulation : (stochastic ? 20 : 1);

  AffinitySet first = buffer.draw(provider, rng);
  const Grid grid = finest_grid(*first);

  OptimizeResult out;
  out.field = EigenField(grid, init_field_values(static_cast<Eigen::Index>(grid.size()), cfg.channels, rng));
  AdamState adam(out.field.values.rows(), out.field.values.cols(), cfg.lr);
  out.history.reserve(static_cast<std::size_t>(cfg.iterations));

  auto draw = [&](bool initial) { return initial ? first : (stochastic ? buffer.draw(provider, rng) : first); };
  bool initial = true;
  for (int it = 0; it < cfg.iterations; ++it) {
    Matrix grad = Matrix::Zero(out.field.values.rows(), out.field.values.cols());
    LossTerms mean_loss;
    for (int a = 0; a < accumulation; ++a) {
      const AffinitySet set = draw(initial);
      initial = false;
      const auto r = refs(*set);
      auto lg = loss_and_grad(out.field.values, grid, GraphRefs(r), true);
      check_finite(lg.loss, adam.step);
      grad += lg.grad;
      mean_loss.rayleigh_l1 += lg.loss.rayleigh_l1;
      mean_loss.ortho_penalty += lg.loss.ortho_penalty;
    }
    grad /= accumulation;
    mean_loss.rayleigh_l1 /= accumulation;
    mean_loss.ortho_penalty /= accumulation;
    mean_loss.total = mean_loss.rayleigh_l1 + mean_loss.ortho_penalty;
    out.history.push_back(mean_loss.total);
    adam.lr = scheduled_lr(cfg.lr, cfg.schedule, it, cfg.iterations);
    adam_step(adam, out.field.values, grad);
  }

  const auto r = refs(*first);
  out.final_loss = loss_and_grad(out.field.values, grid, GraphRefs(r), false).loss;
  check_finite(out.final_loss, adam.step);
  return out;
}

DatasetResult optimize_dataset(const std::vector<FeatureBundle>& dataset, const DatasetConfig& cfg) {
  if (dataset.empty()) throw InputError("dataset has no images");
  if (cfg.channels < 1) throw InputError("channel count must be >= 1");
  if (cfg.batch < 1) throw InputError("batch size must be >= 1");
  if (cfg.steps_per_batch < 1) throw InputError("steps per batch must be >= 1");
  if (cfg.iterations < 0) throw InputError("iteration count must be >= 0");

  std::set<std::string> seen;
  for (const auto& b : dataset) {
    if (!seen.insert(b.id()).second) throw InputError("image id '" + b.id() + "' appears twice in the dataset");
  }

  DatasetResult out;
  const std::size_t n = dataset.size();
  out.batch = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), n));
  if (out.batch < cfg.batch) {
    out.warnings.push_back("batch size " + std::to_string(cfg.batch) + " exceeds the dataset size; clamped to " +
                           std::to_string(out.batch));
  }

  // Layers within the resolution cap, consistent across the dataset.
  Grid field_grid{0, 0};
  for (int layer : dataset.front().layers()) {
    const Grid g = dataset.front().layer_grid(layer);
    if (g.rows > cfg.graph.max_resolution.rows || g.cols > cfg.graph.max_resolution.cols) continue;
    out.layers.push_back(layer);
    if (g.size() > field_grid.size()) field_grid = g;
  }
  if (out.layers.empty()) throw InputError("no layer within the maximum resolution " + to_string(cfg.graph.max_resolution));
  for (const auto& b : dataset) {
    for (int layer : out.layers) {
      if (!(b.layer_grid(layer) == dataset.front().layer_grid(layer))) {
        throw InputError("image " + b.id() + " layer " + std::to_string(layer) + " grid differs from " +
                         dataset.front().id());
      }
    }
  }

  // tokens[layer index][image]
  std::vector<std::vector<BatchTokens>> tokens(out.layers.size());
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    for (const auto& b : dataset) tokens[l].push_back(batch_tokens(b, out.layers[l], cfg.source));
  }

  std::mt19937_64 rng(cfg.seed);
  const auto n0 = static_cast<Eigen::Index>(field_grid.size());
  std::vector<Matrix> fields(n);
  std::vector<AdamState> states(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Scaled so the stacked batch starts with channel norms near 1.
    fields[i] = init_field_values(n0, cfg.channels, rng) / std::sqrt(static_cast<double>(out.batch));
    states[i] = AdamState(n0, cfg.channels, cfg.lr);
    out.image_ids.push_back(dataset[i].id());
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  // A full-dataset batch always holds the same images, so the order stays fixed and
  // the graphs are built once.
  const bool full_batch = static_cast<std::size_t>(out.batch) == n;
  std::vector<std::size_t> members;
  std::vector<AffinityGraph> graphs;
  const std::int64_t total_steps = static_cast<std::int64_t>(cfg.iterations) * cfg.steps_per_batch;
  for (int it = 0; it < cfg.iterations; ++it) {
    if (cursor >= n) {
      if (!full_batch) std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(out.batch), n - cursor);
    std::vector<std::size_t> next(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                  order.begin() + static_cast<std::ptrdiff_t>(cursor + take));
    cursor += take;
    if (next != members || graphs.empty()) {
      members = std::move(next);
      graphs.clear();
      for (const auto& layer_tokens : tokens) {
        std::vector<const BatchTokens*> batch;
        for (std::size_t m : members) batch.push_back(&layer_tokens[m]);
        graphs.push_back(build_batch_graph(batch, cfg.graph));
      }
    }
    const auto r = refs(graphs);

    Matrix stacked(n0 * static_cast<Eigen::Index>(take), cfg.channels);
    for (int step = 0; step < cfg.steps_per_batch; ++step) {
      for (std::size_t k = 0; k < take; ++k) stacked.middleRows(n0 * static_cast<Eigen::Index>(k), n0) = fields[members[k]];
      auto lg = loss_and_grad(stacked, field_grid, GraphRefs(r), true);
      check_finite(lg.loss, static_cast<std::int64_t>(out.history.size()));
      out.history.push_back(lg.loss.total);
      const double lr = scheduled_lr(cfg.lr, cfg.schedule, static_cast<std::int64_t>(out.history.size()) - 1, total_steps);
      for (std::size_t k = 0; k < take; ++k) {
        states[members[k]].lr = lr;
        const Matrix g = lg.grad.middleRows(n0 * static_cast<Eigen::Index>(k), n0);
        adam_step(states[members[k]], fields[members[k]], g);
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) out.fields.emplace(dataset[i].id(), EigenField(field_grid, std::move(fields[i])));
  return out;
}

namespace {

Matrix sorted_rotation(const Matrix& gram, Vector& eigenvalues) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(gram);
  if (solver.info() != Eigen::Success) throw ComputeError("Gram eigendecomposition failed");
  const Eigen::Index c = gram.rows();
  Matrix u(c, c);
  eigenvalues.resize(c);
  for (Eigen::Index k = 0; k < c; ++k) {
    const Eigen::Index src = c - 1 - k;  // ascending -> descending
    eigenvalues[k] = std::max(solver.eigenvalues()[src], 0.0);
    Vector col = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col[arg] < 0.0) col = -col;
    u.col(k) = col;
  }
  return u;
}

}  // namespace

OrthoEigenField orthogonalize(const EigenField& field) {
  if (field.channels() < 1) throw InputError("field has no channels");
  if (!field.values.allFinite()) throw ComputeError("field has non-finite values");
  OrthoEigenField out;
  const Matrix u = sorted_rotation(field.values.transpose() * field.values, out.eigenvalues);
  out.field = EigenField(field.grid, field.values * u);
  return out;
}

std::vector<OrthoEigenField> orthogonalize_jointly(const std::vector<EigenField>& fields) {
  if (fields.empty()) return {};
  const int c = fields.front().channels();
  Matrix gram = Matrix::Zero(c, c);
  for (const auto& f : fields) {
    if (f.channels() != c) throw InputError("fields differ in channel count");
    if (!f.values.allFinite()) throw ComputeError("field has non-finite values");
    gram += f.values.transpose() * f.values;
  }
  Vector eig;
  const Matrix u = sorted_rotation(gram, eig);
  std::vector<OrthoEigenField> out;
  for (const auto& f : fields) out.push_back({EigenField(f.grid, f.values * u), eig});
  return out;
}

}  // namespace lsc
