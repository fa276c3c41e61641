#include <lsc/evaluator.hpp>

#include <Eigen/QR>

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>
#include <queue>
#include <random>

namespace lsc {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

void accumulate_confusion(ConfusionMatrix& cm, const std::vector<int>& pred, const std::vector<int>& gt, int ignore) {
  if (pred.size() != gt.size()) throw InputError("prediction and ground truth differ in size");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] == ignore) continue;
    if (pred[i] < 0 || pred[i] >= cm.counts.rows()) {
      throw InputError("predicted label " + std::to_string(pred[i]) + " outside [0, " +
                       std::to_string(cm.counts.rows()) + ")");
    }
    if (gt[i] < 0 || gt[i] >= cm.counts.cols()) {
      throw InputError("ground-truth label " + std::to_string(gt[i]) + " outside [0, " +
                       std::to_string(cm.counts.cols()) + ")");
    }
    ++cm.counts(pred[i], gt[i]);
  }
}

ConfusionMatrix confusion(const std::vector<int>& pred, int k_pred, const std::vector<int>& gt, int k_gt, int ignore) {
  ConfusionMatrix cm;
  cm.counts = CountMatrix::Zero(k_pred, k_gt);
  accumulate_confusion(cm, pred, gt, ignore);
  return cm;
}

int label_count(const std::vector<int>& gt, int ignore) {
  int k = 0;
  for (int l : gt) {
    if (l != ignore) k = std::max(k, l + 1);
  }
  return k;
}

GreedyMatch greedy_match(const ConfusionMatrix& cm) {
  GreedyMatch out;
  for (Eigen::Index r = 0; r < cm.counts.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < cm.counts.cols(); ++c) {
      if (cm.counts(r, c) > cm.counts(r, best)) best = c;
    }
    out.mapping.push_back(cm.counts.cols() > 0 ? static_cast<int>(best) : -1);
    out.empty_rows.push_back(cm.counts.row(r).sum() == 0);
  }
  return out;
}

namespace {

// Minimum-cost perfect assignment on a square matrix (Kuhn-Munkres with potentials).
// Returns row -> column.
std::vector<int> min_cost_assignment(const CountMatrix& cost) {
  const int n = static_cast<int>(cost.rows());
  constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::int64_t> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<std::int64_t> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      std::int64_t delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const std::int64_t cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j) {
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  }
  return row_to_col;
}

std::int64_t best_total(const CountMatrix& gain, const std::vector<int>& rows, const std::vector<int>& cols) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  if (n == 0) return 0;
  const std::int64_t top = gain.maxCoeff();
  CountMatrix cost(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < n; ++c) cost(r, c) = top - gain(rows[r], cols[c]);
  }
  const auto assign = min_cost_assignment(cost);
  std::int64_t total = 0;
  for (Eigen::Index r = 0; r < n; ++r) total += gain(rows[r], cols[assign[r]]);
  return total;
}

}  // namespace

std::vector<int> hungarian_match(const ConfusionMatrix& cm) {
  const auto kp = static_cast<int>(cm.counts.rows());
  const auto kg = static_cast<int>(cm.counts.cols());
  const int n = std::max(kp, kg);
  if (n == 0) return {};
  CountMatrix gain = CountMatrix::Zero(n, n);
  gain.topLeftCorner(kp, kg) = cm.counts;

  std::vector<int> rows(n), cols(n);
  std::iota(rows.begin(), rows.end(), 0);
  std::iota(cols.begin(), cols.end(), 0);
  const std::int64_t optimum = best_total(gain, rows, cols);

  // Fix rows in order to the smallest column that still admits the optimum.
  std::vector<int> assignment(n, -1);
  std::vector<int> free_cols = cols;
  std::int64_t fixed_gain = 0;
  for (int r = 0; r < n; ++r) {
    std::vector<int> rest_rows(rows.begin() + r + 1, rows.end());
    for (std::size_t ci = 0; ci < free_cols.size(); ++ci) {
      const int c = free_cols[ci];
      std::vector<int> rest_cols = free_cols;
      rest_cols.erase(rest_cols.begin() + static_cast<std::ptrdiff_t>(ci));
      if (fixed_gain + gain(r, c) + best_total(gain, rest_rows, rest_cols) == optimum) {
        assignment[r] = c;
        fixed_gain += gain(r, c);
        free_cols = std::move(rest_cols);
        break;
      }
    }
  }
  std::vector<int> out(static_cast<std::size_t>(kp));
  for (int r = 0; r < kp; ++r) out[r] = assignment[r] < kg ? assignment[r] : -1;
  return out;
}

MatchMode match_mode_from_string(const std::string& s) {
  if (s == "greedy") return MatchMode::greedy;
  if (s == "hungarian") return MatchMode::hungarian;
  throw InputError("match mode must be greedy or hungarian, got '" + s + "'");
}

namespace {

double miou_from_mapping(const ConfusionMatrix& cm, const std::vector<int>& mapping) {
  const Eigen::Index kg = cm.counts.cols();
  std::vector<std::int64_t> tp(kg, 0), predicted(kg, 0);
  for (Eigen::Index r = 0; r < cm.counts.rows(); ++r) {
    const int c = mapping[static_cast<std::size_t>(r)];
    if (c < 0) continue;
    tp[c] += cm.counts(r, c);
    predicted[c] += cm.counts.row(r).sum();
  }
  double sum = 0.0;
  int present = 0;
  for (Eigen::Index c = 0; c < kg; ++c) {
    const std::int64_t gt = cm.counts.col(c).sum();
    if (gt == 0) continue;
    ++present;
    sum += static_cast<double>(tp[c]) / static_cast<double>(predicted[c] + gt - tp[c]);
  }
  return present == 0 ? 0.0 : sum / present;
}

}  // namespace

double matched_miou(const ConfusionMatrix& cm, MatchMode mode) {
  const std::vector<int> mapping = mode == MatchMode::greedy ? greedy_match(cm).mapping : hungarian_match(cm);
  return miou_from_mapping(cm, mapping);
}

double matched_miou(const std::vector<int>& pred, int k_pred, const std::vector<int>& gt, MatchMode mode, int ignore) {
  return matched_miou(confusion(pred, k_pred, gt, label_count(gt, ignore), ignore), mode);
}

double oracle_decode_miou(const SegmentationMap& pred, const LabelGrid& gt, int ignore) {
  if (!(pred.grid == gt.grid)) {
    throw InputError("prediction " + to_string(pred.grid) + " and ground truth " + to_string(gt.grid) +
                     " differ in shape");
  }
  const ConfusionMatrix cm = confusion(pred.labels, pred.k, gt.labels, label_count(gt.labels, ignore), ignore);
  return miou_from_mapping(cm, greedy_match(cm).mapping);
}

RegressionResult coord_regression(const Matrix& features, std::uint64_t split_seed, Grid tile) {
  const auto per_tile = static_cast<Eigen::Index>(tile.size());
  if (!tile.valid() || features.rows() == 0 || features.rows() % per_tile != 0) {
    throw InputError("coordinate regression expects whole " + to_string(tile) + " tiles, got " +
                     std::to_string(features.rows()) + " rows");
  }
  if (!features.allFinite()) throw InputError("regression features are non-finite");
  const Eigen::Index n = features.rows();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::mt19937_64 rng(split_seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<Eigen::Index>(static_cast<double>(n) * 0.8);
  if (n_train < 1 || n_train >= n) throw InputError("too few samples for an 80/20 split");

  auto design_row = [&](Eigen::Index i, auto&& row) {
    row(0) = 1.0;
    row.tail(features.cols()) = features.row(i);
  };
  auto target = [&](Eigen::Index i) {
    const Eigen::Index local = i % per_tile;
    return Eigen::RowVector2d(static_cast<double>(local / tile.cols), static_cast<double>(local % tile.cols));
  };

  Matrix x(n_train, features.cols() + 1), y(n_train, 2);
  for (Eigen::Index k = 0; k < n_train; ++k) {
    design_row(order[k], x.row(k));
    y.row(k) = target(order[k]);
  }

  RegressionResult out;
  out.n_train = static_cast<std::size_t>(n_train);
  out.n_test = static_cast<std::size_t>(n - n_train);
  Eigen::ColPivHouseholderQR<Matrix> qr(x);
  Matrix beta;
  if (qr.rank() == x.cols()) {
    beta = qr.solve(y);
  } else {
    out.ridge_fallback = true;
    Matrix gram = x.transpose() * x;
    gram.diagonal().array() += 1e-6;
    beta = gram.ldlt().solve(x.transpose() * y);
  }

  Eigen::RowVectorXd row(features.cols() + 1);
  double se_rows = 0.0, se_cols = 0.0;
  for (Eigen::Index k = n_train; k < n; ++k) {
    design_row(order[k], row);
    const Eigen::RowVector2d err = row * beta - target(order[k]);
    se_rows += err(0) * err(0);
    se_cols += err(1) * err(1);
  }
  out.mse_rows = se_rows / static_cast<double>(out.n_test);
  out.mse_cols = se_cols / static_cast<double>(out.n_test);
  out.mse = 0.5 * (out.mse_rows + out.mse_cols);
  return out;
}

SpatialLabelMap gen_spatial_labels(const LabelGrid& gt, std::size_t min_px, double center_band, int ignore) {
  if (center_band < 0.0 || center_band > 1.0) throw InputError("center band must be in [0, 1]");
  const Grid g = gt.grid;
  SpatialLabelMap out;
  out.grid = g;
  out.min_px = min_px;
  out.center_band = center_band;
  out.labels.assign(g.size(), kSpatialIgnore);

  const double left_edge = (0.5 - center_band / 2.0) * g.cols;
  const double right_edge = (0.5 + center_band / 2.0) * g.cols;
  std::vector<bool> seen(g.size(), false);
  std::vector<std::size_t> component;
  for (std::size_t start = 0; start < g.size(); ++start) {
    if (seen[start] || gt.labels[start] == ignore) continue;
    const int cls = gt.labels[start];
    component.clear();
    std::queue<std::size_t> frontier;
    frontier.push(start);
    seen[start] = true;
    double col_sum = 0.0;
    while (!frontier.empty()) {
      const std::size_t i = frontier.front();
      frontier.pop();
      component.push_back(i);
      const int r = static_cast<int>(i / g.cols), c = static_cast<int>(i % g.cols);
      col_sum += c + 0.5;
      const int dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
      for (int d = 0; d < 4; ++d) {
        const int rr = r + dr[d], cc = c + dc[d];
        if (rr < 0 || rr >= g.rows || cc < 0 || cc >= g.cols) continue;
        const std::size_t j = static_cast<std::size_t>(rr) * g.cols + cc;
        if (!seen[j] && gt.labels[j] == cls) {
          seen[j] = true;
          frontier.push(j);
        }
      }
    }
    if (component.size() < min_px) continue;
    const double centroid = col_sum / static_cast<double>(component.size());
    int side = -1;
    if (centroid < left_edge) side = 0;
    if (centroid > right_edge) side = 1;
    if (side < 0) continue;
    for (std::size_t i : component) out.labels[i] = 2 * cls + side;
  }
  return out;
}

double proposal_recall(const std::vector<std::vector<std::uint8_t>>& proposals,
                       const std::vector<std::vector<std::uint8_t>>& gt_instances, double iou_thr) {
  if (gt_instances.empty()) throw InputError("no ground-truth instances");
  struct Pair {
    double iou;
    std::size_t gt, prop;
  };
  std::vector<Pair> pairs;
  for (std::size_t g = 0; g < gt_instances.size(); ++g) {
    for (std::size_t p = 0; p < proposals.size(); ++p) {
      const double iou = mask_iou(gt_instances[g], proposals[p]);
      if (iou >= iou_thr) pairs.push_back({iou, g, p});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    return std::tie(a.gt, a.prop) < std::tie(b.gt, b.prop);
  });
  std::vector<bool> gt_used(gt_instances.size(), false), prop_used(proposals.size(), false);
  std::size_t matched = 0;
  for (const auto& pr : pairs) {
    if (gt_used[pr.gt] || prop_used[pr.prop]) continue;
    gt_used[pr.gt] = prop_used[pr.prop] = true;
    ++matched;
  }
  return static_cast<double>(matched) / static_cast<double>(gt_instances.size());
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw InputError("labelings differ in size");
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1.0;
    ra[a[i]] += 1.0;
    rb[b[i]] += 1.0;
  }
  auto comb2 = [](double x) { return x * (x - 1.0) / 2.0; };
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [k, v] : joint) index += comb2(v);
  for (const auto& [k, v] : ra) sa += comb2(v);
  for (const auto& [k, v] : rb) sb += comb2(v);
  const double n2 = comb2(static_cast<double>(a.size()));
  if (n2 == 0.0) return 1.0;
  const double expected = sa * sb / n2;
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace lsc
