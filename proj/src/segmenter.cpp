#include <lsc/segmenter.hpp>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace lsc {

namespace {

constexpr int kMaxLloydIterations = 300;
constexpr double kCenterShiftTol = 1e-6;

int nearest_center(const Matrix& points, Eigen::Index i, const Matrix& centers, double* dist2) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centers.rows(); ++k) {
    const double d = (points.row(i) - centers.row(k)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  if (dist2) *dist2 = best_d;
  return best;
}

Matrix plus_plus_seeds(const Matrix& points, int k, std::mt19937_64& rng) {
  const Eigen::Index n = points.rows();
  Matrix centers(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  centers.row(0) = points.row(first(rng));
  Vector d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = (points.row(i) - centers.row(0)).squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = first(rng);  // every point coincides with a center
    }
    centers.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], (points.row(i) - centers.row(c)).squaredNorm());
  }
  return centers;
}

int distinct_labels(const std::vector<int>& labels) {
  return static_cast<int>(std::set<int>(labels.begin(), labels.end()).size());
}

}  // namespace

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed) {
  const Eigen::Index n = points.rows();
  if (k < 1) throw InputError("K must be >= 1");
  if (n < k) throw InputError("K-Means needs at least K=" + std::to_string(k) + " points, got " + std::to_string(n));
  if (!points.allFinite()) throw InputError("K-Means input has non-finite values");

  std::mt19937_64 rng(seed);
  KMeansResult out;
  out.centers = plus_plus_seeds(points, k, rng);
  out.labels.assign(static_cast<std::size_t>(n), 0);

  auto assign = [&]() {
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double d2 = 0.0;
      out.labels[static_cast<std::size_t>(i)] = nearest_center(points, i, out.centers, &d2);
      inertia += d2;
    }
    return inertia;
  };

  out.inertia = assign();
  for (out.iterations = 1; out.iterations <= kMaxLloydIterations; ++out.iterations) {
    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int l = out.labels[static_cast<std::size_t>(i)];
      sums.row(l) += points.row(i);
      ++counts[static_cast<std::size_t>(l)];
    }
    double shift = 0.0;
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) continue;  // empty cluster keeps its center
      const Eigen::RowVectorXd next = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
      shift = std::max(shift, (next - out.centers.row(c)).norm());
      out.centers.row(c) = next;
    }
    [[maybe_unused]] const double previous = out.inertia;
    out.inertia = assign();
    assert(out.inertia <= previous * (1.0 + 1e-12) + 1e-12);
    if (shift < kCenterShiftTol) break;
  }
  out.iterations = std::min(out.iterations, kMaxLloydIterations);
  return out;
}

double silhouette(const Matrix& points, const std::vector<int>& labels, std::uint64_t seed, std::size_t max_points) {
  if (labels.size() != static_cast<std::size_t>(points.rows())) throw InputError("label count does not match points");
  std::vector<Eigen::Index> idx(labels.size());
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  if (idx.size() > max_points) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_points);
    std::sort(idx.begin(), idx.end());
  }

  std::map<int, int> cluster_of;  // label -> dense id
  for (Eigen::Index i : idx) cluster_of.emplace(labels[static_cast<std::size_t>(i)], 0);
  if (cluster_of.size() < 2) throw InputError("silhouette needs at least two non-empty clusters");
  int next = 0;
  for (auto& [label, id] : cluster_of) id = next++;

  const std::size_t m = idx.size();
  const int kc = next;
  std::vector<int> cl(m);
  std::vector<int> sizes(static_cast<std::size_t>(kc), 0);
  for (std::size_t a = 0; a < m; ++a) {
    cl[a] = cluster_of[labels[static_cast<std::size_t>(idx[a])]];
    ++sizes[static_cast<std::size_t>(cl[a])];
  }

  double total = 0.0;
  std::vector<double> sum(static_cast<std::size_t>(kc));
  for (std::size_t a = 0; a < m; ++a) {
    std::fill(sum.begin(), sum.end(), 0.0);
    for (std::size_t b = 0; b < m; ++b) {
      if (a == b) continue;
      sum[static_cast<std::size_t>(cl[b])] += (points.row(idx[a]) - points.row(idx[b])).norm();
    }
    const int own = cl[a];
    if (sizes[static_cast<std::size_t>(own)] <= 1) continue;  // singleton scores 0
    const double in = sum[static_cast<std::size_t>(own)] / (sizes[static_cast<std::size_t>(own)] - 1);
    double out = std::numeric_limits<double>::infinity();
    for (int c = 0; c < kc; ++c) {
      if (c != own) out = std::min(out, sum[static_cast<std::size_t>(c)] / sizes[static_cast<std::size_t>(c)]);
    }
    const double denom = std::max(in, out);
    if (denom > 0.0) total += (out - in) / denom;
  }
  return total / static_cast<double>(m);
}

KSelection select_k(const Matrix& points, int kmin, int kmax, std::uint64_t seed) {
  if (kmin < 2 || kmax < kmin) throw InputError("K range must satisfy 2 <= kmin <= kmax");
  if (points.rows() < kmax) {
    throw InputError("K sweep up to " + std::to_string(kmax) + " needs at least that many points");
  }
  KSelection out;
  double best = -std::numeric_limits<double>::infinity();
  for (int k = kmin; k <= kmax; ++k) {
    KMeansResult km = kmeans(points, k, seed);
    double score = -std::numeric_limits<double>::infinity();
    if (distinct_labels(km.labels) == k) score = silhouette(points, km.labels, seed);
    out.scores.push_back(score);
    if (out.k == 0 || score > best) {
      best = score;
      out.k = k;
      out.labels = std::move(km.labels);
    }
  }
  return out;
}

namespace {

std::vector<int> cluster_points(const Matrix& points, const KMode& mode, std::uint64_t seed, int& k) {
  if (mode.automatic) {
    const int kmax = std::min<int>(mode.kmax, static_cast<int>(points.rows()));
    KSelection sel = select_k(points, mode.kmin, kmax, seed);
    k = sel.k;
    return std::move(sel.labels);
  }
  k = mode.k;
  return kmeans(points, mode.k, seed).labels;
}

}  // namespace

SegmentationMap segment_field(const OrthoEigenField& field, const KMode& mode, std::uint64_t seed) {
  if (!field.field.consistent()) throw InputError("field values do not match its grid");
  SegmentationMap seg;
  seg.grid = field.field.grid;
  seg.seed = seed;
  seg.k_mode = mode.automatic ? "auto" : "fixed";
  seg.labels = cluster_points(field.field.values, mode, seed, seg.k);
  seg.degenerate = distinct_labels(seg.labels) < seg.k;
  return seg;
}

std::vector<SegmentationMap> segment_fields_jointly(const std::vector<OrthoEigenField>& fields, const KMode& mode,
                                                    std::uint64_t seed) {
  if (fields.empty()) return {};
  Eigen::Index rows = 0;
  for (const auto& f : fields) {
    if (!f.field.consistent()) throw InputError("field values do not match its grid");
    if (f.field.channels() != fields.front().field.channels()) throw InputError("fields differ in channel count");
    rows += f.field.values.rows();
  }
  Matrix all(rows, fields.front().field.channels());
  Eigen::Index at = 0;
  for (const auto& f : fields) {
    all.middleRows(at, f.field.values.rows()) = f.field.values;
    at += f.field.values.rows();
  }
  int k = 0;
  const std::vector<int> labels = cluster_points(all, mode, seed, k);
  const bool degenerate = distinct_labels(labels) < k;
  std::vector<SegmentationMap> out;
  at = 0;
  for (const auto& f : fields) {
    SegmentationMap seg;
    seg.grid = f.field.grid;
    seg.k = k;
    seg.seed = seed;
    seg.k_mode = mode.automatic ? "auto" : "fixed";
    seg.degenerate = degenerate;
    seg.labels.assign(labels.begin() + at, labels.begin() + at + f.field.values.rows());
    at += f.field.values.rows();
    out.push_back(std::move(seg));
  }
  return out;
}

std::size_t InstanceProposal::area() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

double rank_proposal(const EigenField& field, const std::vector<std::uint8_t>& mask, std::uint64_t seed) {
  if (mask.size() != field.grid.size()) throw InputError("mask size does not match the field");
  std::vector<Eigen::Index> fg, bg;
  for (std::size_t i = 0; i < mask.size(); ++i) (mask[i] ? fg : bg).push_back(static_cast<Eigen::Index>(i));
  if (fg.empty()) throw InputError("proposal mask is empty");
  if (bg.empty()) throw InputError("proposal mask covers the whole image");

  const Matrix& x = field.values;
  Eigen::RowVectorXd centroid = Eigen::RowVectorXd::Zero(x.cols());
  for (Eigen::Index i : fg) centroid += x.row(i);
  centroid /= static_cast<double>(fg.size());

  std::vector<std::pair<double, Eigen::Index>> by_distance;
  by_distance.reserve(bg.size());
  for (Eigen::Index i : bg) by_distance.emplace_back((x.row(i) - centroid).squaredNorm(), i);
  const std::size_t keep = std::min(fg.size(), bg.size());
  std::partial_sort(by_distance.begin(), by_distance.begin() + static_cast<std::ptrdiff_t>(keep), by_distance.end());

  Matrix points(static_cast<Eigen::Index>(fg.size() + keep), x.cols());
  std::vector<int> labels;
  Eigen::Index at = 0;
  for (Eigen::Index i : fg) {
    points.row(at++) = x.row(i);
    labels.push_back(0);
  }
  for (std::size_t j = 0; j < keep; ++j) {
    points.row(at++) = x.row(by_distance[j].second);
    labels.push_back(1);
  }
  return silhouette(points, labels, seed);
}

namespace {

struct Region {
  std::vector<std::uint8_t> mask;
  Eigen::RowVectorXd sum;
  double size = 0.0;
  int id = 0;
};

double ward_cost(const Region& a, const Region& b) {
  const Eigen::RowVectorXd diff = a.sum / a.size - b.sum / b.size;
  return a.size * b.size / (a.size + b.size) * diff.squaredNorm();
}

// Leaves and ward-merge intermediates for one clustering.
std::vector<InstanceProposal> merge_tree(const EigenField& field, const std::vector<int>& labels, int k) {
  const Grid g = field.grid;
  std::vector<InstanceProposal> out;
  std::map<int, Region> regions;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Region& r = regions[labels[i]];
    if (r.mask.empty()) {
      r.mask.assign(labels.size(), 0);
      r.sum = Eigen::RowVectorXd::Zero(field.values.cols());
      r.id = labels[i];
    }
    r.mask[i] = 1;
    r.sum += field.values.row(static_cast<Eigen::Index>(i));
    r.size += 1.0;
  }
  for (const auto& [id, r] : regions) out.push_back({g, r.mask, 0.0, k, id, false});

  std::set<std::pair<int, int>> adjacent;
  auto link = [&](int a, int b) {
    if (a != b) adjacent.insert({std::min(a, b), std::max(a, b)});
  };
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      const int here = labels[static_cast<std::size_t>(r) * g.cols + c];
      if (c + 1 < g.cols) link(here, labels[static_cast<std::size_t>(r) * g.cols + c + 1]);
      if (r + 1 < g.rows) link(here, labels[static_cast<std::size_t>(r + 1) * g.cols + c]);
    }
  }

  int next_id = k;
  while (!adjacent.empty()) {
    auto best = adjacent.begin();
    double best_cost = std::numeric_limits<double>::infinity();
    for (auto it = adjacent.begin(); it != adjacent.end(); ++it) {
      const double cost = ward_cost(regions.at(it->first), regions.at(it->second));
      if (cost < best_cost) {
        best_cost = cost;
        best = it;
      }
    }
    const auto [a, b] = *best;
    Region merged;
    merged.mask = regions.at(a).mask;
    const Region& rb = regions.at(b);
    for (std::size_t i = 0; i < merged.mask.size(); ++i) merged.mask[i] |= rb.mask[i];
    merged.sum = regions.at(a).sum + rb.sum;
    merged.size = regions.at(a).size + rb.size;
    merged.id = next_id++;
    out.push_back({g, merged.mask, 0.0, k, merged.id, true});

    std::set<std::pair<int, int>> relinked;
    for (const auto& [p, q] : adjacent) {
      const int p2 = (p == a || p == b) ? merged.id : p;
      const int q2 = (q == a || q == b) ? merged.id : q;
      if (p2 != q2) relinked.insert({std::min(p2, q2), std::max(p2, q2)});
    }
    adjacent = std::move(relinked);
    regions.erase(a);
    regions.erase(b);
    regions.emplace(merged.id, std::move(merged));
  }
  return out;
}

}  // namespace

std::vector<InstanceProposal> propose_instances(const EigenField& field, std::uint64_t seed,
                                                const ProposalConfig& cfg) {
  if (!field.consistent()) throw InputError("field values do not match its grid");
  if (cfg.kmin < 1 || cfg.kmax < cfg.kmin) throw InputError("invalid proposal K range");
  const int kmax = std::min<int>(cfg.kmax, static_cast<int>(field.values.rows()));

  std::vector<InstanceProposal> pool;
  std::set<std::vector<std::uint8_t>> seen;
  for (int k = cfg.kmin; k <= kmax; ++k) {
    const auto labels = kmeans(field.values, k, seed).labels;
    for (auto& p : merge_tree(field, labels, k)) {
      if (seen.insert(p.mask).second) pool.push_back(std::move(p));
    }
  }
  for (auto& p : pool) {
    const std::size_t area = p.area();
    p.score = area == p.mask.size() ? 0.0 : rank_proposal(field, p.mask, seed);
  }
  return pool;
}

double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) throw InputError("masks differ in size");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<InstanceProposal> filter_proposals(std::vector<InstanceProposal> proposals, const FilterConfig& cfg) {
  std::vector<InstanceProposal> candidates;
  for (auto& p : proposals) {
    const std::size_t area = p.area();
    if (area < cfg.min_px) continue;
    if (static_cast<double>(area) > cfg.max_frac * static_cast<double>(p.mask.size())) continue;
    if (!(p.score > 0.0)) continue;
    candidates.push_back(std::move(p));
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const InstanceProposal& a, const InstanceProposal& b) { return a.score > b.score; });
  std::vector<InstanceProposal> kept;
  for (auto& p : candidates) {
    bool duplicate = false;
    for (const auto& q : kept) {
      if (mask_iou(p.mask, q.mask) >= cfg.iou_dedup) {
        duplicate = true;
        break;
      }
    }
    if (!duplicate) kept.push_back(std::move(p));
  }
  return kept;
}

std::vector<int> zero_shot_assign(const Matrix& region_features, const Matrix& class_embeddings, double threshold) {
  if (region_features.cols() != class_embeddings.cols()) {
    throw InputError("region features and class embeddings differ in dimension");
  }
  auto unit = [](const Matrix& m, const char* what) {
    Matrix out = m;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const double n = out.row(i).norm();
      if (!(n > 0.0)) throw InputError(std::string(what) + " " + std::to_string(i) + " has zero norm");
      out.row(i) /= n;
    }
    return out;
  };
  const Matrix cos = unit(region_features, "region") * unit(class_embeddings, "class embedding").transpose();
  std::vector<int> out(static_cast<std::size_t>(cos.rows()), kBackground);
  for (Eigen::Index r = 0; r < cos.rows(); ++r) {
    int best = -1;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < cos.cols(); ++c) {
      if (cos(r, c) > best_cos) {
        best_cos = cos(r, c);
        best = static_cast<int>(c);
      }
    }
    if (best >= 0 && best_cos >= threshold) out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

Matrix pool_region_features(const Matrix& features, const std::vector<int>& labels, int n_regions) {
  if (labels.size() != static_cast<std::size_t>(features.rows())) throw InputError("label count does not match features");
  Matrix sums = Matrix::Zero(n_regions, features.cols());
  std::vector<double> counts(static_cast<std::size_t>(n_regions), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l < 0 || l >= n_regions) throw InputError("region label out of range");
    sums.row(l) += features.row(static_cast<Eigen::Index>(i));
    counts[static_cast<std::size_t>(l)] += 1.0;
  }
  for (int r = 0; r < n_regions; ++r) {
    if (counts[static_cast<std::size_t>(r)] > 0.0) sums.row(r) /= counts[static_cast<std::size_t>(r)];
  }
  return sums;
}

}  // namespace lsc
