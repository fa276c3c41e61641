#pragma once

#include <lsc/field.hpp>

#include <cstdint>
#include <optional>
#include <vector>

namespace lsc {

struct KMeansResult {
  std::vector<int> labels;
  Matrix centers;  // K x C
  double inertia = 0.0;
  int iterations = 0;
};

/// k-means++ seeding followed by Lloyd iterations until the largest center shift
/// drops below 1e-6 or 300 iterations. Points are rows.
KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed);

/// Mean silhouette with Euclidean distances; a point whose a and b are both zero
/// contributes 0. More than `max_points` points are subsampled with `seed`.
double silhouette(const Matrix& points, const std::vector<int>& labels, std::uint64_t seed = 0,
                  std::size_t max_points = 2000);

struct KSelection {
  int k = 0;
  std::vector<int> labels;
  std::vector<double> scores;  // per K in [kmin, kmax]; -inf where a clustering was degenerate
};

/// K-means for every K in [kmin, kmax]; the best silhouette wins, ties to smaller K.
KSelection select_k(const Matrix& points, int kmin, int kmax, std::uint64_t seed);

struct KMode {
  bool automatic = true;
  int k = 0;  // fixed K when not automatic
  int kmin = 2;
  int kmax = 10;
};

/// Pixels of the field are the points.
SegmentationMap segment_field(const OrthoEigenField& field, const KMode& mode, std::uint64_t seed);

/// Joint clustering of several fields (dataset protocol): one K-means over all pixels.
std::vector<SegmentationMap> segment_fields_jointly(const std::vector<OrthoEigenField>& fields, const KMode& mode,
                                                    std::uint64_t seed);

struct InstanceProposal {
  Grid grid;
  std::vector<std::uint8_t> mask;
  double score = 0.0;
  int k = 0;       // K of the clustering the proposal came from
  int origin = 0;  // cluster id, or merge step id (>= k) for merged regions
  bool merged = false;

  [[nodiscard]] std::size_t area() const;
};

/// Silhouette of {foreground, nearest background} where the background sample is
/// the |mask| background pixels closest to the foreground centroid in feature space.
double rank_proposal(const EigenField& field, const std::vector<std::uint8_t>& mask, std::uint64_t seed = 0);

struct ProposalConfig {
  int kmin = 2;
  int kmax = 10;
};

/// K-Means regions for K in [kmin, kmax] plus every intermediate of ward-linkage
/// merging of 4-adjacent regions, deduplicated and scored with rank_proposal.
/// A mask covering the whole image cannot be ranked and scores 0.
std::vector<InstanceProposal> propose_instances(const EigenField& field, std::uint64_t seed,
                                                const ProposalConfig& cfg = {});

struct FilterConfig {
  std::size_t min_px = 1;
  double max_frac = 0.9;
  double iou_dedup = 0.9;
};

/// Drops small, oversized and non-positive proposals, then greedy IoU dedup keeping higher scores.
std::vector<InstanceProposal> filter_proposals(std::vector<InstanceProposal> proposals, const FilterConfig& cfg);

double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);

inline constexpr int kBackground = -1;

/// Argmax-cosine class per region when the best cosine reaches `threshold`,
/// kBackground otherwise; ties go to the lower class index.
std::vector<int> zero_shot_assign(const Matrix& region_features, const Matrix& class_embeddings,
                                  double threshold = 0.7);

/// Mean feature per label (rows of `features` are pixels).
Matrix pool_region_features(const Matrix& features, const std::vector<int>& labels, int n_regions);

}  // namespace lsc
