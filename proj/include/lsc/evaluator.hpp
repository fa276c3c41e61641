#pragma once

// Segmentation and representation metrics.

#include <lsc/field.hpp>
#include <lsc/segmenter.hpp>

#include <cstdint>
#include <vector>

namespace lsc {

/// Rows are predicted clusters, columns ground-truth classes.
struct ConfusionMatrix {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;

  [[nodiscard]] std::int64_t total() const { return counts.sum(); }
};

/// Accumulates pred/gt co-occurrences; gt pixels equal to `ignore` are skipped.
/// Labels outside [0, k_pred) or [0, k_gt) are an InputError.
void accumulate_confusion(ConfusionMatrix& cm, const std::vector<int>& pred, const std::vector<int>& gt,
                          int ignore = kIgnoreLabel);
ConfusionMatrix confusion(const std::vector<int>& pred, int k_pred, const std::vector<int>& gt, int k_gt,
                          int ignore = kIgnoreLabel);

/// Largest gt label (excluding `ignore`) plus one.
int label_count(const std::vector<int>& gt, int ignore = kIgnoreLabel);

/// Each predicted region takes the gt label it overlaps most (ties to the lower label);
/// IoU is averaged over the classes present in gt.
double oracle_decode_miou(const SegmentationMap& pred, const LabelGrid& gt, int ignore = kIgnoreLabel);

struct GreedyMatch {
  std::vector<int> mapping;        // cluster -> class
  std::vector<bool> empty_rows;    // cluster had no pixels; mapped to class 0
};

/// Independent per-cluster argmax (many-to-one).
GreedyMatch greedy_match(const ConfusionMatrix& cm);

/// One-to-one assignment maximizing the matched count. Ties resolve to the
/// lexicographically smallest assignment vector. Clusters left without a class
/// (more clusters than classes) map to -1.
std::vector<int> hungarian_match(const ConfusionMatrix& cm);

enum class MatchMode { greedy, hungarian };
MatchMode match_mode_from_string(const std::string& s);

/// mIoU over gt classes present after relabeling clusters with the chosen matcher.
double matched_miou(const ConfusionMatrix& cm, MatchMode mode);
double matched_miou(const std::vector<int>& pred, int k_pred, const std::vector<int>& gt, MatchMode mode,
                    int ignore = kIgnoreLabel);

struct RegressionResult {
  double mse = 0.0;        // mean over both axes, grid-index units
  double mse_rows = 0.0;
  double mse_cols = 0.0;
  bool ridge_fallback = false;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

/// OLS with intercept from features to (row, col) grid indices of a 32x32 tile,
/// fit on a seeded 80% split and scored on the remaining 20%. `features` stacks
/// whole tiles in raster order (rows a multiple of tile.size()).
RegressionResult coord_regression(const Matrix& features, std::uint64_t split_seed, Grid tile = {32, 32});

struct SpatialLabelMap {
  Grid grid;
  std::vector<int> labels;  // kSpatialIgnore or 2 * class + side (side 0 = left, 1 = right)
  std::size_t min_px = 50;
  double center_band = 0.2;
};

inline constexpr int kSpatialIgnore = -1;

/// 4-connected components per class; a component is labeled left/right by its
/// centroid column relative to the center band, ignored when smaller than min_px
/// or inside the band.
SpatialLabelMap gen_spatial_labels(const LabelGrid& gt, std::size_t min_px = 50, double center_band = 0.2,
                                   int ignore = kIgnoreLabel);

/// Fraction of gt instances matched (IoU >= thr) by a distinct proposal, greedy by IoU.
double proposal_recall(const std::vector<std::vector<std::uint8_t>>& proposals,
                       const std::vector<std::vector<std::uint8_t>>& gt_instances, double iou_thr = 0.5);

/// Adjusted Rand index between two labelings.
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace lsc
