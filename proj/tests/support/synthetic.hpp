#pragma once

// Synthetic graphs, fields and feature bundles for tests.

#include <lsc/eigen_optimizer.hpp>
#include <lsc/graph_builder.hpp>
#include <lsc/tensor_store.hpp>

#include <filesystem>
#include <random>
#include <vector>

namespace lsc::testing {

/// Block-diagonal graph with all-ones blocks of the given sizes over a 1 x n grid.
AffinityGraph block_graph(const std::vector<int>& sizes);

/// Block graph over `grid` where node i belongs to block labels[i]; within-block weights
/// are 1 + jitter * U[0,1) (symmetric), across-block weights 0.
AffinityGraph partition_graph(Grid grid, const std::vector<int>& labels, double jitter, std::mt19937_64& rng);

/// Orthonormal block indicators (nodes x k).
Matrix indicator_field(const std::vector<int>& labels, int k);

/// Random dense symmetric graph with k planted groups; within weights ~ U[0.5, 1.5),
/// across weights ~ cross * U[0, 1). Then balanced to (approximately) constant degree.
AffinityGraph planted_graph(int n, int k, double cross, std::mt19937_64& rng);

/// Dense symmetric graph with i.i.d. U[0,1) weights and sparse random zeros.
AffinityGraph random_graph(int n, double zero_prob, std::mt19937_64& rng);

/// Graph with `components` disconnected random blocks of random sizes.
AffinityGraph random_component_graph(int n, int components, std::mt19937_64& rng);

/// Labels of a vertical split: columns < split are 0, the rest 1.
std::vector<int> left_right_labels(Grid grid, int split);

/// Writes a manifest whose single layer's query/key tokens are scaled one-hot
/// group codes, so exp(QK^T / sqrt(d)) is nearly block diagonal.
std::filesystem::path write_block_manifest(const std::filesystem::path& dir, const std::string& id, Grid grid,
                                           const std::vector<int>& labels, int groups, double scale,
                                           int heads = 1, int timesteps = 1);

struct WhatWhereImage {
  std::string id;
  Grid grid;
  std::vector<int> semantic;  // per pixel, in [0, 3)
  std::vector<int> side;      // per pixel, 0 left / 1 right
};

/// Images whose value tokens encode one of three shared semantic groups and whose
/// query/key tokens encode the left/right half. Two layers: grid and grid/2.
std::vector<WhatWhereImage> write_what_where_dataset(const std::filesystem::path& dir, int n_images, Grid grid,
                                                     std::uint64_t seed);

/// Fresh scratch directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace lsc::testing
