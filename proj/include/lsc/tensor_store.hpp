#pragma once

// On-disk representation shared by the feature exporter and the engine.
//
// manifest.json lists raw tensors (headerless little-endian f32, row-major over
// (h, w, d), tokens in raster order, no CLS token). Eigenfields are stored as
// <id>.eig.f32 + <id>.eig.json and segmentations as PNG + <id>.seg.json.

#include <lsc/field.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lsc {

enum class TensorKind { query, key, value, final_feature, class_embedding };

std::string to_string(TensorKind kind);
TensorKind tensor_kind_from_string(const std::string& s);

struct TensorShape {
  int h = 0;
  int w = 0;
  int d = 0;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(d);
  }
  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

struct TensorRecord {
  std::string name;
  TensorKind kind = TensorKind::query;
  int layer = 0;
  std::optional<int> head;  // nullopt: heads merged (concatenated) in one record
  int timestep = 0;
  int noise_seed = 0;  // distinguishes repeated draws at one timestep
  TensorShape shape;
  std::string file;  // relative to the manifest directory
};

struct Manifest {
  int schema_version = 1;
  std::string image_id;
  std::string model_name;
  int image_height = 0;
  int image_width = 0;
  std::string cls_token = "dropped";
  std::vector<TensorRecord> records;
  std::filesystem::path root;  // directory holding manifest.json; not serialized

  [[nodiscard]] const TensorRecord* find(const std::string& name) const;
};

/// Row-major h x w x d float tensor.
struct Tensor3 {
  int h = 0;
  int w = 0;
  int d = 0;
  std::vector<float> data;

  Tensor3() = default;
  Tensor3(int h_, int w_, int d_) : h(h_), w(w_), d(d_), data(static_cast<std::size_t>(h_) * w_ * d_, 0.0f) {}

  [[nodiscard]] Grid grid() const { return {h, w}; }
  [[nodiscard]] float& at(int r, int c, int k) { return data[(static_cast<std::size_t>(r) * w + c) * d + k]; }
  [[nodiscard]] float at(int r, int c, int k) const { return data[(static_cast<std::size_t>(r) * w + c) * d + k]; }

  /// Tokens as rows: (h*w) x d.
  [[nodiscard]] Matrix as_matrix() const;
  static Tensor3 from_matrix(Grid grid, const Matrix& m);
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

Tensor3 load_tensor(const Manifest& manifest, const std::string& name);
Tensor3 read_tensor_file(const std::filesystem::path& path, TensorShape shape);
void write_tensor_file(const std::filesystem::path& path, const Tensor3& tensor);

/// Writes `tensor` next to the manifest and appends its record (shape and file filled in).
void add_tensor(Manifest& manifest, TensorRecord record, const Tensor3& tensor);

struct EigenFieldMeta {
  std::string image_id;
  std::string graph = "qk";  // qk | vv | attention
  int iterations = 0;
  std::uint64_t seed = 0;
  std::optional<std::vector<double>> eigenvalues;  // set once orthogonalized
};

struct EigenFieldFile {
  EigenField field;
  EigenFieldMeta meta;
};

/// `stem` is the path without extension; writes stem.eig.f32 and stem.eig.json.
void save_eigenfield(const EigenFieldFile& file, const std::filesystem::path& stem);
EigenFieldFile load_eigenfield(const std::filesystem::path& stem_or_json);

/// Writes stem.png (8-bit palette when k <= 256, 16-bit grayscale otherwise) and stem.seg.json.
void save_segmentation(const SegmentationMap& seg, const std::filesystem::path& stem);
SegmentationMap load_segmentation(const std::filesystem::path& stem_or_png);

/// Label grids: palette/grayscale PNG (8 or 16 bit), or raw u16 (.u16 + .json with height/width).
LabelGrid load_label_grid(const std::filesystem::path& path);
void save_label_grid_u16(const LabelGrid& grid, const std::filesystem::path& stem);

}  // namespace lsc
