#include <lsc/tensor_store.hpp>

#include "png_io.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

namespace lsc {

namespace fs = std::filesystem;
using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "raw f32 blobs assume a little-endian host");

std::string to_string(TensorKind kind) {
  switch (kind) {
    case TensorKind::query: return "query";
    case TensorKind::key: return "key";
    case TensorKind::value: return "value";
    case TensorKind::final_feature: return "final_feature";
    case TensorKind::class_embedding: return "class_embedding";
  }
  return "?";
}

TensorKind tensor_kind_from_string(const std::string& s) {
  static const std::map<std::string, TensorKind> kinds = {
      {"query", TensorKind::query},
      {"key", TensorKind::key},
      {"value", TensorKind::value},
      {"final_feature", TensorKind::final_feature},
      {"class_embedding", TensorKind::class_embedding},
  };
  auto it = kinds.find(s);
  if (it == kinds.end()) throw InputError("unknown tensor kind '" + s + "'");
  return it->second;
}

const TensorRecord* Manifest::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

Matrix Tensor3::as_matrix() const {
  Matrix m(static_cast<Eigen::Index>(h) * w, d);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (int k = 0; k < d; ++k) m(i, k) = data[static_cast<std::size_t>(i) * d + k];
  }
  return m;
}

Tensor3 Tensor3::from_matrix(Grid grid, const Matrix& m) {
  if (m.rows() != static_cast<Eigen::Index>(grid.size())) throw InputError("matrix rows do not match grid");
  Tensor3 t(grid.rows, grid.cols, static_cast<int>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index k = 0; k < m.cols(); ++k) t.data[i * m.cols() + k] = static_cast<float>(m(i, k));
  }
  return t;
}

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

template <typename T>
T required(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw InputError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw InputError(where + ": field '" + key + "' has the wrong type");
  }
}

TensorRecord parse_record(const json& j, std::size_t index) {
  const std::string where = "record " + std::to_string(index);
  TensorRecord r;
  r.name = required<std::string>(j, "name", where);
  const std::string named = "record '" + r.name + "'";
  r.kind = tensor_kind_from_string(required<std::string>(j, "kind", named));
  r.layer = required<int>(j, "layer", named);
  const auto& head = j.contains("head") ? j.at("head") : json("merged");
  if (head.is_string()) {
    if (head.get<std::string>() != "merged") throw InputError(named + ": head must be an integer or \"merged\"");
  } else if (head.is_number_integer()) {
    r.head = head.get<int>();
  } else {
    throw InputError(named + ": head must be an integer or \"merged\"");
  }
  r.timestep = j.value("timestep", 0);
  r.noise_seed = j.value("noise_seed", 0);
  const auto shape = required<std::vector<int>>(j, "shape", named);
  if (shape.size() != 3) throw InputError(named + ": shape must have 3 entries (h, w, d)");
  r.shape = {shape[0], shape[1], shape[2]};
  const auto dtype = j.value("dtype", std::string("f32le"));
  if (dtype != "f32le" && dtype != "float32") throw InputError(named + ": unsupported dtype " + dtype);
  r.file = required<std::string>(j, "file", named);

  if (r.layer < 0 || r.timestep < 0 || (r.head && *r.head < 0)) {
    throw InputError(named + ": layer, head and timestep must be non-negative");
  }
  if (r.shape.h <= 0 || r.shape.w <= 0 || r.shape.d <= 0) {
    throw InputError(named + ": shape entries must be strictly positive");
  }
  return r;
}

ordered_json record_to_json(const TensorRecord& r) {
  ordered_json j;
  j["name"] = r.name;
  j["kind"] = to_string(r.kind);
  j["layer"] = r.layer;
  if (r.head) {
    j["head"] = *r.head;
  } else {
    j["head"] = "merged";
  }
  j["timestep"] = r.timestep;
  if (r.noise_seed != 0) j["noise_seed"] = r.noise_seed;
  j["shape"] = {r.shape.h, r.shape.w, r.shape.d};
  j["dtype"] = "f32le";
  j["file"] = r.file;
  return j;
}

using PairKey = std::tuple<int, int, int, int>;  // layer, head (-1 merged), timestep, noise_seed

PairKey pair_key(const TensorRecord& r) { return {r.layer, r.head.value_or(-1), r.timestep, r.noise_seed}; }

void check_invariants(const Manifest& m) {
  std::set<std::string> names;
  std::map<PairKey, const TensorRecord*> keys;
  for (const auto& r : m.records) {
    if (!names.insert(r.name).second) throw InputError("duplicate record name '" + r.name + "'");
    const fs::path file = m.root / r.file;
    std::error_code ec;
    const auto size = fs::file_size(file, ec);
    if (ec) throw InputError("record '" + r.name + "': cannot stat " + file.string());
    if (size != r.shape.numel() * sizeof(float)) {
      throw InputError("record '" + r.name + "': file holds " + std::to_string(size) + " bytes but shape (" +
                       std::to_string(r.shape.h) + "," + std::to_string(r.shape.w) + "," +
                       std::to_string(r.shape.d) + ") needs " + std::to_string(r.shape.numel() * sizeof(float)));
    }
    if (r.kind == TensorKind::key) keys[pair_key(r)] = &r;
  }
  for (const auto& r : m.records) {
    if (r.kind != TensorKind::query) continue;
    auto it = keys.find(pair_key(r));
    if (it == keys.end()) throw InputError("query record '" + r.name + "' has no matching key record");
    if (!(it->second->shape == r.shape)) {
      throw InputError("query record '" + r.name + "' and key '" + it->second->name + "' differ in shape");
    }
  }
}

std::vector<float> read_floats(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != count * sizeof(float)) {
    throw InputError(path.string() + ": expected " + std::to_string(count * sizeof(float)) + " bytes, found " +
                     std::to_string(bytes));
  }
  in.seekg(0);
  std::vector<float> out(count);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw InputError("short read on " + path.string());
  return out;
}

void write_floats(const fs::path& path, const float* data, std::size_t count) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
  if (!out) throw InputError("write failed on " + path.string());
}

fs::path strip_suffix(fs::path p, const std::string& suffix) {
  const std::string s = p.string();
  if (s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0) {
    return s.substr(0, s.size() - suffix.size());
  }
  return p;
}

}  // namespace

Manifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("manifest not found: " + path.string());
  const json j = read_json(path);
  if (!j.is_object()) throw InputError(path.string() + ": manifest must be a JSON object");

  Manifest m;
  m.root = path.parent_path();
  m.schema_version = required<int>(j, "schema_version", "manifest");
  m.image_id = required<std::string>(j, "image_id", "manifest");
  m.model_name = j.value("model_name", std::string());
  if (j.contains("image_size")) {
    const auto size = required<std::vector<int>>(j, "image_size", "manifest");
    if (size.size() != 2) throw InputError("manifest: image_size must be [H, W]");
    m.image_height = size[0];
    m.image_width = size[1];
  }
  m.cls_token = j.value("cls_token", std::string("dropped"));
  const auto& records = j.contains("records") ? j.at("records") : json::array();
  if (!records.is_array()) throw InputError("manifest: records must be an array");
  for (std::size_t i = 0; i < records.size(); ++i) m.records.push_back(parse_record(records[i], i));
  check_invariants(m);
  return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
  ordered_json j;
  j["schema_version"] = m.schema_version;
  j["image_id"] = m.image_id;
  j["model_name"] = m.model_name;
  j["image_size"] = {m.image_height, m.image_width};
  j["cls_token"] = m.cls_token;
  j["records"] = ordered_json::array();
  for (const auto& r : m.records) j["records"].push_back(record_to_json(r));
  write_json(path, j);
}

Tensor3 read_tensor_file(const fs::path& path, TensorShape shape) {
  Tensor3 t;
  t.h = shape.h;
  t.w = shape.w;
  t.d = shape.d;
  t.data = read_floats(path, shape.numel());
  return t;
}

void write_tensor_file(const fs::path& path, const Tensor3& tensor) {
  write_floats(path, tensor.data.data(), tensor.data.size());
}

Tensor3 load_tensor(const Manifest& manifest, const std::string& name) {
  const TensorRecord* r = manifest.find(name);
  if (!r) throw InputError("no tensor named '" + name + "' in manifest " + manifest.image_id);
  return read_tensor_file(manifest.root / r->file, r->shape);
}

void add_tensor(Manifest& manifest, TensorRecord record, const Tensor3& tensor) {
  if (manifest.find(record.name)) throw InputError("duplicate record name '" + record.name + "'");
  record.shape = {tensor.h, tensor.w, tensor.d};
  if (record.file.empty()) record.file = record.name + ".f32";
  write_tensor_file(manifest.root / record.file, tensor);
  manifest.records.push_back(std::move(record));
}

void save_eigenfield(const EigenFieldFile& file, const fs::path& stem) {
  const auto& f = file.field;
  if (!f.consistent()) throw InputError("eigenfield shape does not match its values");
  if (file.meta.eigenvalues && static_cast<int>(file.meta.eigenvalues->size()) != f.channels()) {
    throw InputError("eigenfield has " + std::to_string(f.channels()) + " channels but " +
                     std::to_string(file.meta.eigenvalues->size()) + " eigenvalues");
  }
  const Tensor3 t = Tensor3::from_matrix(f.grid, f.values);

  ordered_json j;
  j["image_id"] = file.meta.image_id;
  j["shape"] = {f.grid.rows, f.grid.cols, f.channels()};
  j["graph"] = file.meta.graph;
  j["iterations"] = file.meta.iterations;
  j["seed"] = file.meta.seed;
  if (file.meta.eigenvalues) j["eigenvalues"] = *file.meta.eigenvalues;
  j["values"] = stem.filename().string() + ".eig.f32";

  write_floats(fs::path(stem.string() + ".eig.f32"), t.data.data(), t.data.size());
  write_json(fs::path(stem.string() + ".eig.json"), j);
}

EigenFieldFile load_eigenfield(const fs::path& stem_or_json) {
  const fs::path stem = strip_suffix(strip_suffix(stem_or_json, ".json"), ".eig");
  const fs::path meta_path = stem.string() + ".eig.json";
  const json j = read_json(meta_path);
  const auto shape = required<std::vector<int>>(j, "shape", meta_path.string());
  if (shape.size() != 3 || shape[0] <= 0 || shape[1] <= 0 || shape[2] <= 0) {
    throw InputError(meta_path.string() + ": shape must be three positive integers");
  }
  EigenFieldFile out;
  out.meta.image_id = j.value("image_id", std::string());
  out.meta.graph = j.value("graph", std::string("qk"));
  out.meta.iterations = j.value("iterations", 0);
  out.meta.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("eigenvalues")) out.meta.eigenvalues = j.at("eigenvalues").get<std::vector<double>>();

  const fs::path values_path = meta_path.parent_path() / j.value("values", stem.filename().string() + ".eig.f32");
  const Tensor3 t = read_tensor_file(values_path, {shape[0], shape[1], shape[2]});
  out.field = EigenField(Grid{shape[0], shape[1]}, t.as_matrix());
  if (!out.field.values.allFinite()) throw InputError(values_path.string() + ": non-finite values");
  if (out.meta.eigenvalues && out.meta.eigenvalues->size() != static_cast<std::size_t>(shape[2])) {
    throw InputError(meta_path.string() + ": eigenvalue count does not match channel count");
  }
  return out;
}

void save_segmentation(const SegmentationMap& seg, const fs::path& stem) {
  if (seg.k <= 0) throw InputError("segmentation K must be positive");
  if (seg.labels.size() != seg.grid.size()) throw InputError("segmentation label count does not match grid");
  for (int l : seg.labels) {
    if (l < 0 || l >= seg.k) throw InputError("segmentation label out of [0, K)");
  }
  if (seg.k > 65536) throw InputError("segmentation K exceeds 16-bit range");

  const fs::path png_path = stem.string() + ".png";
  if (seg.k > 256) {
    png::write_gray16(png_path, seg.grid, seg.labels);
  } else {
    png::write_indexed8(png_path, seg.grid, seg.labels);
  }
  ordered_json j;
  j["height"] = seg.grid.rows;
  j["width"] = seg.grid.cols;
  j["k"] = seg.k;
  j["seed"] = seg.seed;
  j["k_mode"] = seg.k_mode;
  j["source"] = seg.source;
  j["degenerate"] = seg.degenerate;
  j["encoding"] = seg.k > 256 ? "gray16" : "palette8";
  j["labels"] = png_path.filename().string();
  write_json(stem.string() + ".seg.json", j);
}

SegmentationMap load_segmentation(const fs::path& stem_or_png) {
  fs::path stem = strip_suffix(strip_suffix(stem_or_png, ".png"), ".seg.json");
  const json j = read_json(stem.string() + ".seg.json");
  const auto decoded = png::read_labels(stem.string() + ".png");
  SegmentationMap seg;
  seg.grid = decoded.grid;
  seg.labels = decoded.values;
  seg.k = required<int>(j, "k", "segmentation meta");
  seg.seed = j.value("seed", std::uint64_t{0});
  seg.k_mode = j.value("k_mode", std::string("fixed"));
  seg.source = j.value("source", std::string());
  seg.degenerate = j.value("degenerate", false);
  if (seg.grid.rows != j.value("height", seg.grid.rows) || seg.grid.cols != j.value("width", seg.grid.cols)) {
    throw InputError(stem.string() + ": PNG size disagrees with sidecar");
  }
  for (int l : seg.labels) {
    if (l >= seg.k) throw InputError(stem.string() + ": label exceeds K");
  }
  return seg;
}

LabelGrid load_label_grid(const fs::path& path) {
  LabelGrid out;
  if (path.extension() == ".png") {
    auto decoded = png::read_labels(path);
    out.grid = decoded.grid;
    out.labels = std::move(decoded.values);
    return out;
  }
  const fs::path stem = strip_suffix(strip_suffix(path, ".u16"), ".json");
  const json j = read_json(stem.string() + ".json");
  out.grid = {required<int>(j, "height", "label meta"), required<int>(j, "width", "label meta")};
  if (!out.grid.valid()) throw InputError(stem.string() + ": invalid label grid size");
  std::ifstream in(stem.string() + ".u16", std::ios::binary);
  if (!in) throw InputError("cannot open " + stem.string() + ".u16");
  std::vector<std::uint16_t> raw(out.grid.size());
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 2));
  if (in.gcount() != static_cast<std::streamsize>(raw.size() * 2)) {
    throw InputError(stem.string() + ".u16: size does not match height*width");
  }
  out.labels.assign(raw.begin(), raw.end());
  return out;
}

void save_label_grid_u16(const LabelGrid& grid, const fs::path& stem) {
  std::vector<std::uint16_t> raw(grid.labels.begin(), grid.labels.end());
  std::ofstream out(stem.string() + ".u16", std::ios::binary);
  if (!out) throw InputError("cannot write " + stem.string() + ".u16");
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 2));
  ordered_json j;
  j["height"] = grid.grid.rows;
  j["width"] = grid.grid.cols;
  write_json(stem.string() + ".json", j);
}

}  // namespace lsc
