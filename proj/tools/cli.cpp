#include "cli.hpp"

#include <lsc/eigen_optimizer.hpp>
#include <lsc/evaluator.hpp>
#include <lsc/exact_spectral.hpp>
#include <lsc/render.hpp>
#include <lsc/segmenter.hpp>
#include <lsc/tensor_store.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>

namespace lsc::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

using Report = ordered_json;

// Options are registered under their long names. The same names are the keys
// accepted by --config and written to the resolved config.json.
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {}

  template <typename T>
  CLI::Option* add(const std::string& name, T& var, const std::string& help) {
    dumpers_.emplace_back(name, [&var](ordered_json& j, const std::string& key) { j[key] = var; });
    return app_->add_option("--" + name, var, help)->capture_default_str();
  }

  [[nodiscard]] bool known(const std::string& name) const {
    return std::any_of(dumpers_.begin(), dumpers_.end(), [&](const auto& d) { return d.first == name; });
  }

  [[nodiscard]] bool given(const std::string& name) const { return app_->get_option("--" + name)->count() > 0; }

  void dump(ordered_json& j) const {
    for (const auto& [name, fn] : dumpers_) fn(j, name);
  }

 private:
  CLI::App* app_;
  std::vector<std::pair<std::string, std::function<void(ordered_json&, const std::string&)>>> dumpers_;
};

struct Command {
  std::string path;
  CLI::App* app = nullptr;
  std::unique_ptr<Options> opts;
  std::string config;
  std::string out = "out";
  std::function<Report(const fs::path& out_dir, std::ostream& log, std::ostream& warn)> run;
};

void need(const std::string& value, const std::string& flag) {
  if (value.empty()) throw InputError("missing required option --" + flag);
}

void need(const std::vector<std::string>& values, const std::string& flag) {
  if (values.empty()) throw InputError("missing required option --" + flag);
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

KMode parse_k(const std::string& k, int kmin, int kmax) {
  KMode mode;
  mode.kmin = kmin;
  mode.kmax = kmax;
  if (k == "auto") return mode;
  mode.automatic = false;
  try {
    std::size_t used = 0;
    mode.k = std::stoi(k, &used);
    if (used != k.size()) throw std::invalid_argument(k);
  } catch (const std::exception&) {
    throw InputError("--k must be 'auto' or a positive integer, got '" + k + "'");
  }
  if (mode.k < 1) throw InputError("--k must be >= 1");
  return mode;
}

std::array<int, 3> parse_triplet(const std::string& s) {
  std::array<int, 3> out{};
  std::stringstream ss(s);
  std::string part;
  int i = 0;
  while (std::getline(ss, part, ',')) {
    if (i == 3) throw InputError("--triplet needs exactly three channel indices");
    try {
      out[static_cast<std::size_t>(i++)] = std::stoi(part);
    } catch (const std::exception&) {
      throw InputError("--triplet entries must be integers, got '" + part + "'");
    }
  }
  if (i != 3) throw InputError("--triplet needs exactly three channel indices");
  return out;
}

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

ordered_json loss_json(const LossTerms& l) {
  return {{"total", l.total}, {"rayleigh_l1", l.rayleigh_l1}, {"ortho_penalty", l.ortho_penalty}};
}

std::vector<std::string> read_list(const std::string& list_path) {
  std::ifstream in(list_path);
  if (!in) throw InputError("cannot open manifest list " + list_path);
  const fs::path base = fs::path(list_path).parent_path();
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    line.erase(0, line.find_first_not_of(" \t\r"));
    line.erase(line.find_last_not_of(" \t\r") + 1);
    if (line.empty() || line[0] == '#') continue;
    const fs::path p(line);
    out.push_back((p.is_absolute() ? p : base / p).string());
  }
  return out;
}

// Raw field unless its file already carries eigenvalues.
std::vector<OrthoEigenField> load_ortho_fields(const std::vector<std::string>& paths, std::vector<std::string>& ids) {
  std::vector<EigenFieldFile> files;
  for (const auto& p : paths) files.push_back(load_eigenfield(p));
  const bool all_ortho = std::all_of(files.begin(), files.end(), [](const auto& f) { return f.meta.eigenvalues.has_value(); });
  std::vector<OrthoEigenField> out;
  for (const auto& f : files) ids.push_back(f.meta.image_id);
  if (all_ortho) {
    for (auto& f : files) {
      const auto& ev = *f.meta.eigenvalues;
      out.push_back({std::move(f.field), Eigen::Map<const Vector>(ev.data(), static_cast<Eigen::Index>(ev.size()))});
    }
    return out;
  }
  std::vector<EigenField> fields;
  for (auto& f : files) fields.push_back(std::move(f.field));
  return fields.size() == 1 ? std::vector<OrthoEigenField>{orthogonalize(fields.front())} : orthogonalize_jointly(fields);
}

void check_pairs(const std::vector<std::string>& pred, const std::vector<std::string>& gt) {
  need(pred, "pred");
  need(gt, "gt");
  if (pred.size() != gt.size()) {
    throw InputError("--pred and --gt must be given the same number of times (" + std::to_string(pred.size()) +
                     " vs " + std::to_string(gt.size()) + ")");
  }
}

void check_same_grid(Grid a, Grid b, const std::string& what) {
  if (!(a == b)) throw InputError(what + ": prediction grid " + to_string(a) + " differs from ground truth " + to_string(b));
}

// ---------------------------------------------------------------- commands

struct EigsImageArgs {
  std::string manifest;
  int channels = 10;
  int iters = 2000;
  double lr = 1e-3;
  std::string lr_schedule = "constant";
  std::string heads = "independent";
  std::size_t buffer_size = 5;
  double new_sample_prob = 0.25;
  int accumulation = 0;
  int max_res = 0;
  std::uint64_t seed = 0;
};

Report eigs_image(const EigsImageArgs& a, const fs::path& out, std::ostream& log) {
  need(a.manifest, "manifest");
  const FeatureBundle bundle = FeatureBundle::load(a.manifest);
  std::optional<Grid> cap;
  if (a.max_res > 0) cap = Grid{a.max_res, a.max_res};
  BundleGraphProvider provider(bundle, head_mode_from_string(a.heads), cap);

  PerImageConfig cfg;
  cfg.channels = a.channels;
  cfg.iterations = a.iters;
  cfg.lr = a.lr;
  cfg.schedule = lr_schedule_from_string(a.lr_schedule);
  cfg.seed = a.seed;
  cfg.buffer_size = a.buffer_size;
  cfg.new_sample_prob = a.new_sample_prob;
  cfg.accumulation = a.accumulation;
  const OptimizeResult r = optimize_per_image(provider, cfg);
  const OrthoEigenField o = orthogonalize(r.field);

  EigenFieldMeta meta{bundle.id(), "qk", a.iters, a.seed, std::nullopt};
  save_eigenfield({r.field, meta}, out / (bundle.id() + ".raw"));
  meta.eigenvalues = to_vec(o.eigenvalues);
  save_eigenfield({o.field, meta}, out / bundle.id());
  log << bundle.id() << ": final loss " << r.final_loss.total << " (rayleigh " << r.final_loss.rayleigh_l1 << ", ortho "
      << r.final_loss.ortho_penalty << ")\n";

  Report rep;
  rep["image_id"] = bundle.id();
  rep["grid"] = {r.field.grid.rows, r.field.grid.cols};
  rep["channels"] = a.channels;
  rep["iterations"] = a.iters;
  rep["graph_sets"] = provider.n_sets();
  rep["final_loss"] = loss_json(r.final_loss);
  rep["eigenvalues"] = to_vec(o.eigenvalues);
  return rep;
}

struct EigsDatasetArgs {
  std::vector<std::string> manifests;
  std::string manifest_list;
  std::string graph = "qk";
  int channels = 50;
  int batch = 160;
  int c_intra = 10;
  int c_inter = 10;
  double threshold = 0.0;
  int iters = 2100;
  double lr = 1e-2;
  std::string lr_schedule = "constant";
  int steps_per_batch = 1;
  int max_res = 32;
  std::uint64_t seed = 0;
};

Report eigs_dataset(const EigsDatasetArgs& a, const fs::path& out, std::ostream& log, std::ostream& warn) {
  std::vector<std::string> paths = a.manifests;
  if (!a.manifest_list.empty()) {
    const auto listed = read_list(a.manifest_list);
    paths.insert(paths.end(), listed.begin(), listed.end());
  }
  need(paths, "manifest");
  std::vector<FeatureBundle> bundles;
  for (const auto& p : paths) bundles.push_back(FeatureBundle::load(p));

  DatasetConfig cfg;
  cfg.channels = a.channels;
  cfg.source = graph_source_from_string(a.graph);
  cfg.batch = a.batch;
  cfg.graph.c_intra = a.c_intra;
  cfg.graph.c_inter = a.c_inter;
  cfg.graph.threshold = a.threshold;
  cfg.graph.max_resolution = {a.max_res, a.max_res};
  cfg.iterations = a.iters;
  cfg.lr = a.lr;
  cfg.schedule = lr_schedule_from_string(a.lr_schedule);
  cfg.steps_per_batch = a.steps_per_batch;
  cfg.seed = a.seed;
  const DatasetResult r = optimize_dataset(bundles, cfg);
  for (const auto& w : r.warnings) warn << "warning: " << w << '\n';

  std::vector<EigenField> fields;
  for (const auto& id : r.image_ids) fields.push_back(r.fields.at(id));
  const auto ortho = orthogonalize_jointly(fields);
  for (std::size_t i = 0; i < fields.size(); ++i) {
    EigenFieldMeta meta{r.image_ids[i], a.graph, a.iters, a.seed, std::nullopt};
    save_eigenfield({fields[i], meta}, out / (r.image_ids[i] + ".raw"));
    meta.eigenvalues = to_vec(ortho[i].eigenvalues);
    save_eigenfield({ortho[i].field, meta}, out / r.image_ids[i]);
  }
  const double final_loss = r.history.empty() ? 0.0 : r.history.back();
  log << r.image_ids.size() << " images, batch " << r.batch << ": final loss " << final_loss << '\n';

  Report rep;
  rep["images"] = r.image_ids;
  rep["graph"] = a.graph;
  rep["layers"] = r.layers;
  rep["batch"] = r.batch;
  rep["channels"] = a.channels;
  rep["iterations"] = a.iters;
  rep["final_loss"] = final_loss;
  rep["eigenvalues"] = to_vec(ortho.front().eigenvalues);
  rep["warnings"] = r.warnings;
  return rep;
}

struct ClusterArgs {
  std::vector<std::string> fields;
  std::string k = "auto";
  int kmin = 2;
  int kmax = 10;
  std::uint64_t seed = 0;
};

Report cluster(const ClusterArgs& a, const fs::path& out, std::ostream& log) {
  need(a.fields, "field");
  std::vector<std::string> ids;
  const auto fields = load_ortho_fields(a.fields, ids);
  const KMode mode = parse_k(a.k, a.kmin, a.kmax);
  std::vector<SegmentationMap> segs = fields.size() == 1 ? std::vector<SegmentationMap>{segment_field(fields.front(), mode, a.seed)}
                                                        : segment_fields_jointly(fields, mode, a.seed);
  Report rep;
  rep["k_mode"] = mode.automatic ? "auto" : "fixed";
  rep["images"] = ordered_json::array();
  for (std::size_t i = 0; i < segs.size(); ++i) {
    segs[i].source = ids[i];
    save_segmentation(segs[i], out / ids[i]);
    log << ids[i] << ": K = " << segs[i].k << (segs[i].degenerate ? " (degenerate)" : "") << '\n';
    rep["images"].push_back({{"id", ids[i]}, {"k", segs[i].k}, {"degenerate", segs[i].degenerate}});
  }
  return rep;
}

struct EvalPairArgs {
  std::vector<std::string> pred;
  std::vector<std::string> gt;
  int ignore = kIgnoreLabel;
};

Report eval_oracle(const EvalPairArgs& a, std::ostream& log) {
  check_pairs(a.pred, a.gt);
  Report rep;
  rep["metric"] = "oracle_miou";
  rep["per_image"] = ordered_json::array();
  double total = 0.0;
  for (std::size_t i = 0; i < a.pred.size(); ++i) {
    const SegmentationMap seg = load_segmentation(a.pred[i]);
    const LabelGrid gt = load_label_grid(a.gt[i]);
    check_same_grid(seg.grid, gt.grid, a.pred[i]);
    const double m = oracle_decode_miou(seg, gt, a.ignore);
    total += m;
    rep["per_image"].push_back({{"pred", fs::path(a.pred[i]).filename().string()}, {"miou", m}});
  }
  rep["miou"] = total / static_cast<double>(a.pred.size());
  log << "oracle mIoU " << rep["miou"].get<double>() << '\n';
  return rep;
}

struct SemsegArgs : EvalPairArgs {
  int k = 0;
  std::string match = "hungarian";
};

ConfusionMatrix dataset_confusion(const std::vector<SegmentationMap>& preds, const std::vector<LabelGrid>& gts,
                                  int k_pred, int ignore) {
  int k_gt = 1;
  for (const auto& g : gts) k_gt = std::max(k_gt, label_count(g.labels, ignore));
  ConfusionMatrix cm;
  cm.counts = decltype(cm.counts)::Zero(k_pred, k_gt);
  for (std::size_t i = 0; i < preds.size(); ++i) accumulate_confusion(cm, preds[i].labels, gts[i].labels, ignore);
  return cm;
}

Report eval_semseg(const SemsegArgs& a, std::ostream& log) {
  check_pairs(a.pred, a.gt);
  const MatchMode mode = match_mode_from_string(a.match);
  std::vector<SegmentationMap> preds;
  std::vector<LabelGrid> gts;
  int k_pred = a.k;
  for (std::size_t i = 0; i < a.pred.size(); ++i) {
    preds.push_back(load_segmentation(a.pred[i]));
    gts.push_back(load_label_grid(a.gt[i]));
    check_same_grid(preds.back().grid, gts.back().grid, a.pred[i]);
    if (a.k == 0) k_pred = std::max(k_pred, preds.back().k);
  }
  const ConfusionMatrix cm = dataset_confusion(preds, gts, k_pred, a.ignore);
  Report rep;
  rep["metric"] = "semseg_miou";
  rep["match"] = a.match;
  rep["k_pred"] = k_pred;
  rep["k_gt"] = cm.counts.cols();
  rep["pixels"] = cm.total();
  rep["miou"] = matched_miou(cm, mode);
  log << a.match << " mIoU " << rep["miou"].get<double>() << '\n';
  return rep;
}

struct CoordArgs {
  std::vector<std::string> fields;
  std::uint64_t seed = 0;
};

Report eval_coord(const CoordArgs& a, std::ostream& log) {
  need(a.fields, "field");
  const Grid tile{32, 32};
  std::vector<Matrix> blocks;
  Eigen::Index rows = 0, channels = -1;
  for (const auto& p : a.fields) {
    const EigenFieldFile f = load_eigenfield(p);
    if (channels >= 0 && f.field.values.cols() != channels) throw InputError(p + ": channel count differs from the first field");
    channels = f.field.values.cols();
    blocks.push_back(f.field.grid == tile ? f.field.values : resample_bilinear(f.field, tile));
    rows += blocks.back().rows();
  }
  Matrix x(rows, channels);
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    x.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  const RegressionResult r = coord_regression(x, a.seed, tile);
  log << "coordinate regression MSE " << r.mse << (r.ridge_fallback ? " (ridge fallback)" : "") << '\n';
  Report rep;
  rep["metric"] = "coord_mse";
  rep["mse"] = r.mse;
  rep["mse_rows"] = r.mse_rows;
  rep["mse_cols"] = r.mse_cols;
  rep["ridge_fallback"] = r.ridge_fallback;
  rep["n_train"] = r.n_train;
  rep["n_test"] = r.n_test;
  return rep;
}

struct SpatialArgs : EvalPairArgs {
  std::size_t min_px = 50;
  double center_band = 0.2;
  std::string match = "hungarian";
};

Report eval_spatial(const SpatialArgs& a, std::ostream& log, std::ostream& warn) {
  check_pairs(a.pred, a.gt);
  const MatchMode mode = match_mode_from_string(a.match);
  std::vector<SegmentationMap> preds;
  std::vector<LabelGrid> spatial;
  int k_pred = 1;
  for (std::size_t i = 0; i < a.pred.size(); ++i) {
    preds.push_back(load_segmentation(a.pred[i]));
    const LabelGrid gt = load_label_grid(a.gt[i]);
    check_same_grid(preds.back().grid, gt.grid, a.pred[i]);
    k_pred = std::max(k_pred, preds.back().k);
    const SpatialLabelMap s = gen_spatial_labels(gt, a.min_px, a.center_band, a.ignore);
    spatial.push_back({s.grid, s.labels});
  }
  const ConfusionMatrix cm = dataset_confusion(preds, spatial, k_pred, kSpatialIgnore);
  if (cm.total() == 0) warn << "warning: every ground-truth component was too small or inside the center band\n";
  Report rep;
  rep["metric"] = "spatial_miou";
  rep["match"] = a.match;
  rep["min_px"] = a.min_px;
  rep["center_band"] = a.center_band;
  rep["k_pred"] = k_pred;
  rep["k_gt"] = cm.counts.cols();
  rep["pixels"] = cm.total();
  rep["miou"] = cm.total() > 0 ? matched_miou(cm, mode) : 0.0;
  log << "spatial " << a.match << " mIoU " << rep["miou"].get<double>() << '\n';
  return rep;
}

struct RecallArgs {
  std::string field;
  std::string gt;
  double iou = 0.5;
  std::size_t min_px = 1;
  double max_frac = 0.9;
  double dedup = 0.9;
  int kmin = 2;
  int kmax = 10;
  int ignore = kIgnoreLabel;
  std::uint64_t seed = 0;
};

Report eval_recall(const RecallArgs& a, std::ostream& log) {
  need(a.field, "field");
  need(a.gt, "gt");
  EigenField field = load_eigenfield(a.field).field;
  const LabelGrid gt = load_label_grid(a.gt);
  if (!(field.grid == gt.grid)) field = EigenField(gt.grid, resample_bilinear(field, gt.grid));

  const auto props = filter_proposals(propose_instances(field, a.seed, {a.kmin, a.kmax}), {a.min_px, a.max_frac, a.dedup});
  std::vector<std::vector<std::uint8_t>> masks;
  for (const auto& p : props) masks.push_back(p.mask);
  std::set<int> ids;
  for (int v : gt.labels) {
    if (v != 0 && v != a.ignore) ids.insert(v);
  }
  std::vector<std::vector<std::uint8_t>> instances;
  for (int id : ids) {
    std::vector<std::uint8_t> m(gt.labels.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = gt.labels[i] == id;
    instances.push_back(std::move(m));
  }
  const double recall = proposal_recall(masks, instances, a.iou);
  log << "recall@" << a.iou << " " << recall << " (" << masks.size() << " proposals, " << instances.size() << " instances)\n";
  Report rep;
  rep["metric"] = "proposal_recall";
  rep["iou_threshold"] = a.iou;
  rep["proposals"] = masks.size();
  rep["instances"] = instances.size();
  rep["recall"] = recall;
  return rep;
}

struct NcutArgs {
  std::string manifest;
  int m = 15;
  std::string source = "features";
  int layer = -1;
  int max_res = 32;
  std::string k = "auto";
  int kmin = 2;
  int kmax = 10;
  std::uint64_t seed = 0;
};

Report ncut(const NcutArgs& a, const fs::path& out, std::ostream& log, std::ostream& warn) {
  need(a.manifest, "manifest");
  if (a.source != "features" && a.source != "attention") {
    throw InputError("--source must be features or attention, got '" + a.source + "'");
  }
  const FeatureBundle bundle = FeatureBundle::load(a.manifest);
  int layer = a.layer;
  if (layer < 0) {
    Grid best{0, 0};
    for (int l : bundle.layers()) {
      const Grid g = bundle.layer_grid(l);
      if (g.rows > a.max_res || g.cols > a.max_res) continue;
      if (g.size() > best.size()) {
        best = g;
        layer = l;
      }
    }
    if (layer < 0) throw InputError("no layer within --max-res " + std::to_string(a.max_res));
  }
  const Grid grid = bundle.layer_grid(layer);

  Matrix affinity;
  if (a.source == "features") {
    Matrix tokens = bundle.layer_tokens(layer, TensorKind::value);
    tokens.rowwise().normalize();
    affinity = (tokens * tokens.transpose()).cwiseMax(0.0);
  } else {
    affinity = Matrix::Zero(static_cast<Eigen::Index>(grid.size()), static_cast<Eigen::Index>(grid.size()));
    int count = 0;
    for (const auto& t : assemble_per_image_set(bundle, HeadMode::independent)) {
      if (t.layer != layer) continue;
      affinity += t.graph.to_dense();
      ++count;
    }
    affinity /= count;
  }
  const SpectralResult sr = solve_ncut(AffinityGraph(affinity, grid), a.m);
  if (sr.symmetrized) warn << "warning: asymmetric affinity symmetrized as (A + A^T) / 2\n";

  OrthoEigenField field{EigenField(grid, eigenvector_matrix(sr.pairs)), Vector(a.m)};
  for (int i = 0; i < a.m; ++i) field.eigenvalues[i] = sr.pairs[static_cast<std::size_t>(i)].eigenvalue;
  save_eigenfield({field.field, {bundle.id(), a.source == "features" ? "vv" : "attention", 0, a.seed, to_vec(field.eigenvalues)}},
                  out / (bundle.id() + ".ncut"));
  SegmentationMap seg = segment_field(field, parse_k(a.k, a.kmin, a.kmax), a.seed);
  seg.source = bundle.id();
  save_segmentation(seg, out / bundle.id());
  log << bundle.id() << ": " << a.m << " eigenvectors at layer " << layer << ", K = " << seg.k << '\n';

  Report rep;
  rep["image_id"] = bundle.id();
  rep["source"] = a.source;
  rep["layer"] = layer;
  rep["grid"] = {grid.rows, grid.cols};
  rep["m"] = a.m;
  rep["symmetrized"] = sr.symmetrized;
  rep["eigenvalues"] = to_vec(field.eigenvalues);
  rep["k"] = seg.k;
  return rep;
}

struct RenderArgs {
  std::string field;
  std::string triplet = "0,1,2";
};

Report render(const RenderArgs& a, const fs::path& out, std::ostream& log) {
  need(a.field, "field");
  const auto channels = parse_triplet(a.triplet);
  const EigenFieldFile f = load_eigenfield(a.field);
  const std::string name = f.meta.image_id + ".rgb.png";
  write_triplet_png(f.field, channels, out / name);
  log << "wrote " << (out / name).string() << '\n';
  Report rep;
  rep["image_id"] = f.meta.image_id;
  rep["triplet"] = channels;
  rep["file"] = name;
  return rep;
}

// ---------------------------------------------------------------- wiring

class Cli {
 public:
  Cli() : app_("Layer-distributed spectral clustering on attention graphs", "lsc") {
    app_.require_subcommand(1);
    app_.set_help_all_flag("--help-all", "Help for every command");

    {
      auto& c = add("eigs-image", &app_, "Optimize a per-image eigenvector field over attention graphs");
      auto& o = *c.opts;
      o.add("manifest", image_.manifest, "Feature manifest (manifest.json)");
      o.add("channels", image_.channels, "Number of eigenvector channels C");
      o.add("iters", image_.iters, "Optimizer steps");
      o.add("lr", image_.lr, "Adam learning rate");
      o.add("lr-schedule", image_.lr_schedule, "constant | cosine");
      o.add("heads", image_.heads, "independent | concat");
      o.add("buffer-size", image_.buffer_size, "Graph-set buffer capacity");
      o.add("new-sample-prob", image_.new_sample_prob, "Chance a step fetches a fresh graph set");
      o.add("accumulation", image_.accumulation, "Gradient accumulation window (0: 20 when sampled, 1 otherwise)");
      o.add("max-res", image_.max_res, "Skip layers with grids larger than NxN (0: keep all)");
      o.add("seed", image_.seed, "Random seed");
      c.run = [this](const fs::path& out, std::ostream& log, std::ostream&) { return eigs_image(image_, out, log); };
    }
    {
      auto& c = add("eigs-dataset", &app_, "Optimize eigenvector fields jointly over a dataset with cross-image graphs");
      auto& o = *c.opts;
      o.add("manifest", dataset_.manifests, "Feature manifests (repeatable)");
      o.add("manifest-list", dataset_.manifest_list, "Text file with one manifest path per line");
      o.add("graph", dataset_.graph, "qk | vv");
      o.add("channels", dataset_.channels, "Number of eigenvector channels C");
      o.add("batch", dataset_.batch, "Images per mini-batch");
      o.add("c-intra", dataset_.c_intra, "Kept same-image neighbors per node");
      o.add("c-inter", dataset_.c_inter, "Kept other-image neighbors per node");
      o.add("threshold", dataset_.threshold, "Drop affinities below this value");
      o.add("iters", dataset_.iters, "Mini-batch draws");
      o.add("lr", dataset_.lr, "Adam learning rate");
      o.add("lr-schedule", dataset_.lr_schedule, "constant | cosine");
      o.add("steps-per-batch", dataset_.steps_per_batch, "Adam steps per mini-batch");
      o.add("max-res", dataset_.max_res, "Use layers at most NxN");
      o.add("seed", dataset_.seed, "Random seed");
      c.run = [this](const fs::path& out, std::ostream& log, std::ostream& warn) {
        return eigs_dataset(dataset_, out, log, warn);
      };
    }
    {
      auto& c = add("cluster", &app_, "K-Means segmentation of eigenvector fields");
      auto& o = *c.opts;
      o.add("field", cluster_.fields, "Eigenfield (repeatable; several are clustered jointly)");
      o.add("k", cluster_.k, "auto | K");
      o.add("kmin", cluster_.kmin, "Smallest K in the auto sweep");
      o.add("kmax", cluster_.kmax, "Largest K in the auto sweep");
      o.add("seed", cluster_.seed, "Random seed");
      c.run = [this](const fs::path& out, std::ostream& log, std::ostream&) { return cluster(cluster_, out, log); };
    }

    CLI::App* eval = app_.add_subcommand("eval", "Evaluation protocols");
    eval->require_subcommand(1);
    {
      auto& c = add("oracle", eval, "Per-region majority-label decoding mIoU");
      add_pair_options(*c.opts, oracle_);
      c.run = [this](const fs::path&, std::ostream& log, std::ostream&) { return eval_oracle(oracle_, log); };
    }
    {
      auto& c = add("semseg", eval, "Dataset mIoU after greedy or Hungarian cluster matching");
      add_pair_options(*c.opts, semseg_);
      c.opts->add("k", semseg_.k, "Number of predicted clusters (0: largest K among predictions)");
      c.opts->add("match", semseg_.match, "greedy | hungarian");
      c.run = [this](const fs::path&, std::ostream& log, std::ostream&) { return eval_semseg(semseg_, log); };
    }
    {
      auto& c = add("coord", eval, "Regress 32x32 grid coordinates from field channels");
      c.opts->add("field", coord_.fields, "Eigenfield (repeatable)");
      c.opts->add("seed", coord_.seed, "Train/test split seed");
      c.run = [this](const fs::path&, std::ostream& log, std::ostream&) { return eval_coord(coord_, log); };
    }
    {
      auto& c = add("spatial", eval, "mIoU against left/right spatial labels derived from semantic ground truth");
      add_pair_options(*c.opts, spatial_);
      c.opts->add("min-px", spatial_.min_px, "Ignore components smaller than this");
      c.opts->add("center-band", spatial_.center_band, "Ignored central band as a fraction of the width");
      c.opts->add("match", spatial_.match, "greedy | hungarian");
      c.run = [this](const fs::path&, std::ostream& log, std::ostream& warn) { return eval_spatial(spatial_, log, warn); };
    }
    {
      auto& c = add("recall", eval, "Instance proposal recall at an IoU threshold");
      auto& o = *c.opts;
      o.add("field", recall_.field, "Eigenfield");
      o.add("gt", recall_.gt, "Instance label grid (0 is background)");
      o.add("iou", recall_.iou, "IoU needed for a match");
      o.add("min-px", recall_.min_px, "Smallest proposal kept");
      o.add("max-frac", recall_.max_frac, "Largest proposal kept, as a fraction of the image");
      o.add("dedup", recall_.dedup, "IoU above which proposals count as duplicates");
      o.add("kmin", recall_.kmin, "Smallest K for region proposals");
      o.add("kmax", recall_.kmax, "Largest K for region proposals");
      o.add("ignore", recall_.ignore, "Ground-truth label to skip");
      o.add("seed", recall_.seed, "Random seed");
      c.run = [this](const fs::path&, std::ostream& log, std::ostream&) { return eval_recall(recall_, log); };
    }
    {
      auto& c = add("ncut", &app_, "Exact normalized-cut baseline followed by K-Means");
      auto& o = *c.opts;
      o.add("manifest", ncut_.manifest, "Feature manifest");
      o.add("m", ncut_.m, "Number of eigenvectors");
      o.add("source", ncut_.source, "features | attention");
      o.add("layer", ncut_.layer, "Layer to use (-1: finest within --max-res)");
      o.add("max-res", ncut_.max_res, "Largest layer grid considered when picking a layer");
      o.add("k", ncut_.k, "auto | K");
      o.add("kmin", ncut_.kmin, "Smallest K in the auto sweep");
      o.add("kmax", ncut_.kmax, "Largest K in the auto sweep");
      o.add("seed", ncut_.seed, "Random seed");
      c.run = [this](const fs::path& out, std::ostream& log, std::ostream& warn) { return ncut(ncut_, out, log, warn); };
    }
    {
      auto& c = add("render", &app_, "Render three field channels as an RGB PNG");
      c.opts->add("field", render_.field, "Eigenfield");
      c.opts->add("triplet", render_.triplet, "Channels i,j,k");
      c.run = [this](const fs::path& out, std::ostream& log, std::ostream&) { return render(render_, out, log); };
    }
  }

  CLI::App& app() { return app_; }

  Command* active() {
    for (auto& c : commands_) {
      if (c->app->parsed()) return c.get();
    }
    return nullptr;
  }

 private:
  Command& add(const std::string& name, CLI::App* parent, const std::string& help) {
    auto c = std::make_unique<Command>();
    c->path = parent == &app_ ? name : parent->get_name() + " " + name;
    c->app = parent->add_subcommand(name, help);
    c->opts = std::make_unique<Options>(c->app);
    c->app->add_option("--config", c->config, "JSON file of option values (keys are long option names)");
    c->opts->add("out", c->out, "Output directory");
    commands_.push_back(std::move(c));
    return *commands_.back();
  }

  static void add_pair_options(Options& o, EvalPairArgs& a) {
    o.add("pred", a.pred, "Predicted segmentation (repeatable)");
    o.add("gt", a.gt, "Ground-truth label grid (repeatable, paired with --pred)");
    o.add("ignore", a.ignore, "Ground-truth label to skip");
  }

  CLI::App app_;
  std::vector<std::unique_ptr<Command>> commands_;
  EigsImageArgs image_;
  EigsDatasetArgs dataset_;
  ClusterArgs cluster_;
  EvalPairArgs oracle_;
  SemsegArgs semseg_;
  CoordArgs coord_;
  SpatialArgs spatial_;
  RecallArgs recall_;
  NcutArgs ncut_;
  RenderArgs render_;
};

void parse(Cli& cli, std::vector<std::string> args) {
  std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
  cli.app().parse(args);
}

// Config values become trailing command-line tokens for options not given explicitly.
std::vector<std::string> config_tokens(const Command& cmd) {
  std::ifstream in(cmd.config);
  if (!in) throw InputError("cannot open config " + cmd.config);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(cmd.config + ": " + e.what());
  }
  if (!j.is_object()) throw InputError(cmd.config + ": config must be a JSON object");
  std::vector<std::string> tokens;
  auto scalar = [&](const std::string& key, const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return std::string(v.get<bool>() ? "true" : "false");
    if (v.is_number()) return v.dump();
    throw InputError(cmd.config + ": value of '" + key + "' must be a string, number, boolean or list of those");
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "command") {
      if (value != cmd.path) throw InputError(cmd.config + ": written for '" + value.dump() + "', not '" + cmd.path + "'");
      continue;
    }
    if (!cmd.opts->known(key)) throw InputError(cmd.config + ": unknown key '" + key + "' for " + cmd.path);
    if (cmd.opts->given(key)) continue;
    if (value.is_array()) {
      if (value.empty()) continue;
      tokens.push_back("--" + key);
      for (const auto& v : value) tokens.push_back(scalar(key, v));
    } else {
      tokens.push_back("--" + key);
      tokens.push_back(scalar(key, value));
    }
  }
  return tokens;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    std::vector<std::string> full = args;
    {
      Cli first;
      try {
        parse(first, args);
      } catch (const CLI::ParseError& e) {
        const int code = first.app().exit(e, out, err);
        return code == 0 ? 0 : 2;
      }
      const Command* cmd = first.active();
      if (cmd != nullptr && !cmd->config.empty()) {
        const auto extra = config_tokens(*cmd);
        full.insert(full.end(), extra.begin(), extra.end());
      }
    }

    Cli cli;
    try {
      parse(cli, full);
    } catch (const CLI::ParseError& e) {
      err << "config: ";
      cli.app().exit(e, out, err);
      return 2;
    }
    Command* cmd = cli.active();
    if (cmd == nullptr) return 2;

    const fs::path out_dir(cmd->out);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw InputError("cannot create output directory " + out_dir.string() + ": " + ec.message());
    ordered_json resolved;
    resolved["command"] = cmd->path;
    cmd->opts->dump(resolved);
    write_json(out_dir / "config.json", resolved);

    Report report;
    report["command"] = cmd->path;
    report.update(cmd->run(out_dir, out, err));
    write_json(out_dir / "report.json", report);
    return 0;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const ComputeError& e) {
    err << "computation failed: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "computation failed: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace lsc::cli
