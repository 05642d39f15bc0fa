// occloc: batch entry points for phantom generation, dataset building, training, inference,
// evaluation and the template-matching baseline.

#include <occloc/baseline.hpp>
#include <occloc/io.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <iostream>

namespace {

using namespace occloc;
using Clock = std::chrono::steady_clock;
const Clock::time_point kProcessStart = Clock::now();
using json = nlohmann::json;

constexpr const char* kVersion = "0.1.0";

struct Common {
  std::uint64_t seed = 1;
  std::string config;
  std::string out;
};

json load_config(const Common& c) { return c.config.empty() ? json::object() : read_json(c.config); }

/// Applies `value` over `cfg[key]` only when the flag was given on the command line.
template <typename T>
void override(json& cfg, const std::string& key, const CLI::Option* opt, const T& value) {
  if (opt->count() > 0) cfg[key] = value;
}

class Manifest {
 public:
  Manifest(std::string command, const Common& c) {
    j_ = {{"command", std::move(command)}, {"tool_version", kVersion}, {"seed", c.seed}, {"out", c.out}};
  }
  json& operator[](const std::string& k) { return j_[k]; }
  void write(const fs::path& dir) {
    j_["wall_seconds"] = std::chrono::duration<double>(Clock::now() - kProcessStart).count();
    write_json(dir / "manifest.json", j_);
  }

 private:
  json j_;
};

std::string numbered(const std::string& prefix, std::size_t i) {
  std::array<char, 16> buf;
  std::snprintf(buf.data(), buf.size(), "%04zu", i);
  return prefix + buf.data();
}

/// Sorted stems of files with `ext` in `dir`, excluding the manifest.
std::vector<std::string> stems(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) fail_data("missing directory " + dir.string());
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext && e.path().filename() != "manifest.json") out.push_back(e.path().stem().string());
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------- gen

struct GenArgs {
  int train = 16, eval = 4;
  CLI::Option *train_opt = nullptr, *eval_opt = nullptr;
};

/// Train phantoms plus templates (their frontal renders); eval phantoms plus their frontal
/// clouds and reference boxes.
int cmd_gen(const Common& c, const GenArgs& a) {
  json cfg = load_config(c);
  override(cfg, "train", a.train_opt, a.train);
  override(cfg, "eval", a.eval_opt, a.eval);
  const int n_train = cfg.value("train", 16), n_eval = cfg.value("eval", 4);
  if (n_train < 0 || n_eval < 0 || n_train + n_eval == 0) fail_usage("need at least one phantom");
  PhantomSpec spec = cfg.contains("phantom") ? cfg.at("phantom").get<PhantomSpec>() : PhantomSpec{};
  const EvalConditioning conditioning{cfg.value("max_range", 2.5), std::nullopt, cfg.value("eval_points", std::size_t{1000}), c.seed};

  const fs::path out(c.out);
  Manifest m("gen", c);
  json seeds = json::array();
  for (int i = 0; i < n_train + n_eval; ++i) {
    const bool train = i < n_train;
    const std::size_t idx = static_cast<std::size_t>(train ? i : i - n_train);
    spec.seed = derive_seed(c.seed, train ? 0 : 1, idx);
    const VoxelLabelVolume v = generate_phantom(spec);
    const std::string id = numbered(train ? "train_" : "eval_", idx);
    save_volume(out / (train ? "train" : "eval") / (id + ".olv"), v);
    const EvalRender r = render_evaluation(v, conditioning);
    const fs::path side = out / (train ? "templates" : "eval");
    save_cloud(side / (id + ".xyz"), r.cloud.points);
    save_boxes(side / (id + ".json"), r.reference, v.class_names);
    seeds.push_back({{"id", id}, {"seed", spec.seed}});
  }
  spec.seed = c.seed;
  m["config"] = {{"train", n_train}, {"eval", n_eval}, {"phantom", spec}, {"eval_points", conditioning.target_points}};
  m["phantoms"] = seeds;
  m.write(out);
  return 0;
}

// ---------------------------------------------------------------------- dataset

struct DatasetArgs {
  std::string volumes;
  int augmentations = 8, samples = 32;
  CLI::Option *aug_opt = nullptr, *samples_opt = nullptr;
};

int cmd_dataset(const Common& c, const DatasetArgs& a) {
  json cfg = load_config(c);
  override(cfg, "augmentations", a.aug_opt, a.augmentations);
  override(cfg, "samples_per_side", a.samples_opt, a.samples);
  const DatasetOptions opt = cfg.get<DatasetOptions>();

  fs::path vol_dir(a.volumes);
  if (fs::is_directory(vol_dir / "train")) vol_dir /= "train";
  const auto ids = stems(vol_dir, ".olv");
  if (ids.empty()) fail_data("no .olv volumes in " + vol_dir.string());
  std::vector<VoxelLabelVolume> volumes;
  for (const auto& id : ids) volumes.push_back(load_volume(vol_dir / (id + ".olv")));

  const DatasetResult ds = build_dataset(volumes, c.seed, opt);
  const fs::path out(c.out);
  json pairs = json::array();
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const std::string stem = numbered("pair_", i);
    save_pair(out, stem, ds.pairs[i]);
    pairs.push_back({{"pair", stem}, {"volume", ids[ds.source[i]]}, {"seed", ds.pairs[i].seed}});
  }
  for (const auto& [reason, n] : ds.discarded) std::cerr << "discarded " << n << " pair(s): " << reason << "\n";
  Manifest m("dataset", c);
  m["config"] = opt;
  m["volumes"] = vol_dir.string();
  m["pairs"] = pairs;
  m["discarded"] = ds.discarded;
  m.write(out);
  std::cerr << ds.pairs.size() << " pairs written\n";
  return 0;
}

std::vector<TrainingPair> load_pairs(const fs::path& dir) {
  std::vector<TrainingPair> pairs;
  for (const auto& stem : stems(dir, ".oss")) pairs.push_back(load_pair(dir, stem));
  if (pairs.empty()) fail_data("empty training dataset in " + dir.string());
  return pairs;
}

// ---------------------------------------------------------------------- train

struct TrainArgs {
  std::string data, resume;
  int epochs = 30, batch = 16, chunks = 16;
  double lr = 5e-4;
  bool no_augment = false;
  CLI::Option *epochs_opt = nullptr, *batch_opt = nullptr, *chunks_opt = nullptr, *lr_opt = nullptr;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  json cfg = load_config(c);
  cfg["seed"] = c.seed;
  override(cfg, "epochs", a.epochs_opt, a.epochs);
  override(cfg, "batch_size", a.batch_opt, a.batch);
  override(cfg, "sample_chunks", a.chunks_opt, a.chunks);
  override(cfg, "lr", a.lr_opt, a.lr);
  if (a.no_augment) cfg["point_drop"] = false, cfg["rotation"] = false;
  const TrainConfig tc = cfg.get<TrainConfig>();
  const auto pairs = load_pairs(a.data);

  TrainState<float> state = start_training<float>(tc);
  if (!a.resume.empty()) {
    LoadedCheckpoint ck = load_checkpoint(a.resume);
    if (json(ck.config.shape) != json(tc.shape)) fail_data("resume checkpoint has a different network shape");
    state = std::move(ck.state);
  }
  const int label_max = [&] {
    int mx = 0;
    for (const auto& p : pairs) mx = std::max(mx, p.samples.num_classes);
    return mx;
  }();
  if (label_max > tc.shape.num_classes) fail_data("dataset has more classes than the network");

  train_loop(state, pairs, tc, [&](const TraceRow& r) {
    if (r.step % 16 == 0) std::cerr << "step " << r.step << " epoch " << r.epoch << " loss " << r.loss.total() << "\n";
  });
  const fs::path out(c.out);
  save_checkpoint(out / "checkpoint", state, tc);
  write_file(out / "loss_trace.csv", trace_csv(state.trace));
  const double acc = training_accuracy(state.model, pairs);
  Manifest m("train", c);
  m["config"] = tc;
  m["data"] = a.data;
  m["resumed_from"] = a.resume;
  m["steps"] = state.adam.step;
  m["training_accuracy"] = acc;
  m.write(out);
  std::cerr << "training accuracy " << acc << "\n";
  return 0;
}

// ---------------------------------------------------------------------- infer

struct InferArgs {
  std::string checkpoint;
  std::vector<std::string> clouds;
  int resolution = 64;
  std::size_t probes = 40000;
  double margin = 0.15;
  int classes = 0;
  bool meshes = false;
};

int cmd_infer(const Common& c, const InferArgs& a) {
  InferenceParams params;
  params.resolution = a.resolution;
  params.probes = a.probes;
  params.margin = a.margin;
  params.seed = c.seed;
  const AnyModel model = load_any_model(a.checkpoint);
  if (a.classes > 0 && model_classes(model) != a.classes)
    fail_data("checkpoint predicts " + std::to_string(model_classes(model)) + " classes, expected " + std::to_string(a.classes));
  std::vector<fs::path> inputs;
  for (const auto& s : a.clouds) {
    if (fs::is_directory(s)) {
      for (const auto& stem : stems(s, ".xyz")) inputs.push_back(fs::path(s) / (stem + ".xyz"));
    } else {
      inputs.emplace_back(s);
    }
  }
  if (inputs.empty()) fail_usage("no input clouds");

  const fs::path out(c.out);
  json cases = json::array();
  for (const fs::path& in : inputs) {
    const std::vector<Vec3> cloud = load_cloud(in);
    if (cloud.empty()) fail_data("empty cloud " + in.string());
    const AtlasPrediction pred = infer_any(model, cloud, params);
    const std::string id = in.stem().string();
    save_volume(out / "volumes" / (id + ".olv"), pred.volume);
    save_boxes(out / "boxes" / (id + ".json"), pred.boxes);
    if (a.meshes) {
      for (int cls = 1; cls <= static_cast<int>(pred.boxes.size()); ++cls)
        if (pred.present(cls))
          write_file(out / "meshes" / (id + "_" + std::to_string(cls) + ".obj"),
                     encode_obj(extract_mesh(pad_boundary(pred.volume), static_cast<Label>(cls))));
    }
    cases.push_back({{"id", id}, {"cloud", in.string()}, {"present", pred.present_count()}, {"dims", pred.volume.dims()}});
  }
  Manifest m("infer", c);
  m["config"] = {{"resolution", params.resolution}, {"probes", params.probes}, {"margin", params.margin}};
  m["checkpoint"] = a.checkpoint;
  m["cases"] = cases;
  m.write(out);
  return 0;
}

// ---------------------------------------------------------------------- eval

/// Records for every case present in both directories; `names` receives the reference labels.
std::vector<MetricRecord> evaluate_dirs(const fs::path& pred_dir, const fs::path& ref_dir, std::vector<std::string>& names) {
  const auto pred_ids = stems(pred_dir, ".json"), ref_ids = stems(ref_dir, ".json");
  if (pred_ids != ref_ids) fail_data("prediction and reference ids differ");
  if (pred_ids.empty()) fail_data("no cases to evaluate");
  std::vector<MetricRecord> records;
  for (const auto& id : pred_ids) {
    auto pred = load_boxes(pred_dir / (id + ".json"));
    const json ref_json = read_json(ref_dir / (id + ".json"));
    auto ref = boxes_from_json(ref_json);
    if (names.empty()) names = box_names_from_json(ref_json);
    const std::size_t n = std::max(pred.size(), ref.size());
    pred.resize(n);
    ref.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!ref[i] && !pred[i]) continue;
      records.push_back(evaluate_boxes(id, static_cast<int>(i) + 1, pred[i], ref[i]));
    }
  }
  return records;
}

void write_metrics(const fs::path& out, const std::vector<MetricRecord>& records, const std::vector<std::string>& names) {
  json summary;
  for (Metric mt : {Metric::cd, Metric::iou, Metric::esf}) {
    const MetricTable t = aggregate(records, mt);
    std::string name = metric_name(mt);
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char ch) { return std::tolower(ch); });
    write_file(out / (name + ".csv"), metric_csv(t, names));
    summary[metric_name(mt)] = {{"mean", t.overall.mean}, {"std", t.overall.std}, {"count", t.overall.count}, {"missing", t.overall.missing}};
  }
  std::string rows = "case,structure,cd_cm,iou,esf\n";
  auto opt = [](const std::optional<double>& x) { return x ? detail::fmt(*x) : std::string(); };
  for (const auto& r : records)
    rows += r.case_id + ',' + std::to_string(r.structure) + ',' + opt(r.cd_cm) + ',' + opt(r.iou) + ',' + opt(r.esf) + '\n';
  write_file(out / "records.csv", rows);
  write_file(out / "summary.json", summary.dump(2) + "\n");
}

int cmd_eval(const Common& c, const std::string& predictions, const std::string& references) {
  fs::path pred_dir(predictions);
  if (fs::is_directory(pred_dir / "boxes")) pred_dir /= "boxes";
  std::vector<std::string> names;
  const auto records = evaluate_dirs(pred_dir, references, names);
  const fs::path out(c.out);
  write_metrics(out, records, names);
  Manifest m("eval", c);
  m["predictions"] = pred_dir.string();
  m["references"] = references;
  m["records"] = records.size();
  m.write(out);
  return 0;
}

// ---------------------------------------------------------------------- baseline

int cmd_baseline(const Common& c, const std::string& templates_dir, const std::string& patients, const std::string& references) {
  std::vector<Template> lib;
  std::vector<std::string> names;
  for (const auto& id : stems(templates_dir, ".xyz")) {
    Template t;
    t.id = id;
    t.cloud = load_cloud(fs::path(templates_dir) / (id + ".xyz"));
    const json boxes = read_json(fs::path(templates_dir) / (id + ".json"));
    t.boxes = boxes_from_json(boxes);
    if (names.empty()) names = box_names_from_json(boxes);
    lib.push_back(std::move(t));
  }
  if (lib.empty()) fail_data("empty template library");
  const fs::path out(c.out);
  json cases = json::array();
  for (const auto& id : stems(patients, ".xyz")) {
    const MatchResult mr = match_and_transfer(load_cloud(fs::path(patients) / (id + ".xyz")), lib);
    save_boxes(out / "boxes" / (id + ".json"), mr.boxes, names);
    cases.push_back({{"id", id}, {"template", lib[mr.selected].id}, {"chamfer", mr.chamfer[mr.selected]}});
  }
  if (!references.empty()) {
    std::vector<std::string> ref_names;
    const auto records = evaluate_dirs(out / "boxes", references, ref_names);
    write_metrics(out, records, ref_names);
  }
  Manifest m("baseline", c);
  m["templates"] = templates_dir;
  m["patients"] = patients;
  m["references"] = references;
  m["cases"] = cases;
  m.write(out);
  return 0;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  sub->add_option("--config", c.config, "JSON config file (flags override it)")->check(CLI::ExistingFile);
  sub->add_option("--out", c.out, "Output directory")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Anatomical structure localization from body-surface point clouds"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Common common;

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate train/eval phantoms, templates and reference boxes");
  add_common(g, common);
  gen.train_opt = g->add_option("--train", gen.train, "Number of training phantoms");
  gen.eval_opt = g->add_option("--eval", gen.eval, "Number of evaluation phantoms");

  DatasetArgs ds;
  auto* d = app.add_subcommand("dataset", "Build (cloud, samples) training pairs from phantoms");
  add_common(d, common);
  d->add_option("--volumes", ds.volumes, "Directory of .olv volumes (or a gen output)")->required();
  ds.aug_opt = d->add_option("--augmentations", ds.augmentations, "Deformed renders per volume");
  ds.samples_opt = d->add_option("--samples", ds.samples, "Samples per side per structure");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the occupancy network");
  add_common(t, common);
  t->add_option("--data", tr.data, "Dataset directory")->required();
  tr.epochs_opt = t->add_option("--epochs", tr.epochs, "Total epochs");
  tr.batch_opt = t->add_option("--batch-size", tr.batch, "Clouds per step");
  tr.chunks_opt = t->add_option("--sample-chunks", tr.chunks, "Steps per group of clouds, each on a share of the samples");
  tr.lr_opt = t->add_option("--lr", tr.lr, "Adam learning rate");
  t->add_flag("--no-augment", tr.no_augment, "Disable rotation and point-drop augmentation");
  t->add_option("--resume", tr.resume, "Checkpoint directory to continue from");

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Predict the atlas for one or more clouds");
  add_common(i, common);
  i->add_option("--checkpoint", inf.checkpoint, "Checkpoint directory")->required();
  i->add_option("--cloud", inf.clouds, "Cloud file(s) or directory of .xyz files")->required();
  i->add_option("--resolution", inf.resolution, "Dense voxels along the longest axis")->capture_default_str();
  i->add_option("--probes", inf.probes, "Coarse probe count")->capture_default_str();
  i->add_option("--margin", inf.margin, "Dense-box enlargement fraction")->capture_default_str();
  i->add_option("--classes", inf.classes, "Expected class count (checked against the checkpoint)");
  i->add_flag("--meshes", inf.meshes, "Also write per-class OBJ meshes");

  std::string preds, refs, templates, patients, base_refs;
  auto* e = app.add_subcommand("eval", "Box metrics of predictions against references");
  add_common(e, common);
  e->add_option("--predictions", preds, "Directory of predicted boxes JSON")->required();
  e->add_option("--references", refs, "Directory of reference boxes JSON")->required();

  auto* b = app.add_subcommand("baseline", "Template-matching baseline");
  add_common(b, common);
  b->add_option("--templates", templates, "Template library directory")->required();
  b->add_option("--patients", patients, "Directory of patient .xyz clouds")->required();
  b->add_option("--references", base_refs, "Reference boxes for metrics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*g) return cmd_gen(common, gen);
    if (*d) return cmd_dataset(common, ds);
    if (*t) return cmd_train(common, tr);
    if (*i) {
      // Flags given explicitly override the config file.
      if (!common.config.empty()) {
        json cfg = read_json(common.config);
        if (i->get_option("--resolution")->count() == 0) inf.resolution = cfg.value("resolution", inf.resolution);
        if (i->get_option("--probes")->count() == 0) inf.probes = cfg.value("probes", inf.probes);
        if (i->get_option("--margin")->count() == 0) inf.margin = cfg.value("margin", inf.margin);
      }
      return cmd_infer(common, inf);
    }
    if (*e) return cmd_eval(common, preds, refs);
    if (*b) return cmd_baseline(common, templates, patients, base_refs);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return static_cast<int>(err.kind());
  } catch (const nlohmann::json::exception& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 1;
}
