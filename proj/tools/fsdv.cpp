// fsdv: data generation, two-phase training, evaluation, ablation and
// prediction for few-shot detection and viewpoint estimation.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "fsdv/error.hpp"
#include "fsdv/pipeline.hpp"

namespace {

using namespace fsdv;
using io::Json;
namespace fs = std::filesystem;

constexpr int kUsageError = 2;

struct UsageError : Error {
  using Error::Error;
};

fs::path output_root() {
  const char* env = std::getenv("FSDV_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_out(const std::string& out, const std::string& fallback) {
  return out.empty() ? output_root() / fallback : fs::path(out);
}

struct Common {
  std::string config;
  std::string out;
  int workers = 1;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "run configuration JSON (unknown keys rejected)")
      ->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "output directory (default: $FSDV_OUTPUT_ROOT/<command>)");
  app->add_option("--workers", c.workers, "worker threads; results do not depend on it")
      ->check(CLI::PositiveNumber);
  app->add_option("--seed", c.seed, "seed override");
}

cfg::RunConfig load_config(const Common& c) {
  return c.config.empty() ? cfg::RunConfig{} : cfg::load_run_config(c.config);
}

std::string argv_string(int argc, char** argv) {
  std::ostringstream os;
  for (int i = 0; i < argc; ++i) os << (i ? " " : "") << argv[i];
  return os.str();
}

void write_run_manifest(const fs::path& dir, const std::string& command, const std::string& argv,
                        const cfg::RunConfig& run, const Json& inputs, const Json& extra, int workers) {
  Json m{{"command", command},
         {"argv", argv},
         {"config", cfg::to_json(run)},
         {"inputs", inputs},
         {"workers", workers},
         {"code_version", ckpt::code_version()}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  io::write_text(dir / "run_manifest.json", m.dump(2) + "\n");
}

void write_report(const eval::EvalReport& rep, const fs::path& dir, const std::string& stem) {
  io::write_text(dir / (stem + ".json"), rep.to_json().dump(2) + "\n");
  io::write_text(dir / (stem + ".csv"), rep.to_csv());
  io::write_text(dir / (stem + ".md"), rep.to_markdown());
  std::cout << rep.to_markdown() << "\n";
}

Json record_json(const eval::DetectionRecord& d, const synth::Dataset* ds, bool with_viewpoint) {
  Json j{{"image", d.image_id}, {"class", d.cls}};
  if (ds) j["class_name"] = ds->class_info(d.cls).name;
  j["box"] = io::to_json(d.box);
  j["confidence"] = d.confidence;
  if (with_viewpoint) j["viewpoint"] = io::to_json(d.viewpoint);
  return j;
}

// --- gen-data ------------------------------------------------------------------

struct GenArgs {
  Common common;
  std::optional<int> base_scenes, test_scenes, pool_scenes;
};

int cmd_gen_data(const GenArgs& a, const std::string& argv) {
  cfg::RunConfig run = load_config(a.common);
  if (a.common.seed) run.dataset.seed = *a.common.seed;
  if (a.base_scenes) run.dataset.base_scenes = *a.base_scenes;
  if (a.test_scenes) run.dataset.test_scenes = *a.test_scenes;
  if (a.pool_scenes) run.dataset.pool_scenes = *a.pool_scenes;
  const fs::path out = resolve_out(a.common.out, "data");
  const synth::Dataset ds = synth::generate_dataset(run.dataset, a.common.workers);
  std::string hash;
  if (fs::exists(out / "manifest.json")) {
    io::read_dataset(out);  // verifies every file digest
    const fs::path tmp = out.string() + ".verify-tmp";
    fs::remove_all(tmp);
    hash = io::write_dataset(ds, tmp);
    fs::remove_all(tmp);
    const std::string existing = io::dataset_manifest_hash(out);
    if (existing != hash) {
      throw IoError("dataset at " + out.string() + " differs from this configuration (manifest " +
                    existing + ", regenerated " + hash + "); choose another --out");
    }
    std::cout << "dataset verified: " << out.string() << "\n";
  } else {
    hash = io::write_dataset(ds, out);
    std::cout << "dataset written: " << out.string() << "\n";
  }
  std::cout << "manifest hash " << hash << "\n";
  for (const auto& c : ds.classes) {
    const bool novel = std::count(ds.novel_classes.begin(), ds.novel_classes.end(), c.id) > 0;
    std::cout << "  " << c.id << "  " << c.name << (novel ? "  novel" : "  base")
              << (c.symmetric ? "  symmetric" : "") << "\n";
  }
  for (const auto& [name, scenes] : ds.splits) {
    std::size_t n = 0;
    for (const auto& s : scenes) n += s.objects.size();
    std::cout << "  split " << name << ": " << scenes.size() << " images, " << n << " objects\n";
  }
  write_run_manifest(out, "gen-data", argv, run, Json::object(),
                     {{"dataset_manifest_hash", hash}}, a.common.workers);
  return 0;
}

// --- train / finetune -------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string task = "detection";
  std::string data;
  std::string base;
  std::optional<std::string> agg;
  std::optional<int> epochs, shots, pool_size, max_steps;
  std::optional<double> lr;
  bool freeze_backbone = false;
};

void apply_overrides(train::TrainConfig& c, const TrainArgs& a) {
  if (a.common.seed) c.seed = *a.common.seed;
  if (a.agg) c.scheme = agg::parse_scheme(*a.agg);
  if (a.epochs) {
    c.epochs = *a.epochs;
    std::vector<int> drops;
    for (int e : c.lr_drop_epochs) {
      if (e < c.epochs) drops.push_back(e);
    }
    c.lr_drop_epochs = drops;
  }
  if (a.shots) c.shots = *a.shots;
  if (a.pool_size) c.pool_size = *a.pool_size;
  if (a.max_steps) c.max_steps = *a.max_steps;
  if (a.lr) c.lr = *a.lr;
  if (a.freeze_backbone) c.freeze_backbone = true;
}

void save_phase(const pipe::PhaseResult& r, const synth::Dataset& ds, const fs::path& out) {
  ckpt::save_checkpoint(r.checkpoint, out / "checkpoint");
  train::write_metrics_csv(r.log, (out / "metrics.csv").string());
  io::write_text(out / "audit.json", pipe::audit_json(r.log, r.episode, ds).dump(2) + "\n");
}

int cmd_train(const TrainArgs& a, const std::string& argv) {
  cfg::RunConfig run = load_config(a.common);
  const train::Task task = train::parse_task(a.task);
  train::TrainConfig& tc = run.phase_config(task, synth::Phase::kBase);
  apply_overrides(tc, a);
  const fs::path out = resolve_out(a.common.out, "train_" + a.task);
  const synth::Dataset ds = io::read_dataset(a.data);
  const std::string hash = io::dataset_manifest_hash(a.data);
  std::cout << "base training: task " << a.task << ", scheme " << agg::to_string(tc.scheme)
            << ", " << tc.epochs << " epochs\n";
  const pipe::PhaseResult r = pipe::train_base(ds, hash, task, run, tc, &std::cout);
  save_phase(r, ds, out);
  write_run_manifest(out, "train", argv, run, {{"dataset", a.data}, {"dataset_manifest_hash", hash}},
                     {{"checkpoint", (out / "checkpoint").string()}}, a.common.workers);
  std::cout << "checkpoint: " << (out / "checkpoint").string() << "\n";
  return 0;
}

int cmd_finetune(const TrainArgs& a, const std::string& argv) {
  cfg::RunConfig run = load_config(a.common);
  const ckpt::Checkpoint base = ckpt::load_checkpoint(a.base);
  const train::Task task = base.task;
  const std::string base_scheme = base.architecture.at("scheme").get<std::string>();
  if (a.agg && agg::to_string(agg::parse_scheme(*a.agg)) != base_scheme) {
    throw ConfigError("--agg " + *a.agg + " differs from the base checkpoint's scheme " + base_scheme);
  }
  train::TrainConfig& tc = run.phase_config(task, synth::Phase::kFinetune);
  if (!a.shots) tc.shots = run.shots;
  apply_overrides(tc, a);
  const fs::path out = resolve_out(a.common.out, "finetune_" + train::to_string(task));
  const synth::Dataset ds = io::read_dataset(a.data);
  const std::string hash = io::dataset_manifest_hash(a.data);
  std::cout << "fine-tuning: task " << train::to_string(task) << ", " << tc.shots
            << " shots, support seed " << tc.seed << "\n";
  const pipe::PhaseResult r = pipe::finetune(ds, hash, base, tc, &std::cout);
  save_phase(r, ds, out);
  write_run_manifest(out, "finetune", argv, run,
                     {{"dataset", a.data},
                      {"dataset_manifest_hash", hash},
                      {"base_checkpoint", a.base},
                      {"base_params_sha256", r.checkpoint.extra.at("base_params_sha256")}},
                     {{"checkpoint", (out / "checkpoint").string()}}, a.common.workers);
  std::cout << "checkpoint: " << (out / "checkpoint").string() << "\n";
  return 0;
}

// --- eval ----------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string mode = "detection";
  std::string data;
  std::string ckpt, det, vp;
  std::string classes = "novel";
  std::string split = synth::kTestSplit;
  bool eleven_point = false;
};

int cmd_eval(const EvalArgs& a, const std::string& argv) {
  cfg::RunConfig run = load_config(a.common);
  if (a.eleven_point) run.eval.eleven_point = true;
  const fs::path out = resolve_out(a.common.out, "eval_" + a.mode);
  const synth::Dataset ds = io::read_dataset(a.data);
  const std::vector<int> classes = pipe::select_classes(ds, pipe::parse_class_set(a.classes));
  Json inputs{{"dataset", a.data}, {"dataset_manifest_hash", io::dataset_manifest_hash(a.data)}};
  Json predictions = Json::array();
  if (a.mode == "detection" || a.mode == "viewpoint-gt") {
    const std::string path = !a.ckpt.empty() ? a.ckpt : a.mode == "detection" ? a.det : a.vp;
    if (path.empty()) throw UsageError("--ckpt is required for mode " + a.mode);
    const ckpt::Checkpoint c = ckpt::load_checkpoint(path);
    inputs["checkpoint"] = path;
    if (a.mode == "detection") {
      if (c.task != train::Task::kDetection) throw ConfigError("mode detection needs a detection checkpoint");
      const auto ev = pipe::evaluate_detection(ds, a.split, c, classes, run.eval, a.common.workers);
      write_report(ev.report, out, "report");
      for (const auto& d : pipe::run_detector(ds, a.split, c, a.common.workers)) {
        predictions.push_back(record_json(d, &ds, false));
      }
    } else {
      if (c.task != train::Task::kViewpoint) throw ConfigError("mode viewpoint-gt needs a viewpoint checkpoint");
      const auto ev = pipe::evaluate_viewpoint_gt(ds, a.split, c, classes, a.common.workers);
      write_report(ev.report, out, "report");
      for (const auto& d : ev.predictions) predictions.push_back(record_json(d, &ds, true));
    }
  } else if (a.mode == "joint") {
    if (a.det.empty() || a.vp.empty()) throw UsageError("mode joint needs both --det and --vp");
    const auto dc = ckpt::load_checkpoint(a.det);
    const auto vc = ckpt::load_checkpoint(a.vp);
    inputs["detection_checkpoint"] = a.det;
    inputs["viewpoint_checkpoint"] = a.vp;
    const auto ev = pipe::evaluate_joint(ds, a.split, dc, vc, classes, a.common.workers);
    write_report(ev.report, out, "report");
  } else {
    throw UsageError("unknown mode '" + a.mode + "' (expected detection, viewpoint-gt or joint)");
  }
  if (!predictions.empty()) io::write_text(out / "predictions.json", predictions.dump(1) + "\n");
  write_run_manifest(out, "eval", argv, run, inputs, {{"mode", a.mode}, {"classes", classes}},
                     a.common.workers);
  return 0;
}

// --- ablate --------------------------------------------------------------------

struct AblateArgs {
  Common common;
  std::string data;
  std::optional<int> trials, shots;
  std::string schemes = "full,rw,rw_q,rw_q_c,rw_diff";
};

int cmd_ablate(const AblateArgs& a, const std::string& argv) {
  cfg::RunConfig run = load_config(a.common);
  if (a.common.seed) run.seed = *a.common.seed;
  if (a.trials) run.trials = *a.trials;
  if (a.shots) run.shots = *a.shots;
  std::vector<agg::Scheme> schemes;
  std::stringstream ss(a.schemes);
  for (std::string s; std::getline(ss, s, ',');) schemes.push_back(agg::parse_scheme(s));
  const fs::path out = resolve_out(a.common.out, "ablate");
  const synth::Dataset ds = io::read_dataset(a.data);
  const std::string hash = io::dataset_manifest_hash(a.data);
  const auto rows = pipe::ablate(ds, hash, run, schemes, run.trials, run.shots, out.string(),
                                 a.common.workers, &std::cout);
  auto rep = pipe::ablation_report(rows);
  rep.config["shots"] = run.shots;
  rep.config["run_seed"] = run.seed;
  write_report(rep, out, "ablation");
  write_run_manifest(out, "ablate", argv, run, {{"dataset", a.data}, {"dataset_manifest_hash", hash}},
                     Json::object(), a.common.workers);
  return 0;
}

// --- predict -------------------------------------------------------------------

struct PredictArgs {
  Common common;
  std::string det, vp;
  std::vector<std::string> images;
  double threshold = 0.5;
  std::string overlay;
};

void draw_box(synth::Image& img, const geom::BoundingBox& b, const synth::Rgb& color) {
  const int x1 = std::clamp(static_cast<int>(b.x1), 0, img.width - 1);
  const int x2 = std::clamp(static_cast<int>(b.x2) - 1, 0, img.width - 1);
  const int y1 = std::clamp(static_cast<int>(b.y1), 0, img.height - 1);
  const int y2 = std::clamp(static_cast<int>(b.y2) - 1, 0, img.height - 1);
  auto put = [&](int y, int x) {
    for (int c = 0; c < 3; ++c) img.set(y, x, c, color[c]);
  };
  for (int x = x1; x <= x2; ++x) {
    put(y1, x);
    put(y2, x);
  }
  for (int y = y1; y <= y2; ++y) {
    put(y, x1);
    put(y, x2);
  }
}

int cmd_predict(const PredictArgs& a, const std::string& argv) {
  using T = float;
  const ckpt::Checkpoint dc = ckpt::load_checkpoint(a.det);
  const det::DetectorNet<T> dnet = ckpt::load_detector<T>(dc);
  std::optional<ckpt::Checkpoint> vc;
  std::optional<vp::ViewpointNet<T>> vnet;
  if (!a.vp.empty()) {
    vc = ckpt::load_checkpoint(a.vp);
    vnet.emplace(ckpt::load_viewpoint<T>(*vc));
  }
  const fs::path out = resolve_out(a.common.out, "predict");
  Json results = Json::array();
  for (const auto& file : a.images) {
    const synth::Image img = io::read_ppm(file);
    Json preds = Json::array();
    synth::Image canvas = img;
    for (const auto& d : det::detect(dnet, img, dc.class_features, dc.classes)) {
      if (d.score < a.threshold) continue;
      Json p{{"class", d.cls}, {"box", io::to_json(d.box)}, {"confidence", d.score}};
      for (const auto& c : dc.registry) {
        if (c.id == d.cls) p["class_name"] = c.name;
      }
      if (vnet && vc->class_features.count(d.cls) && d.box.width() >= 1 && d.box.height() >= 1) {
        p["viewpoint"] = io::to_json(vp::viewpoint_decode(vp::viewpoint_predict(
            *vnet, vp::encode_query_crop(*vnet, img, d.box), vc->class_features.at(d.cls))));
      }
      preds.push_back(p);
      draw_box(canvas, d.box, {1.0, 1.0, 0.0});
    }
    results.push_back({{"image", file}, {"predictions", preds}});
    if (!a.overlay.empty()) {
      io::write_ppm(fs::path(a.overlay) / (fs::path(file).stem().string() + "_overlay.ppm"), canvas);
    }
  }
  const Json doc{{"schema", "fsdv-predictions/1"}, {"threshold", a.threshold}, {"images", results}};
  io::write_text(out / "predictions.json", doc.dump(2) + "\n");
  std::cout << doc.dump(2) << "\n";
  cfg::RunConfig run;
  write_run_manifest(out, "predict", argv, run,
                     {{"detection_checkpoint", a.det}, {"viewpoint_checkpoint", a.vp}, {"images", a.images}},
                     Json::object(), a.common.workers);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot object detection and viewpoint estimation on a synthetic benchmark"};
  app.require_subcommand(1);
  const std::string args = argv_string(argc, argv);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate (or verify) the synthetic dataset");
  add_common(g, gen.common);
  g->add_option("--base-scenes", gen.base_scenes, "scenes in the base training split");
  g->add_option("--pool-scenes", gen.pool_scenes, "scenes in the few-shot pool split");
  g->add_option("--test-scenes", gen.test_scenes, "scenes in the test split");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "base-class training");
  add_common(t, tr.common);
  t->add_option("--task", tr.task, "detection or viewpoint")->check(CLI::IsMember({"detection", "viewpoint"}));
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--agg", tr.agg, "aggregation scheme: full|rw|rw_q|rw_q_c|rw_diff");
  t->add_option("--epochs", tr.epochs, "epoch count");
  t->add_option("--lr", tr.lr, "initial learning rate");
  t->add_option("--pool-size", tr.pool_size, "class-data pool size per base class");
  t->add_option("--max-steps", tr.max_steps, "stop after this many steps (0: all)");

  TrainArgs ft;
  auto* f = app.add_subcommand("finetune", "few-shot fine-tuning of a base checkpoint");
  add_common(f, ft.common);
  f->add_option("--data", ft.data, "dataset directory")->required();
  f->add_option("--base", ft.base, "base checkpoint directory")->required();
  f->add_option("--shots", ft.shots, "K, instances per class");
  f->add_option("--agg", ft.agg, "must match the base checkpoint");
  f->add_option("--epochs", ft.epochs, "epoch count");
  f->add_option("--lr", ft.lr, "initial learning rate");
  f->add_option("--max-steps", ft.max_steps, "stop after this many steps (0: all)");
  f->add_flag("--freeze-backbone", ft.freeze_backbone, "keep backbone parameters fixed");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate checkpoints on a split");
  add_common(e, ev.common);
  e->add_option("--mode", ev.mode, "detection | viewpoint-gt | joint");
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--ckpt", ev.ckpt, "checkpoint for detection or viewpoint-gt");
  e->add_option("--det", ev.det, "detection checkpoint");
  e->add_option("--vp", ev.vp, "viewpoint checkpoint");
  e->add_option("--classes", ev.classes, "novel | base | all");
  e->add_option("--split", ev.split, "dataset split");
  e->add_flag("--eleven-point", ev.eleven_point, "11-point interpolated AP");

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "aggregation-scheme ablation over random support draws");
  add_common(b, ab.common);
  b->add_option("--data", ab.data, "dataset directory")->required();
  b->add_option("--trials", ab.trials, "support draws per scheme");
  b->add_option("--shots", ab.shots, "K");
  b->add_option("--schemes", ab.schemes, "comma-separated schemes");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "detect objects and estimate their viewpoints");
  add_common(p, pr.common);
  p->add_option("--det", pr.det, "detection checkpoint")->required();
  p->add_option("--vp", pr.vp, "viewpoint checkpoint");
  p->add_option("--image", pr.images, "PPM image(s)")->required();
  p->add_option("--threshold", pr.threshold, "minimum confidence");
  p->add_option("--overlay", pr.overlay, "directory for box overlay images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }
  try {
    if (*g) return cmd_gen_data(gen, args);
    if (*t) return cmd_train(tr, args);
    if (*f) return cmd_finetune(ft, args);
    if (*e) return cmd_eval(ev, args);
    if (*b) return cmd_ablate(ab, args);
    if (*p) return cmd_predict(pr, args);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return kUsageError;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
