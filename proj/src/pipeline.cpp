#include "fsdv/pipeline.hpp"

#include <cmath>
#include <set>
#include <thread>

#include "fsdv/error.hpp"

namespace fsdv::pipe {

namespace {

using T = float;

// Runs f(i) for i in [0, n) on up to `workers` threads; each index is
// handled by exactly one thread so results stored by index are unaffected.
template <typename F>
void parallel_for(int n, int workers, F&& f) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

Json episode_json(const synth::EpisodeSpec& spec, synth::Phase phase) {
  return {{"phase", synth::to_string(phase)},
          {"shots", spec.shots},
          {"seed", spec.seed},
          {"pool_size", spec.pool_size},
          {"base_classes", spec.base_classes},
          {"novel_classes", spec.novel_classes}};
}

synth::EpisodeSpec episode_spec(const synth::Dataset& ds, const train::TrainConfig& c) {
  return {ds.base_classes, ds.novel_classes, c.shots, c.seed, c.pool_size};
}

}  // namespace

PhaseResult train_base(const synth::Dataset& dataset, const std::string& dataset_hash,
                       train::Task task, const cfg::RunConfig& run, train::TrainConfig config,
                       std::ostream* progress) {
  config.task = task;
  config.phase = synth::Phase::kBase;
  config.validate();
  const synth::EpisodeSpec spec = episode_spec(dataset, config);
  PhaseResult r;
  r.episode = synth::build_episode(dataset, spec, synth::Phase::kBase);
  const std::uint64_t init_seed = synth::derive_seed(run.seed, 7, static_cast<int>(task));
  if (task == train::Task::kDetection) {
    det::DetectorConfig arch = run.detector;
    arch.scheme = config.scheme;
    arch.registry_size = static_cast<int>(dataset.classes.size());
    det::DetectorNet<T> net(arch, init_seed);
    r.log = train::run_detection_phase(net, dataset, r.episode, config, progress);
    auto feats = train::build_inference_class_features(net, dataset, r.episode);
    r.checkpoint = ckpt::make_checkpoint(net, synth::Phase::kBase, dataset, dataset_hash,
                                         r.episode.classes, std::move(feats), config);
  } else {
    vp::ViewpointConfig arch = run.viewpoint;
    arch.scheme = config.scheme;
    vp::ViewpointNet<T> net(arch, init_seed);
    r.log = train::run_viewpoint_phase(net, dataset, r.episode, config, progress);
    auto feats = train::build_inference_class_features(net, dataset, r.episode.classes);
    r.checkpoint = ckpt::make_checkpoint(net, synth::Phase::kBase, dataset, dataset_hash,
                                         r.episode.classes, std::move(feats), config);
  }
  r.checkpoint.extra["episode"] = episode_json(spec, synth::Phase::kBase);
  r.checkpoint.extra["init_seed"] = init_seed;
  return r;
}

PhaseResult finetune(const synth::Dataset& dataset, const std::string& dataset_hash,
                     const ckpt::Checkpoint& base, train::TrainConfig config,
                     std::ostream* progress) {
  if (base.phase != synth::Phase::kBase) throw ConfigError("fine-tuning needs a base checkpoint");
  ckpt::check_registry(base, dataset.classes);
  config.task = base.task;
  config.phase = synth::Phase::kFinetune;
  config.scheme = agg::parse_scheme(base.architecture.at("scheme").get<std::string>());
  config.pool_size = config.shots;
  config.validate();
  const synth::EpisodeSpec spec = episode_spec(dataset, config);
  PhaseResult r;
  r.episode = synth::build_episode(dataset, spec, synth::Phase::kFinetune);
  if (base.task == train::Task::kDetection) {
    det::DetectorNet<T> net = ckpt::load_detector<T>(base);
    r.log = train::run_detection_phase(net, dataset, r.episode, config, progress);
    auto feats = train::build_inference_class_features(net, dataset, r.episode);
    r.checkpoint = ckpt::make_checkpoint(net, synth::Phase::kFinetune, dataset, dataset_hash,
                                         r.episode.classes, std::move(feats), config);
  } else {
    vp::ViewpointNet<T> net = ckpt::load_viewpoint<T>(base);
    r.log = train::run_viewpoint_phase(net, dataset, r.episode, config, progress);
    auto feats = train::build_inference_class_features(net, dataset, r.episode.classes);
    r.checkpoint = ckpt::make_checkpoint(net, synth::Phase::kFinetune, dataset, dataset_hash,
                                         r.episode.classes, std::move(feats), config);
  }
  r.checkpoint.extra["episode"] = episode_json(spec, synth::Phase::kFinetune);
  r.checkpoint.extra["base_params_sha256"] = io::sha256_hex([&] {
    std::string s;
    for (const auto& [name, t] : base.params) {
      s += name;
      s.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
    }
    return s;
  }());
  return r;
}

synth::Episode checkpoint_episode(const synth::Dataset& dataset, const ckpt::Checkpoint& c) {
  if (!c.extra.contains("episode")) throw ConfigError("checkpoint records no episode");
  const Json& e = c.extra.at("episode");
  synth::EpisodeSpec spec{e.at("base_classes").get<std::vector<int>>(),
                          e.at("novel_classes").get<std::vector<int>>(), e.at("shots").get<int>(),
                          e.at("seed").get<std::uint64_t>(), e.at("pool_size").get<int>()};
  return synth::build_episode(dataset, spec, synth::parse_phase(e.at("phase").get<std::string>()));
}

std::map<int, agg::FeatureVector> recompute_class_features(const synth::Dataset& dataset,
                                                           const ckpt::Checkpoint& c) {
  ckpt::check_registry(c, dataset.classes);
  if (c.task == train::Task::kDetection) {
    return train::build_inference_class_features(ckpt::load_detector<T>(c), dataset,
                                                 checkpoint_episode(dataset, c));
  }
  return train::build_inference_class_features(ckpt::load_viewpoint<T>(c), dataset,
                                               std::span<const int>(c.classes));
}

Json audit_json(const train::TrainLog& log, const synth::Episode& episode,
                const synth::Dataset& dataset) {
  const auto& scenes = dataset.split(episode.split);
  auto ref_json = [&](const synth::ObjectRef& r) {
    return Json{{"image", scenes[r.scene].id}, {"object", r.object}};
  };
  Json supervised = Json::object();
  std::map<int, std::set<synth::ObjectRef>> by_class;
  for (const auto& r : log.supervised) by_class[scenes[r.scene].objects[r.object].cls].insert(r);
  for (const auto& [cls, refs] : by_class) {
    Json arr = Json::array();
    for (const auto& r : refs) arr.push_back(ref_json(r));
    supervised[dataset.class_info(cls).name] = {{"class", cls}, {"count", refs.size()}, {"instances", arr}};
  }
  Json class_data = Json::object();
  for (const auto& [cls, refs] : log.class_data_used) {
    std::set<synth::ObjectRef> uniq(refs.begin(), refs.end());
    Json arr = Json::array();
    for (const auto& r : uniq) arr.push_back(ref_json(r));
    class_data[dataset.class_info(cls).name] = {{"class", cls}, {"count", uniq.size()}, {"items", arr}};
  }
  return {{"phase", synth::to_string(episode.phase)},
          {"split", episode.split},
          {"classes", episode.classes},
          {"supervised", supervised},
          {"class_data", class_data},
          {"zero_positive_batches", log.zero_positive_batches},
          {"steps", log.steps.size()},
          {"seconds", log.seconds}};
}

ClassSet parse_class_set(const std::string& name) {
  if (name == "novel") return ClassSet::kNovel;
  if (name == "base") return ClassSet::kBase;
  if (name == "all") return ClassSet::kAll;
  throw ConfigError("unknown class set '" + name + "' (expected novel, base or all)");
}

std::vector<int> select_classes(const synth::Dataset& ds, ClassSet set) {
  if (set == ClassSet::kNovel) return ds.novel_classes;
  if (set == ClassSet::kBase) return ds.base_classes;
  std::vector<int> all = ds.base_classes;
  all.insert(all.end(), ds.novel_classes.begin(), ds.novel_classes.end());
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<eval::GroundTruth> ground_truth(const synth::Dataset& ds, const std::string& split) {
  std::vector<eval::GroundTruth> out;
  for (const auto& s : ds.split(split)) {
    for (const auto& o : s.objects) out.push_back({s.id, o.cls, o.box, o.viewpoint});
  }
  return out;
}

std::vector<eval::DetectionRecord> run_detector(const synth::Dataset& ds, const std::string& split,
                                                const ckpt::Checkpoint& c, int workers) {
  ckpt::check_registry(c, ds.classes);
  const det::DetectorNet<T> net = ckpt::load_detector<T>(c);
  const auto& scenes = ds.split(split);
  std::vector<std::vector<eval::DetectionRecord>> per_image(scenes.size());
  parallel_for(static_cast<int>(scenes.size()), workers, [&](int i) {
    for (const auto& d : det::detect(net, scenes[i].image, c.class_features, c.classes)) {
      per_image[i].push_back({scenes[i].id, d.cls, d.box, d.score, {}});
    }
  });
  std::vector<eval::DetectionRecord> out;
  for (auto& v : per_image) out.insert(out.end(), v.begin(), v.end());
  return out;
}

namespace {

std::string class_label(const synth::Dataset& ds, int cls) {
  const auto& info = ds.class_info(cls);
  return info.name + (info.symmetric ? " (sym)" : "");
}

}  // namespace

DetectionEvaluation evaluate_detection(const synth::Dataset& ds, const std::string& split,
                                       const ckpt::Checkpoint& c, const std::vector<int>& classes,
                                       const cfg::EvalOptions& options, int workers) {
  const auto dets = run_detector(ds, split, c, workers);
  const auto gts = ground_truth(ds, split);
  DetectionEvaluation out;
  out.per_class = eval::evaluate_detection(
      dets, gts, classes,
      options.eleven_point ? eval::Interpolation::kElevenPoint : eval::Interpolation::kAllPoint);
  auto& rep = out.report;
  rep.title = "detection (" + split + ")";
  rep.columns = {"AP50", "AP", "AR1", "AR10", "AR100", "num_gt", "num_dets"};
  double s = 0.0;
  int n = 0;
  for (const auto& m : out.per_class) {
    rep.rows.push_back({class_label(ds, m.cls),
                        {m.ap50, m.ap, m.ar1, m.ar10, m.ar100, double(m.num_gt), double(m.num_dets)}});
    if (m.ap50) {
      s += *m.ap50;
      ++n;
    }
  }
  out.mean_ap50 = n ? s / n : 0.0;
  rep.config = {{"split", split},
                {"classes", classes},
                {"interpolation", options.eleven_point ? "11-point" : "all-point"},
                {"dataset_manifest_hash", c.dataset_hash},
                {"architecture_hash", c.architecture_hash}};
  return out;
}

void attach_viewpoints(const synth::Dataset& ds, const std::string& split,
                       const ckpt::Checkpoint& c, std::vector<eval::DetectionRecord>& dets,
                       int workers) {
  ckpt::check_registry(c, ds.classes);
  const vp::ViewpointNet<T> net = ckpt::load_viewpoint<T>(c);
  std::map<std::string, const synth::SceneSample*> by_id;
  for (const auto& s : ds.split(split)) by_id[s.id] = &s;
  parallel_for(static_cast<int>(dets.size()), workers, [&](int i) {
    auto& d = dets[i];
    auto feat = c.class_features.find(d.cls);
    if (feat == c.class_features.end()) {
      throw ConfigError("viewpoint checkpoint has no class feature for class " + std::to_string(d.cls));
    }
    const synth::Image& img = by_id.at(d.image_id)->image;
    const geom::BoundingBox box = geom::clip_box(d.box, img.width, img.height);
    if (box.width() < 1.0 || box.height() < 1.0) return;  // keeps the default viewpoint
    d.viewpoint = vp::viewpoint_decode(
        vp::viewpoint_predict(net, vp::encode_query_crop(net, img, box), feat->second));
  });
}

ViewpointEvaluation evaluate_viewpoint_gt(const synth::Dataset& ds, const std::string& split,
                                          const ckpt::Checkpoint& c, const std::vector<int>& classes,
                                          int workers) {
  ViewpointEvaluation out;
  const std::set<int> wanted(classes.begin(), classes.end());
  std::vector<geom::Viewpoint> truth;
  for (const auto& g : ground_truth(ds, split)) {
    if (!wanted.count(g.cls)) continue;
    out.predictions.push_back({g.image_id, g.cls, g.box, 1.0, {}});
    truth.push_back(g.viewpoint);
  }
  attach_viewpoints(ds, split, c, out.predictions, workers);
  auto& rep = out.report;
  rep.title = "viewpoint with ground-truth boxes (" + split + ")";
  rep.columns = {"Acc30", "MedErr", "count"};
  for (int cls : classes) {
    std::vector<geom::Viewpoint> p, g;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (out.predictions[i].cls != cls) continue;
      p.push_back(out.predictions[i].viewpoint);
      g.push_back(truth[i]);
    }
    const auto m = eval::viewpoint_metrics(p, g);
    if (m) out.per_class[cls] = *m;
    rep.rows.push_back(m ? eval::EvalReport::Row{class_label(ds, cls), {m->acc30, m->med_err, double(m->count)}}
                         : eval::EvalReport::Row{class_label(ds, cls), {std::nullopt, std::nullopt, 0.0}});
  }
  rep.config = {{"split", split}, {"classes", classes}, {"architecture_hash", c.architecture_hash}};
  return out;
}

JointEvaluation evaluate_joint(const synth::Dataset& ds, const std::string& split,
                               const ckpt::Checkpoint& det_ckpt, const ckpt::Checkpoint& vp_ckpt,
                               const std::vector<int>& classes, int workers) {
  if (det_ckpt.task != train::Task::kDetection || vp_ckpt.task != train::Task::kViewpoint) {
    throw ConfigError("joint evaluation needs a detection and a viewpoint checkpoint");
  }
  const auto gts = ground_truth(ds, split);
  JointEvaluation out;
  const auto gt_view = evaluate_viewpoint_gt(ds, split, vp_ckpt, classes, workers);
  out.gt_boxes = eval::joint_eval(gt_view.predictions, gts, classes);
  auto dets = run_detector(ds, split, det_ckpt, workers);
  attach_viewpoints(ds, split, vp_ckpt, dets, workers);
  out.predicted_boxes = eval::joint_eval(dets, gts, classes);
  auto& rep = out.report;
  rep.title = "joint detection and viewpoint (" + split + ")";
  rep.columns = {"gt_boxes", "predicted_boxes", "num_gt", "detected"};
  for (std::size_t k = 0; k < classes.size(); ++k) {
    rep.rows.push_back({class_label(ds, classes[k]),
                        {out.gt_boxes[k].accuracy, out.predicted_boxes[k].accuracy,
                         double(out.gt_boxes[k].num_gt), double(out.predicted_boxes[k].detected)}});
  }
  rep.config = {{"split", split},
                {"classes", classes},
                {"iou", 0.5},
                {"max_rotation_error_deg", 30.0},
                {"denominator", "ground-truth objects"}};
  return out;
}

std::uint64_t trial_seed(std::uint64_t run_seed, int trial) {
  return synth::derive_seed(run_seed, 0xab1a7e, static_cast<std::uint64_t>(trial));
}

std::vector<AblationRow> ablate(const synth::Dataset& ds, const std::string& dataset_hash,
                                const cfg::RunConfig& run, const std::vector<agg::Scheme>& schemes,
                                int trials, int shots, const std::string& cache_dir, int workers,
                                std::ostream* progress) {
  std::vector<AblationRow> rows;
  for (agg::Scheme scheme : schemes) {
    const io::fs::path base_dir = io::fs::path(cache_dir) / ("base_" + agg::to_string(scheme));
    ckpt::Checkpoint base;
    bool cached = false;
    if (io::fs::exists(base_dir / "manifest.json")) {
      base = ckpt::load_checkpoint(base_dir);
      cached = base.dataset_hash == dataset_hash && base.task == train::Task::kDetection &&
               base.architecture.at("scheme") == agg::to_string(scheme);
    }
    if (!cached) {
      train::TrainConfig bc = run.detection_base;
      bc.scheme = scheme;
      if (progress) *progress << "base training, scheme " << agg::to_string(scheme) << "\n";
      base = train_base(ds, dataset_hash, train::Task::kDetection, run, bc, progress).checkpoint;
      if (!cache_dir.empty()) ckpt::save_checkpoint(base, base_dir);
    }
    AblationRow row;
    row.scheme = scheme;
    for (int t = 0; t < trials; ++t) {
      train::TrainConfig fc = run.detection_finetune;
      fc.shots = shots;
      fc.seed = trial_seed(run.seed, t);
      const PhaseResult ft = finetune(ds, dataset_hash, base, fc);
      const auto ev =
          evaluate_detection(ds, synth::kTestSplit, ft.checkpoint, ds.novel_classes, run.eval, workers);
      row.trials.push_back({scheme, t, fc.seed, ev.mean_ap50});
      if (progress) {
        *progress << "  " << agg::to_string(scheme) << " trial " << t << " seed " << fc.seed
                  << " novel AP50 " << ev.mean_ap50 << "\n";
      }
    }
    double s = 0.0;
    for (const auto& tr : row.trials) s += tr.novel_ap50;
    row.mean = s / trials;
    double v = 0.0;
    for (const auto& tr : row.trials) v += (tr.novel_ap50 - row.mean) * (tr.novel_ap50 - row.mean);
    row.stddev = trials > 1 ? std::sqrt(v / (trials - 1)) : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

eval::EvalReport ablation_report(const std::vector<AblationRow>& rows) {
  eval::EvalReport rep;
  rep.title = "aggregation scheme ablation, novel-class AP50";
  rep.columns = {"mean", "std", "trials"};
  Json seeds = Json::object();
  for (const auto& r : rows) {
    rep.rows.push_back({agg::to_string(r.scheme), {r.mean, r.stddev, double(r.trials.size())}});
    Json t = Json::array();
    for (const auto& tr : r.trials) t.push_back({{"trial", tr.trial}, {"seed", tr.seed}, {"ap50", tr.novel_ap50}});
    seeds[agg::to_string(r.scheme)] = t;
  }
  rep.config = {{"trials", seeds}};
  return rep;
}

}  // namespace fsdv::pipe
