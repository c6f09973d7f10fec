#include "fsdv/config.hpp"

#include "fsdv/error.hpp"

namespace fsdv::cfg {

using io::reject_unknown;
using io::take;

namespace {

template <typename F>
auto guarded(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value in " + where + ": " + e.what());
  }
}

std::string optimizer_name(nn::OptimizerKind k) { return k == nn::OptimizerKind::kSgd ? "sgd" : "adam"; }

nn::OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return nn::OptimizerKind::kSgd;
  if (s == "adam") return nn::OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

}  // namespace

Json to_json(const det::DetectorConfig& c) {
  return {{"widths", c.widths},
          {"gn_groups", c.gn_groups},
          {"stride", c.stride},
          {"anchor_sizes", c.anchor_sizes},
          {"anchor_ratios", c.anchor_ratios},
          {"pool", c.pool},
          {"head_hidden", c.head_hidden},
          {"registry_size", c.registry_size},
          {"scheme", agg::to_string(c.scheme)},
          {"train_top_n", c.train_top_n},
          {"eval_top_n", c.eval_top_n},
          {"rpn_nms", c.rpn_nms},
          {"final_nms", c.final_nms},
          {"score_threshold", c.score_threshold},
          {"max_detections", c.max_detections}};
}

det::DetectorConfig detector_config_from_json(const Json& j) {
  reject_unknown(j,
                 {"widths", "gn_groups", "stride", "anchor_sizes", "anchor_ratios", "pool",
                  "head_hidden", "registry_size", "scheme", "train_top_n", "eval_top_n", "rpn_nms",
                  "final_nms", "score_threshold", "max_detections"},
                 "detector config");
  return guarded("detector config", [&] {
    det::DetectorConfig c;
    take(j, "widths", c.widths);
    take(j, "gn_groups", c.gn_groups);
    take(j, "stride", c.stride);
    take(j, "anchor_sizes", c.anchor_sizes);
    take(j, "anchor_ratios", c.anchor_ratios);
    take(j, "pool", c.pool);
    take(j, "head_hidden", c.head_hidden);
    take(j, "registry_size", c.registry_size);
    if (j.contains("scheme")) c.scheme = agg::parse_scheme(j.at("scheme").get<std::string>());
    take(j, "train_top_n", c.train_top_n);
    take(j, "eval_top_n", c.eval_top_n);
    take(j, "rpn_nms", c.rpn_nms);
    take(j, "final_nms", c.final_nms);
    take(j, "score_threshold", c.score_threshold);
    take(j, "max_detections", c.max_detections);
    return c;
  });
}

Json to_json(const vp::ViewpointConfig& c) {
  return {{"widths", c.widths},         {"gn_groups", c.gn_groups},
          {"crop_size", c.crop_size},   {"point_hidden", c.point_hidden},
          {"predictor_hidden", c.predictor_hidden}, {"scheme", agg::to_string(c.scheme)}};
}

vp::ViewpointConfig viewpoint_config_from_json(const Json& j) {
  reject_unknown(j, {"widths", "gn_groups", "crop_size", "point_hidden", "predictor_hidden", "scheme"},
                 "viewpoint config");
  return guarded("viewpoint config", [&] {
    vp::ViewpointConfig c;
    take(j, "widths", c.widths);
    take(j, "gn_groups", c.gn_groups);
    take(j, "crop_size", c.crop_size);
    take(j, "point_hidden", c.point_hidden);
    take(j, "predictor_hidden", c.predictor_hidden);
    if (j.contains("scheme")) c.scheme = agg::parse_scheme(j.at("scheme").get<std::string>());
    return c;
  });
}

Json to_json(const train::TrainConfig& c) {
  return {{"task", train::to_string(c.task)},
          {"phase", synth::to_string(c.phase)},
          {"optimizer", optimizer_name(c.optimizer)},
          {"lr", c.lr},
          {"lr_drop_epochs", c.lr_drop_epochs},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"scheme", agg::to_string(c.scheme)},
          {"pool_size", c.pool_size},
          {"shots", c.shots},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},
          {"warmup_steps", c.warmup_steps},
          {"schedule_scale", c.schedule_scale},
          {"freeze_backbone", c.freeze_backbone},
          {"max_steps", c.max_steps}};
}

train::TrainConfig train_config_from_json(const Json& j, const train::TrainConfig& defaults) {
  reject_unknown(j,
                 {"task", "phase", "optimizer", "lr", "lr_drop_epochs", "epochs", "batch_size",
                  "seed", "scheme", "pool_size", "shots", "momentum", "weight_decay", "grad_clip",
                  "warmup_steps", "schedule_scale", "freeze_backbone", "max_steps"},
                 "train config");
  train::TrainConfig c = guarded("train config", [&] {
    train::TrainConfig c = defaults;
    if (j.contains("task")) c.task = train::parse_task(j.at("task").get<std::string>());
    if (j.contains("phase")) c.phase = synth::parse_phase(j.at("phase").get<std::string>());
    if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
    take(j, "lr", c.lr);
    take(j, "lr_drop_epochs", c.lr_drop_epochs);
    take(j, "epochs", c.epochs);
    take(j, "batch_size", c.batch_size);
    take(j, "seed", c.seed);
    if (j.contains("scheme")) c.scheme = agg::parse_scheme(j.at("scheme").get<std::string>());
    take(j, "pool_size", c.pool_size);
    take(j, "shots", c.shots);
    take(j, "momentum", c.momentum);
    take(j, "weight_decay", c.weight_decay);
    take(j, "grad_clip", c.grad_clip);
    take(j, "warmup_steps", c.warmup_steps);
    take(j, "schedule_scale", c.schedule_scale);
    take(j, "freeze_backbone", c.freeze_backbone);
    take(j, "max_steps", c.max_steps);
    return c;
  });
  c.validate();
  return c;
}

train::TrainConfig& RunConfig::phase_config(train::Task task, synth::Phase phase) {
  const bool base = phase == synth::Phase::kBase;
  if (task == train::Task::kDetection) return base ? detection_base : detection_finetune;
  return base ? viewpoint_base : viewpoint_finetune;
}

Json to_json(const RunConfig& c) {
  return {{"dataset", io::to_json(c.dataset)},
          {"detector", to_json(c.detector)},
          {"viewpoint", to_json(c.viewpoint)},
          {"train",
           {{"detection_base", to_json(c.detection_base)},
            {"detection_finetune", to_json(c.detection_finetune)},
            {"viewpoint_base", to_json(c.viewpoint_base)},
            {"viewpoint_finetune", to_json(c.viewpoint_finetune)}}},
          {"eval",
           {{"iou", c.eval.iou},
            {"eleven_point", c.eval.eleven_point},
            {"score_threshold", c.eval.score_threshold}}},
          {"shots", c.shots},
          {"trials", c.trials},
          {"seed", c.seed}};
}

RunConfig run_config_from_json(const Json& j) {
  reject_unknown(j, {"dataset", "detector", "viewpoint", "train", "eval", "shots", "trials", "seed"},
                 "run config");
  RunConfig c;
  if (j.contains("dataset")) c.dataset = io::dataset_config_from_json(j.at("dataset"));
  if (j.contains("detector")) c.detector = detector_config_from_json(j.at("detector"));
  if (j.contains("viewpoint")) c.viewpoint = viewpoint_config_from_json(j.at("viewpoint"));
  if (j.contains("train")) {
    const Json& t = j.at("train");
    reject_unknown(t, {"detection_base", "detection_finetune", "viewpoint_base", "viewpoint_finetune"},
                   "train");
    auto slot = [&](const char* key, train::TrainConfig& dst) {
      if (t.contains(key)) dst = train_config_from_json(t.at(key), dst);
    };
    slot("detection_base", c.detection_base);
    slot("detection_finetune", c.detection_finetune);
    slot("viewpoint_base", c.viewpoint_base);
    slot("viewpoint_finetune", c.viewpoint_finetune);
  }
  guarded("run config", [&] {
    if (j.contains("eval")) {
      const Json& e = j.at("eval");
      reject_unknown(e, {"iou", "eleven_point", "score_threshold"}, "eval");
      take(e, "iou", c.eval.iou);
      take(e, "eleven_point", c.eval.eleven_point);
      take(e, "score_threshold", c.eval.score_threshold);
    }
    take(j, "shots", c.shots);
    take(j, "trials", c.trials);
    take(j, "seed", c.seed);
    return 0;
  });
  if (c.shots < 1) throw ConfigError("shots must be >= 1");
  if (c.trials < 1) throw ConfigError("trials must be >= 1");
  return c;
}

RunConfig load_run_config(const io::fs::path& path) {
  Json j;
  try {
    j = Json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace fsdv::cfg
