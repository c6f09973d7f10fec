#pragma once

// JSON forms of the model and training configurations, and the run
// configuration document read by the command-line tool. Parsers reject
// unknown keys.

#include <string>

#include "fsdv/detector.hpp"
#include "fsdv/io.hpp"
#include "fsdv/training.hpp"
#include "fsdv/viewpoint.hpp"

namespace fsdv::cfg {

using io::Json;

Json to_json(const det::DetectorConfig& c);
det::DetectorConfig detector_config_from_json(const Json& j);

Json to_json(const vp::ViewpointConfig& c);
vp::ViewpointConfig viewpoint_config_from_json(const Json& j);

Json to_json(const train::TrainConfig& c);
/// Keys absent from `j` keep the values of `defaults`.
train::TrainConfig train_config_from_json(const Json& j, const train::TrainConfig& defaults);

struct EvalOptions {
  double iou = 0.5;
  bool eleven_point = false;
  double score_threshold = 0.05;
};

/// Everything a command needs besides its inputs and flags.
struct RunConfig {
  synth::DatasetConfig dataset;
  det::DetectorConfig detector;
  vp::ViewpointConfig viewpoint;
  train::TrainConfig detection_base = train::desk_preset(train::Task::kDetection, synth::Phase::kBase);
  train::TrainConfig detection_finetune =
      train::desk_preset(train::Task::kDetection, synth::Phase::kFinetune);
  train::TrainConfig viewpoint_base = train::desk_preset(train::Task::kViewpoint, synth::Phase::kBase);
  train::TrainConfig viewpoint_finetune =
      train::desk_preset(train::Task::kViewpoint, synth::Phase::kFinetune);
  EvalOptions eval;
  int shots = 10;
  int trials = 10;
  std::uint64_t seed = 0;

  train::TrainConfig& phase_config(train::Task task, synth::Phase phase);
};

Json to_json(const RunConfig& c);
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const io::fs::path& path);

}  // namespace fsdv::cfg
