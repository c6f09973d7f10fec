#pragma once

// End-to-end procedures shared by the command-line tool and the acceptance
// runner: phase training into checkpoints, the three evaluation modes and
// the aggregation-scheme ablation.

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fsdv/checkpoint.hpp"
#include "fsdv/evaluation.hpp"

namespace fsdv::pipe {

using io::Json;

struct PhaseResult {
  ckpt::Checkpoint checkpoint;
  train::TrainLog log;
  synth::Episode episode;
};

/// Base phase for the task. `config` is the phase's training config; its
/// scheme overrides the architecture's.
PhaseResult train_base(const synth::Dataset& dataset, const std::string& dataset_hash,
                       train::Task task, const cfg::RunConfig& run, train::TrainConfig config,
                       std::ostream* progress = nullptr);

/// Fine-tunes a base checkpoint on a K-shot episode drawn with `config.seed`
/// over base and novel classes, and stores the averaged class features.
PhaseResult finetune(const synth::Dataset& dataset, const std::string& dataset_hash,
                     const ckpt::Checkpoint& base, train::TrainConfig config,
                     std::ostream* progress = nullptr);

/// Episode recorded in a checkpoint, rebuilt from the dataset.
synth::Episode checkpoint_episode(const synth::Dataset& dataset, const ckpt::Checkpoint& checkpoint);

/// Class features of a checkpoint recomputed from its parameters and the
/// dataset: the episode pool for detection, the class 3D models for viewpoint.
std::map<int, agg::FeatureVector> recompute_class_features(const synth::Dataset& dataset,
                                                           const ckpt::Checkpoint& checkpoint);

/// Audit of a training log: supervised instances and class data per class.
Json audit_json(const train::TrainLog& log, const synth::Episode& episode,
                const synth::Dataset& dataset);

enum class ClassSet { kNovel, kBase, kAll };
ClassSet parse_class_set(const std::string& name);
std::vector<int> select_classes(const synth::Dataset& dataset, ClassSet set);

std::vector<eval::GroundTruth> ground_truth(const synth::Dataset& dataset, const std::string& split);

/// Detections of a detection checkpoint on every image of `split`, in image
/// order. `workers` only splits the images across threads.
std::vector<eval::DetectionRecord> run_detector(const synth::Dataset& dataset,
                                                const std::string& split,
                                                const ckpt::Checkpoint& checkpoint, int workers = 1);

struct DetectionEvaluation {
  std::vector<eval::ClassDetectionMetrics> per_class;
  eval::EvalReport report;
  double mean_ap50 = 0.0;  // over classes with ground truth
};

DetectionEvaluation evaluate_detection(const synth::Dataset& dataset, const std::string& split,
                                       const ckpt::Checkpoint& checkpoint,
                                       const std::vector<int>& classes,
                                       const cfg::EvalOptions& options, int workers = 1);

struct ViewpointEvaluation {
  std::map<int, eval::ViewpointMetrics> per_class;
  eval::EvalReport report;
  std::vector<eval::DetectionRecord> predictions;  // GT boxes with predicted viewpoints
};

/// Ground-truth classes and boxes are given; only the viewpoint is predicted.
ViewpointEvaluation evaluate_viewpoint_gt(const synth::Dataset& dataset, const std::string& split,
                                          const ckpt::Checkpoint& checkpoint,
                                          const std::vector<int>& classes, int workers = 1);

/// Attaches predicted viewpoints to detections (crops of the detected boxes).
void attach_viewpoints(const synth::Dataset& dataset, const std::string& split,
                       const ckpt::Checkpoint& viewpoint_checkpoint,
                       std::vector<eval::DetectionRecord>& dets, int workers = 1);

struct JointEvaluation {
  std::vector<eval::JointClassResult> gt_boxes;
  std::vector<eval::JointClassResult> predicted_boxes;
  eval::EvalReport report;
};

JointEvaluation evaluate_joint(const synth::Dataset& dataset, const std::string& split,
                               const ckpt::Checkpoint& detection_checkpoint,
                               const ckpt::Checkpoint& viewpoint_checkpoint,
                               const std::vector<int>& classes, int workers = 1);

struct AblationTrial {
  agg::Scheme scheme = agg::Scheme::kFull;
  int trial = 0;
  std::uint64_t seed = 0;
  double novel_ap50 = 0.0;
};

struct AblationRow {
  agg::Scheme scheme = agg::Scheme::kFull;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation over trials
  std::vector<AblationTrial> trials;
};

/// Support-draw seed of trial t for a given run seed.
std::uint64_t trial_seed(std::uint64_t run_seed, int trial);

/// For each scheme: base training (or the base checkpoint found under
/// `cache_dir/base_<scheme>` when present), then `trials` fine-tuning runs
/// on independent support draws, each scored by novel-class AP50.
std::vector<AblationRow> ablate(const synth::Dataset& dataset, const std::string& dataset_hash,
                                const cfg::RunConfig& run, const std::vector<agg::Scheme>& schemes,
                                int trials, int shots, const std::string& cache_dir, int workers = 1,
                                std::ostream* progress = nullptr);

eval::EvalReport ablation_report(const std::vector<AblationRow>& rows);

}  // namespace fsdv::pipe
