#pragma once

// Losses for both tasks, anchor/RoI target sampling, the two-phase training
// loop and inference-time class features.

#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsdv/aggregation.hpp"
#include "fsdv/detector.hpp"
#include "fsdv/synthdata.hpp"
#include "fsdv/viewpoint.hpp"

namespace fsdv::train {

/// 0.5 x^2 / beta for |x| < beta, |x| - 0.5 beta otherwise. beta > 0.
double smooth_l1(double x, double beta = 1.0);

struct LossBreakdown {
  std::vector<std::pair<std::string, double>> terms;
  double total = 0.0;  // the optimized scalar

  double term(const std::string& name) const;
  double sum_of_terms() const;
};

template <typename T>
struct LossResult {
  nn::Var<T> total;
  LossBreakdown breakdown;
};

enum class Task { kDetection, kViewpoint };

std::string to_string(Task task);
Task parse_task(const std::string& name);

struct TrainConfig {
  Task task = Task::kDetection;
  synth::Phase phase = synth::Phase::kBase;
  nn::OptimizerKind optimizer = nn::OptimizerKind::kSgd;
  double lr = 1e-3;
  std::vector<int> lr_drop_epochs;  // lr *= 0.1 at the start of each
  int epochs = 1;
  int batch_size = 4;
  std::uint64_t seed = 0;
  agg::Scheme scheme = agg::Scheme::kFull;
  int pool_size = 50;
  int shots = 10;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double grad_clip = 10.0;  // global norm; 0 disables
  int warmup_steps = 0;
  double schedule_scale = 1.0;  // reference epochs / epochs actually run
  bool freeze_backbone = false;
  int max_steps = 0;  // 0 = run every epoch
  std::string snapshot_dir;  // written on divergence when non-empty

  /// Throws ConfigError when lr <= 0, epochs < 1, pool_size < 1, ...
  void validate() const;
  double lr_at(int epoch, int step) const;
};

/// Reference schedules (optimizer, lr, epochs, drops, batch) of the method.
TrainConfig reference_preset(Task task, synth::Phase phase);
/// Desk-scale schedules used by default on the synthetic benchmark.
TrainConfig desk_preset(Task task, synth::Phase phase);

// --- detection ---------------------------------------------------------------

struct ImageTargets {
  std::vector<geom::BoundingBox> boxes;
  std::vector<int> labels;  // column in C_train, [0, C)
  std::vector<geom::BoundingBox> ignored;
};

struct SamplingConfig {
  int anchors_per_image = 64;
  double anchor_positive_fraction = 0.5;
  double anchor_pos_iou = 0.5;
  double anchor_neg_iou = 0.3;
  int rois_per_image = 32;
  double roi_positive_fraction = 0.25;
  double roi_pos_iou = 0.5;
};

/// Sampled supervision for one batch. RPN vectors follow the [N, A, h, w]
/// and [N, 4A, h, w] layouts of the RPN output tensors.
struct DetectionSample {
  std::vector<double> rpn_label;
  std::vector<double> rpn_weight;
  std::vector<double> rpn_target;
  std::vector<double> rpn_target_weight;
  std::vector<nn::RoiRef> rois;
  std::vector<int> roi_label;  // 0 background, 1 + column otherwise
  std::vector<geom::BoxDelta> roi_target;  // already divided by kRoiDeltaScale
  int positive_anchors = 0;
  int positive_rois = 0;
};

template <typename T>
DetectionSample sample_detection_targets(const det::DetectorConfig& config,
                                         const det::RpnOutput<T>& rpn,
                                         std::span<const ImageTargets> targets, int image_width,
                                         int image_height, const SamplingConfig& sampling,
                                         std::mt19937_64& rng);

template <typename T>
struct DetectionOutputs {
  nn::Var<T> rpn_objectness;  // [N, A, h, w]
  nn::Var<T> rpn_deltas;      // [N, 4A, h, w]
  nn::Var<T> logits;          // [R, 1 + C]
  nn::Var<T> deltas;          // [R * C, 4]
  nn::Var<T> meta_logits;     // [C, registry]
};

/// rpn + cls + loc + meta, each averaged over its sample count.
/// meta_targets[k] is the registry id of class row k; `allowed` restricts
/// the meta softmax to the training classes.
template <typename T>
LossResult<T> detection_loss(const DetectionOutputs<T>& out, const DetectionSample& sample,
                             std::span<const int> meta_targets, std::span<const int> allowed);

template <typename T>
struct DetectionStep {
  LossResult<T> loss;
  DetectionSample sample;
};

/// Forward pass plus loss on one batch. `fixed` reuses a previous sample
/// (proposals and sampling held fixed, e.g. for gradient checks).
template <typename T>
DetectionStep<T> detection_step(const det::DetectorNet<T>& net, const nn::Tensor<T>& images,
                                const nn::Tensor<T>& class_images,
                                std::span<const ImageTargets> targets,
                                std::span<const int> class_ids, std::mt19937_64& rng,
                                const DetectionSample* fixed = nullptr,
                                const SamplingConfig& sampling = {});

// --- viewpoint ---------------------------------------------------------------

/// Per angle: CE over its 24 bins and smooth-L1 on the ground-truth bin's
/// offset, averaged over the batch. Terms: cls_azi, reg_azi, cls_ele, ...
template <typename T>
LossResult<T> viewpoint_loss(const vp::ViewpointOutput<T>& out,
                             std::span<const geom::Viewpoint> targets);

// --- training loop -----------------------------------------------------------

struct StepRecord {
  int step = 0;
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<synth::ObjectRef> supervised;  // every target instance seen
  std::map<int, std::vector<synth::ObjectRef>> class_data_used;
  long zero_positive_batches = 0;
  double seconds = 0.0;
};

/// Instantiated for float (normal runs) and double (exact-arithmetic checks).
template <typename T>
TrainLog run_detection_phase(det::DetectorNet<T>& net, const synth::Dataset& dataset,
                             const synth::Episode& episode, const TrainConfig& config,
                             std::ostream* progress = nullptr);

template <typename T>
TrainLog run_viewpoint_phase(vp::ViewpointNet<T>& net, const synth::Dataset& dataset,
                             const synth::Episode& episode, const TrainConfig& config,
                             std::ostream* progress = nullptr);

/// CSV: step, epoch, lr, one column per loss term, total.
void write_metrics_csv(const TrainLog& log, const std::string& path);

/// Mean encoding of each class's class-data pool. Throws EmptyClassError
/// when a class has no data.
template <typename T>
std::map<int, agg::FeatureVector> build_inference_class_features(
    const det::DetectorNet<T>& net, const synth::Dataset& dataset, const synth::Episode& episode);

template <typename T>
std::map<int, agg::FeatureVector> build_inference_class_features(
    const vp::ViewpointNet<T>& net, const synth::Dataset& dataset, std::span<const int> classes);

}  // namespace fsdv::train
