#pragma once

// Detection metrics (greedy matching, AP over a precision envelope, AR),
// viewpoint metrics and the joint detection + viewpoint protocol, plus
// report serialization.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsdv/geometry.hpp"
#include "json.hpp"

namespace fsdv::eval {

using Json = nlohmann::ordered_json;

struct DetectionRecord {
  std::string image_id;
  int cls = 0;
  geom::BoundingBox box;
  double confidence = 0.0;
  geom::Viewpoint viewpoint;  // used by the joint protocol only
};

struct GroundTruth {
  std::string image_id;
  int cls = 0;
  geom::BoundingBox box;
  geom::Viewpoint viewpoint;
};

/// Detections are processed in the given order (callers sort by confidence
/// descending, stable). Within each (image, class), a detection takes the
/// unmatched ground truth of highest IoU if that IoU >= iou_thresh.
/// Returns, per detection, the index into `gts` or -1 for a false positive.
std::vector<int> match_detections(std::span<const DetectionRecord> dets,
                                  std::span<const GroundTruth> gts, double iou_thresh);

enum class Interpolation { kAllPoint, kElevenPoint };

/// AP from confidence-ranked true/false positive flags. nullopt when
/// num_gt == 0 (recall undefined; the class is excluded).
std::optional<double> average_precision(std::span<const double> confidences,
                                        std::span<const int> matches, int num_gt,
                                        Interpolation interp = Interpolation::kAllPoint);

/// Indices sorted by confidence descending, ties in input order.
std::vector<int> confidence_order(std::span<const DetectionRecord> dets);

struct ClassDetectionMetrics {
  int cls = 0;
  int num_gt = 0;
  int num_dets = 0;
  std::optional<double> ap50;
  std::optional<double> ap;  // mean over IoU 0.50:0.05:0.95
  std::optional<double> ar1, ar10, ar100;
  std::optional<double> recall50;
};

std::vector<ClassDetectionMetrics> evaluate_detection(std::span<const DetectionRecord> dets,
                                                      std::span<const GroundTruth> gts,
                                                      std::span<const int> classes,
                                                      Interpolation interp = Interpolation::kAllPoint);

struct ViewpointMetrics {
  double acc30 = 0.0;   // fraction with error strictly below 30 degrees
  double med_err = 0.0; // degrees
  int count = 0;
};

/// nullopt for empty input; ShapeError on length mismatch.
std::optional<ViewpointMetrics> viewpoint_metrics(std::span<const geom::Viewpoint> preds,
                                                  std::span<const geom::Viewpoint> gts);

struct JointClassResult {
  int cls = 0;
  int num_gt = 0;
  int detected = 0;  // covered by a correct box at IoU 0.5
  int correct = 0;   // ... whose viewpoint error is below 30 degrees
  std::optional<double> accuracy;  // correct / num_gt
};

/// GT-object denominator; matching is match_detections at IoU 0.5 in
/// confidence order.
std::vector<JointClassResult> joint_eval(std::span<const DetectionRecord> dets,
                                         std::span<const GroundTruth> gts,
                                         std::span<const int> classes);

/// Tabular report: one row per class plus a mean row over present values.
struct EvalReport {
  std::string title;
  std::vector<std::string> columns;
  struct Row {
    std::string label;
    std::vector<std::optional<double>> values;
  };
  std::vector<Row> rows;
  Json config = Json::object();

  /// Arithmetic mean of each column over rows where the value is present.
  Row mean_row() const;
  Json to_json() const;
  std::string to_csv() const;
  std::string to_markdown() const;
};

}  // namespace fsdv::eval
