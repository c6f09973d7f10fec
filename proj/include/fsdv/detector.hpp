#pragma once

// Two-stage class-conditioned detector: shared conv backbone (separate first
// layer for 3-channel queries and 4-channel class data), anchor-based region
// proposals, RoI bilinear pooling and one shared head evaluated per
// (RoI, class) pair on aggregated features.

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fsdv/aggregation.hpp"
#include "fsdv/geometry.hpp"
#include "fsdv/nn/module.hpp"
#include "fsdv/synthdata.hpp"

namespace fsdv::det {

struct DetectorConfig {
  std::array<int, 4> widths{16, 32, 64, 128};
  int gn_groups = 4;
  int stride = 16;
  std::vector<double> anchor_sizes{20.0, 32.0, 48.0};
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};  // height / width
  int pool = 5;
  int head_hidden = 128;
  int registry_size = 12;
  agg::Scheme scheme = agg::Scheme::kFull;
  int train_top_n = 100;
  int eval_top_n = 50;
  double rpn_nms = 0.7;
  double final_nms = 0.3;
  double score_threshold = 0.05;
  int max_detections = 100;

  int feature_dim() const { return widths[3]; }
  int anchors_per_cell() const {
    return static_cast<int>(anchor_sizes.size() * anchor_ratios.size());
  }
};

/// Stable digest of everything that determines parameter names and shapes.
std::string architecture_hash(const DetectorConfig& config);

/// RoI head regression targets are divided by these before the loss.
inline constexpr geom::BoxDelta kRoiDeltaScale{0.1, 0.1, 0.2, 0.2};

/// Anchor k = (y * w + x) * A + a, a = size_index * num_ratios + ratio_index,
/// centered at ((x + 0.5) * stride, (y + 0.5) * stride).
std::vector<geom::BoundingBox> generate_anchors(int h, int w, const DetectorConfig& config);

/// Greedy suppression in descending score order (ties: lower index first).
/// Returns kept indices in that order.
std::vector<int> nms(std::span<const geom::BoundingBox> boxes, std::span<const double> scores,
                     double iou_threshold);

struct Proposal {
  geom::BoundingBox box;
  double objectness = 0.0;
  int anchor = 0;
};

/// Decodes, clips, drops boxes narrower than 1 px, suppresses, keeps top_n.
std::vector<Proposal> generate_proposals(std::span<const geom::BoundingBox> anchors,
                                         std::span<const double> objectness,
                                         std::span<const geom::BoxDelta> deltas,
                                         double image_width, double image_height, int top_n,
                                         double nms_iou);

/// [1, C, Hp, Wp] with Hp, Wp rounded up to the stride; RGB is centered to
/// [-0.5, 0.5], a fourth channel is copied as a {0, 1} mask, padding is 0.
template <typename T>
nn::Tensor<T> image_tensor(const synth::Image& image, int stride);

/// Stacks equally sized images into [N, C, Hp, Wp].
template <typename T>
nn::Tensor<T> image_batch(std::span<const synth::Image* const> images, int stride);

template <typename T>
struct RpnOutput {
  nn::Var<T> objectness;  // [N, A, h, w]
  nn::Var<T> deltas;      // [N, 4A, h, w]
  int h = 0;
  int w = 0;
};

template <typename T>
struct RoiFeatures {
  nn::Var<T> features;    // [R', D]
  std::vector<int> kept;  // input index of each row
  int skipped = 0;        // proposals with area < 1 px
};

template <typename T>
struct HeadOutput {
  nn::Var<T> logits;  // [R, 1 + C], column 0 is background
  nn::Var<T> deltas;  // [R * C, 4], row i * C + c
};

template <typename T>
class DetectorNet {
 public:
  DetectorNet(const DetectorConfig& config, std::uint64_t seed);

  const DetectorConfig& config() const { return config_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  /// x [N, 3|4, H, W] -> [N, D, H/16, W/16]. Throws ShapeError otherwise.
  nn::Var<T> backbone(const nn::Var<T>& x) const;
  RpnOutput<T> rpn(const nn::Var<T>& fm) const;
  RoiFeatures<T> roi_features(const nn::Var<T>& fm, std::span<const nn::RoiRef> rois) const;
  /// class_images [C, 4, H, W] -> [C, D]
  nn::Var<T> class_features(const nn::Var<T>& class_images) const;
  /// f_qry [R, D], f_cls [C, D].
  HeadOutput<T> head(const nn::Var<T>& f_qry, const nn::Var<T>& f_cls) const;
  /// [C, registry_size] logits of the class-identity classifier.
  nn::Var<T> meta_logits(const nn::Var<T>& f_cls) const;

 private:
  DetectorConfig config_;
  nn::ParamStore<T> params_;
  nn::Conv<T> first_query_, first_class_;
  std::array<nn::Conv<T>, 3> convs_;
  std::array<nn::GroupNorm<T>, 4> norms_;
  nn::Conv<T> rpn_conv_, rpn_obj_, rpn_delta_;
  nn::Dense<T> roi_fc_, head_hidden_, head_out_, background_, meta_;
};

/// Per-anchor objectness logits and deltas of image n.
template <typename T>
void read_rpn(const RpnOutput<T>& out, int n, std::vector<double>& objectness,
              std::vector<geom::BoxDelta>& deltas);

/// Encodes one mask-augmented class datum to a width-D feature.
template <typename T>
agg::FeatureVector encode_class_detection(const DetectorNet<T>& net,
                                          const synth::DetectionClassData& cd);

struct DetectionOutput {
  std::vector<int> classes;                      // column c + 1 of scores
  std::vector<std::vector<double>> scores;       // [R][1 + C], rows sum to 1
  std::vector<std::vector<geom::BoxDelta>> deltas;  // [R][C], scaled back
};

/// Throws ConfigError when a class in `classes` has no feature.
template <typename T>
DetectionOutput detect_predict(const DetectorNet<T>& net, const nn::Var<T>& roi_feats,
                               const std::map<int, agg::FeatureVector>& class_feats,
                               std::span<const int> classes);

struct Detection {
  int cls = 0;
  geom::BoundingBox box;
  double score = 0.0;
};

/// Full inference on one image with per-class suppression at final_nms.
template <typename T>
std::vector<Detection> detect(const DetectorNet<T>& net, const synth::Image& image,
                              const std::map<int, agg::FeatureVector>& class_feats,
                              std::span<const int> classes);

}  // namespace fsdv::det
