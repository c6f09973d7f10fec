#pragma once

// Class-conditioned viewpoint estimator: a conv crop encoder, a point-cloud
// shape encoder with max pooling over points, and a three-layer predictor
// emitting per-angle bin logits and per-bin offsets.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fsdv/aggregation.hpp"
#include "fsdv/geometry.hpp"
#include "fsdv/nn/module.hpp"
#include "fsdv/synthdata.hpp"

namespace fsdv::vp {

inline constexpr int kBins = 24;
inline constexpr int kAngles = 3;
inline constexpr int kOutputs = kAngles * kBins;  // logits; as many offsets
inline constexpr int kMinPoints = 16;

struct ViewpointConfig {
  std::array<int, 4> widths{16, 32, 64, 128};
  int gn_groups = 4;
  int crop_size = 64;
  int point_hidden = 64;
  std::array<int, 2> predictor_hidden{256, 128};
  agg::Scheme scheme = agg::Scheme::kFull;

  int feature_dim() const { return widths[3]; }
};

std::string architecture_hash(const ViewpointConfig& config);

/// Bilinear resize of the box region to crop_size^2, RGB centered to
/// [-0.5, 0.5]. Throws DegenerateBoxError for boxes under 1 px or outside
/// the image.
template <typename T>
nn::Tensor<T> crop_tensor(const synth::Image& image, const geom::BoundingBox& box, int size);

/// Row b holds angle a's bin k at column a * kBins + k.
template <typename T>
struct ViewpointOutput {
  nn::Var<T> logits;   // [B, 72]
  nn::Var<T> offsets;  // [B, 72], in [-0.5, 0.5]
};

template <typename T>
class ViewpointNet {
 public:
  ViewpointNet(const ViewpointConfig& config, std::uint64_t seed);

  const ViewpointConfig& config() const { return config_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  /// crops [B, 3, S, S] -> [B, D]
  nn::Var<T> encode_crops(const nn::Var<T>& crops) const;
  /// points [N, 3] -> [1, D]. Throws ConfigError below kMinPoints.
  nn::Var<T> encode_points(const nn::Var<T>& points) const;
  /// f_qry, f_cls [B, D]
  ViewpointOutput<T> predict(const nn::Var<T>& f_qry, const nn::Var<T>& f_cls) const;

 private:
  ViewpointConfig config_;
  nn::ParamStore<T> params_;
  std::array<nn::Conv<T>, 4> convs_;
  std::array<nn::GroupNorm<T>, 4> norms_;
  nn::Dense<T> point1_, point2_;
  nn::Dense<T> fc1_, fc2_, fc3_;
};

template <typename T>
nn::Tensor<T> points_tensor(const synth::ShapePointCloud& pc);

template <typename T>
agg::FeatureVector encode_query_crop(const ViewpointNet<T>& net, const synth::Image& image,
                                     const geom::BoundingBox& box);

template <typename T>
agg::FeatureVector encode_shape(const ViewpointNet<T>& net, const synth::ShapePointCloud& pc);

/// Plain-value copy of one row of a ViewpointOutput.
struct ViewpointScores {
  std::array<double, kOutputs> logits{};
  std::array<double, kOutputs> offsets{};
};

template <typename T>
ViewpointScores viewpoint_predict(const ViewpointNet<T>& net, const agg::FeatureVector& f_qry,
                                  const agg::FeatureVector& f_cls);

/// Argmax bin per angle (ties to the lower index) with that bin's offset.
geom::Viewpoint viewpoint_decode(const ViewpointScores& out);

/// Mean shape feature over the given clouds. Throws EmptyClassError when empty.
template <typename T>
agg::FeatureVector build_class_shape_feature(const ViewpointNet<T>& net,
                                             std::span<const synth::ShapePointCloud* const> clouds);

/// Samples n_points from every model and averages their encodings.
template <typename T>
agg::FeatureVector build_class_shape_feature(const ViewpointNet<T>& net,
                                             std::span<const synth::ClassModel> class_models,
                                             int n_points, std::uint64_t seed);

}  // namespace fsdv::vp
