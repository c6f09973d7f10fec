#include "fsdv/viewpoint.hpp"

#include <cmath>
#include <sstream>

#include "fsdv/error.hpp"
#include "fsdv/io.hpp"

namespace fsdv::vp {

using nn::Tensor;
using nn::Var;

std::string architecture_hash(const ViewpointConfig& c) {
  std::ostringstream os;
  os << "viewpoint;widths=";
  for (int w : c.widths) os << w << ",";
  os << ";groups=" << c.gn_groups << ";crop=" << c.crop_size << ";point=" << c.point_hidden
     << ";pred=" << c.predictor_hidden[0] << "," << c.predictor_hidden[1]
     << ";scheme=" << agg::to_string(c.scheme);
  return io::sha256_hex(os.str()).substr(0, 16);
}

template <typename T>
Tensor<T> crop_tensor(const synth::Image& image, const geom::BoundingBox& box, int size) {
  if (!(box.width() >= 1.0 && box.height() >= 1.0) || box.x1 < 0 || box.y1 < 0 ||
      box.x2 > image.width || box.y2 > image.height) {
    throw DegenerateBoxError("crop box is degenerate or outside the image");
  }
  Tensor<T> out({1, 3, size, size});
  const double sx = box.width() / size, sy = box.height() / size;
  for (int y = 0; y < size; ++y) {
    const double fy = std::clamp(box.y1 + (y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      const double fx = std::clamp(box.x1 + (x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - wy) * ((1 - wx) * image.value(y0, x0, c) + wx * image.value(y0, x1, c)) +
                         wy * ((1 - wx) * image.value(y1, x0, c) + wx * image.value(y1, x1, c));
        out[(static_cast<std::size_t>(c) * size + y) * size + x] = static_cast<T>(v - 0.5);
      }
    }
  }
  return out;
}

template <typename T>
ViewpointNet<T>::ViewpointNet(const ViewpointConfig& config, std::uint64_t seed)
    : config_(config) {
  std::mt19937_64 rng(seed);
  const auto& wd = config_.widths;
  for (int b = 0; b < 4; ++b) {
    const std::string id = std::to_string(b);
    convs_[b] = nn::make_conv(params_, "encoder.conv" + id, b == 0 ? 3 : wd[b - 1], wd[b], 3, rng);
    norms_[b] = nn::make_group_norm(params_, "encoder.gn" + id, wd[b], config_.gn_groups);
  }
  const int d = config_.feature_dim();
  point1_ = nn::make_dense(params_, "shape.fc1", 3, config_.point_hidden, rng);
  point2_ = nn::make_dense(params_, "shape.fc2", config_.point_hidden, d, rng);
  fc1_ = nn::make_dense(params_, "predictor.fc1", agg::width_multiple(config_.scheme) * d,
                        config_.predictor_hidden[0], rng);
  fc2_ = nn::make_dense(params_, "predictor.fc2", config_.predictor_hidden[0],
                        config_.predictor_hidden[1], rng);
  fc3_ = nn::make_dense(params_, "predictor.fc3", config_.predictor_hidden[1], 2 * kOutputs, rng,
                        0.01);
}

template <typename T>
Var<T> ViewpointNet<T>::encode_crops(const Var<T>& crops) const {
  const auto& s = crops->value.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] % 16 != 0 || s[3] % 16 != 0) {
    throw ShapeError("crop encoder expects [B, 3, S, S] with S divisible by 16, got " +
                     nn::shape_string(s));
  }
  Var<T> h = crops;
  for (int b = 0; b < 4; ++b) h = nn::max_pool2(nn::relu(norms_[b](convs_[b](h))));
  return nn::global_avg_pool(h);
}

template <typename T>
Var<T> ViewpointNet<T>::encode_points(const Var<T>& points) const {
  const auto& s = points->value.shape();
  if (s.size() != 2 || s[1] != 3) throw ShapeError("points must be [N, 3]");
  if (s[0] < kMinPoints) {
    throw ConfigError("shape encoder needs at least " + std::to_string(kMinPoints) +
                      " points, got " + std::to_string(s[0]));
  }
  Var<T> h = nn::relu(nn::linear_rows(points, point1_.w, point1_.b));
  return nn::max_rows(nn::relu(nn::linear_rows(h, point2_.w, point2_.b)));
}

template <typename T>
ViewpointOutput<T> ViewpointNet<T>::predict(const Var<T>& f_qry, const Var<T>& f_cls) const {
  Var<T> h = nn::relu(fc2_(nn::relu(fc1_(agg::aggregate(f_qry, f_cls, config_.scheme)))));
  Var<T> out = fc3_(h);
  return {nn::slice_cols(out, 0, kOutputs),
          nn::scale(nn::tanh(nn::slice_cols(out, kOutputs, 2 * kOutputs)), 0.5)};
}

template <typename T>
Tensor<T> points_tensor(const synth::ShapePointCloud& pc) {
  Tensor<T> t({static_cast<int>(pc.points.size()), 3});
  for (std::size_t i = 0; i < pc.points.size(); ++i) {
    for (int k = 0; k < 3; ++k) t[i * 3 + k] = static_cast<T>(pc.points[i][k]);
  }
  return t;
}

namespace {

template <typename T>
agg::FeatureVector to_vector(const Var<T>& v) {
  return agg::FeatureVector(v->value.values().begin(), v->value.values().end());
}

template <typename T>
Var<T> row(const agg::FeatureVector& f) {
  Tensor<T> t({1, static_cast<int>(f.size())});
  for (std::size_t i = 0; i < f.size(); ++i) t[i] = static_cast<T>(f[i]);
  return nn::constant(std::move(t));
}

}  // namespace

template <typename T>
agg::FeatureVector encode_query_crop(const ViewpointNet<T>& net, const synth::Image& image,
                                     const geom::BoundingBox& box) {
  nn::NoGradGuard guard;
  return to_vector(
      net.encode_crops(nn::constant(crop_tensor<T>(image, box, net.config().crop_size))));
}

template <typename T>
agg::FeatureVector encode_shape(const ViewpointNet<T>& net, const synth::ShapePointCloud& pc) {
  nn::NoGradGuard guard;
  return to_vector(net.encode_points(nn::constant(points_tensor<T>(pc))));
}

template <typename T>
ViewpointScores viewpoint_predict(const ViewpointNet<T>& net, const agg::FeatureVector& f_qry,
                                  const agg::FeatureVector& f_cls) {
  nn::NoGradGuard guard;
  const int d = net.config().feature_dim();
  if (static_cast<int>(f_qry.size()) != d || static_cast<int>(f_cls.size()) != d) {
    throw ShapeError("viewpoint_predict: feature widths must equal " + std::to_string(d));
  }
  ViewpointOutput<T> out = net.predict(row<T>(f_qry), row<T>(f_cls));
  ViewpointScores s;
  for (int k = 0; k < kOutputs; ++k) {
    s.logits[k] = out.logits->value[k];
    s.offsets[k] = out.offsets->value[k];
  }
  return s;
}

geom::Viewpoint viewpoint_decode(const ViewpointScores& out) {
  geom::ViewpointCode code;
  for (int a = 0; a < kAngles; ++a) {
    int best = 0;
    for (int k = 1; k < kBins; ++k) {
      if (out.logits[a * kBins + k] > out.logits[a * kBins + best]) best = k;
    }
    code[a] = {best, std::clamp(out.offsets[a * kBins + best], -0.5, 0.5)};
  }
  return geom::decode_angle_bins(code);
}

template <typename T>
agg::FeatureVector build_class_shape_feature(
    const ViewpointNet<T>& net, std::span<const synth::ShapePointCloud* const> clouds) {
  if (clouds.empty()) throw EmptyClassError("no 3D models for the class");
  std::vector<agg::FeatureVector> feats;
  for (const auto* pc : clouds) feats.push_back(encode_shape(net, *pc));
  return agg::average_class_features(feats);
}

template <typename T>
agg::FeatureVector build_class_shape_feature(const ViewpointNet<T>& net,
                                             std::span<const synth::ClassModel> class_models,
                                             int n_points, std::uint64_t seed) {
  if (class_models.empty()) throw EmptyClassError("no 3D models for the class");
  std::vector<synth::ShapePointCloud> clouds;
  for (const auto& m : class_models) {
    clouds.push_back(synth::sample_point_cloud(
        m, n_points, synth::derive_seed(seed, m.class_id, static_cast<std::uint64_t>(m.variant))));
  }
  std::vector<const synth::ShapePointCloud*> ptrs;
  for (const auto& c : clouds) ptrs.push_back(&c);
  return build_class_shape_feature(net, std::span<const synth::ShapePointCloud* const>(ptrs));
}

#define FSDV_VP_INSTANTIATE(T)                                                                \
  template Tensor<T> crop_tensor<T>(const synth::Image&, const geom::BoundingBox&, int);      \
  template class ViewpointNet<T>;                                                             \
  template Tensor<T> points_tensor<T>(const synth::ShapePointCloud&);                         \
  template agg::FeatureVector encode_query_crop<T>(const ViewpointNet<T>&, const synth::Image&, \
                                                   const geom::BoundingBox&);                 \
  template agg::FeatureVector encode_shape<T>(const ViewpointNet<T>&,                         \
                                              const synth::ShapePointCloud&);                 \
  template ViewpointScores viewpoint_predict<T>(const ViewpointNet<T>&,                       \
                                                const agg::FeatureVector&,                    \
                                                const agg::FeatureVector&);                   \
  template agg::FeatureVector build_class_shape_feature<T>(                                   \
      const ViewpointNet<T>&, std::span<const synth::ShapePointCloud* const>);                \
  template agg::FeatureVector build_class_shape_feature<T>(                                   \
      const ViewpointNet<T>&, std::span<const synth::ClassModel>, int, std::uint64_t);

FSDV_VP_INSTANTIATE(float)
FSDV_VP_INSTANTIATE(double)

}  // namespace fsdv::vp
