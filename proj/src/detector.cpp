#include "fsdv/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>

#include "fsdv/error.hpp"
#include "fsdv/io.hpp"

namespace fsdv::det {

using nn::Tensor;
using nn::Var;

std::string architecture_hash(const DetectorConfig& c) {
  std::ostringstream os;
  os << "detector;widths=";
  for (int w : c.widths) os << w << ",";
  os << ";groups=" << c.gn_groups << ";stride=" << c.stride << ";anchors=" << c.anchors_per_cell()
     << ";pool=" << c.pool << ";hidden=" << c.head_hidden << ";registry=" << c.registry_size
     << ";scheme=" << agg::to_string(c.scheme);
  return io::sha256_hex(os.str()).substr(0, 16);
}

std::vector<geom::BoundingBox> generate_anchors(int h, int w, const DetectorConfig& config) {
  std::vector<geom::BoundingBox> out;
  out.reserve(static_cast<std::size_t>(h) * w * config.anchors_per_cell());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double cx = (x + 0.5) * config.stride, cy = (y + 0.5) * config.stride;
      for (double s : config.anchor_sizes) {
        for (double r : config.anchor_ratios) {
          const double aw = s / std::sqrt(r), ah = s * std::sqrt(r);
          out.push_back({cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2});
        }
      }
    }
  }
  return out;
}

std::vector<int> nms(std::span<const geom::BoundingBox> boxes, std::span<const double> scores,
                     double iou_threshold) {
  if (boxes.size() != scores.size()) throw ShapeError("nms: boxes/scores size mismatch");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> kept;
  for (int i : order) {
    bool keep = true;
    for (int k : kept) {
      if (geom::box_iou(boxes[i], boxes[k]) > iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(i);
  }
  return kept;
}

namespace {

std::optional<geom::BoundingBox> try_apply_delta(const geom::BoundingBox& box,
                                                 const geom::BoxDelta& delta) {
  for (double d : delta)
    if (!std::isfinite(d)) return std::nullopt;
  try {
    return geom::apply_box_delta(box, delta);
  } catch (const DegenerateBoxError&) {
    return std::nullopt;
  }
}

}  // namespace

std::vector<Proposal> generate_proposals(std::span<const geom::BoundingBox> anchors,
                                         std::span<const double> objectness,
                                         std::span<const geom::BoxDelta> deltas,
                                         double image_width, double image_height, int top_n,
                                         double nms_iou) {
  if (anchors.size() != objectness.size() || anchors.size() != deltas.size()) {
    throw ShapeError("generate_proposals: anchors/scores/deltas size mismatch");
  }
  if (top_n < 1) throw ConfigError("generate_proposals: top_n must be >= 1");
  std::vector<geom::BoundingBox> boxes;
  std::vector<double> scores;
  std::vector<int> source;
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    if (!std::isfinite(objectness[k])) continue;
    const auto decoded = try_apply_delta(anchors[k], deltas[k]);
    if (!decoded) continue;
    geom::BoundingBox b = geom::clip_box(*decoded, image_width, image_height);
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    boxes.push_back(b);
    scores.push_back(objectness[k]);
    source.push_back(static_cast<int>(k));
  }
  std::vector<Proposal> out;
  for (int i : nms(boxes, scores, nms_iou)) {
    if (static_cast<int>(out.size()) >= top_n) break;
    out.push_back({boxes[i], scores[i], source[i]});
  }
  return out;
}

template <typename T>
Tensor<T> image_tensor(const synth::Image& image, int stride) {
  const synth::Image* p = &image;
  return image_batch<T>(std::span<const synth::Image* const>(&p, 1), stride);
}

template <typename T>
Tensor<T> image_batch(std::span<const synth::Image* const> images, int stride) {
  if (images.empty()) throw ShapeError("image_batch: no images");
  const int h = images[0]->height, w = images[0]->width, c = images[0]->channels;
  const int hp = (h + stride - 1) / stride * stride, wp = (w + stride - 1) / stride * stride;
  Tensor<T> out({static_cast<int>(images.size()), c, hp, wp});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& im = *images[n];
    if (im.height != h || im.width != w || im.channels != c) {
      throw ShapeError("image_batch: images differ in size");
    }
    T* base = out.data() + n * static_cast<std::size_t>(c) * hp * wp;
    for (int ch = 0; ch < c; ++ch) {
      const double shift = ch < 3 ? 0.5 : 0.0;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          base[(static_cast<std::size_t>(ch) * hp + y) * wp + x] =
              static_cast<T>(im.value(y, x, ch) - shift);
        }
      }
    }
  }
  return out;
}

template <typename T>
DetectorNet<T>::DetectorNet(const DetectorConfig& config, std::uint64_t seed) : config_(config) {
  std::mt19937_64 rng(seed);
  const auto& wd = config_.widths;
  first_query_ = nn::make_conv(params_, "backbone.conv0.query", 3, wd[0], 3, rng);
  first_class_ = nn::make_conv(params_, "backbone.conv0.class", 4, wd[0], 3, rng);
  for (int b = 0; b < 4; ++b) {
    const std::string name = "backbone.gn" + std::to_string(b);
    norms_[b] = nn::make_group_norm(params_, name, wd[b], config_.gn_groups);
    if (b < 3) {
      convs_[b] = nn::make_conv(params_, "backbone.conv" + std::to_string(b + 1), wd[b],
                                wd[b + 1], 3, rng);
    }
  }
  const int d = config_.feature_dim(), a = config_.anchors_per_cell();
  rpn_conv_ = nn::make_conv(params_, "rpn.conv", d, d, 3, rng);
  rpn_obj_ = {params_.add("rpn.obj.w", nn::scaled_normal<T>({a, d, 1, 1}, 0.01, rng)),
              params_.add("rpn.obj.b", Tensor<T>({a}))};
  rpn_delta_ = {params_.add("rpn.delta.w", nn::scaled_normal<T>({4 * a, d, 1, 1}, 0.01, rng)),
                params_.add("rpn.delta.b", Tensor<T>({4 * a}))};
  roi_fc_ = nn::make_dense(params_, "roi.fc", d * config_.pool * config_.pool, d, rng);
  head_hidden_ = nn::make_dense(params_, "head.fc1", agg::width_multiple(config_.scheme) * d,
                                config_.head_hidden, rng);
  head_out_ = nn::make_dense(params_, "head.fc2", config_.head_hidden, 5, rng, 0.01);
  background_ = nn::make_dense(params_, "head.background", d, 1, rng, 0.01);
  meta_ = nn::make_dense(params_, "meta.fc", d, config_.registry_size, rng, 0.01);
}

template <typename T>
Var<T> DetectorNet<T>::backbone(const Var<T>& x) const {
  const auto& s = x->value.shape();
  if (s.size() != 4 || (s[1] != 3 && s[1] != 4)) {
    throw ShapeError("backbone expects [N, 3|4, H, W], got " + nn::shape_string(s));
  }
  if (s[2] % config_.stride != 0 || s[3] % config_.stride != 0) {
    throw ShapeError("backbone input must be padded to a multiple of the stride");
  }
  Var<T> h = (s[1] == 3 ? first_query_ : first_class_)(x);
  for (int b = 0; b < 4; ++b) {
    if (b > 0) h = convs_[b - 1](h);
    h = nn::max_pool2(nn::relu(norms_[b](h)));
  }
  return h;
}

template <typename T>
RpnOutput<T> DetectorNet<T>::rpn(const Var<T>& fm) const {
  Var<T> h = nn::relu(rpn_conv_(fm));
  return {rpn_obj_(h), rpn_delta_(h), fm->value.dim(2), fm->value.dim(3)};
}

template <typename T>
RoiFeatures<T> DetectorNet<T>::roi_features(const Var<T>& fm,
                                            std::span<const nn::RoiRef> rois) const {
  RoiFeatures<T> out;
  std::vector<nn::RoiRef> valid;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    if (!(rois[i].box.area() >= 1.0) || !rois[i].box.valid()) {
      ++out.skipped;
      continue;
    }
    valid.push_back(rois[i]);
    out.kept.push_back(static_cast<int>(i));
  }
  if (valid.empty()) {
    out.features = nn::constant(Tensor<T>({0, config_.feature_dim()}));
    return out;
  }
  out.features = nn::relu(roi_fc_(nn::roi_align(fm, std::span<const nn::RoiRef>(valid),
                                                config_.pool, config_.stride)));
  return out;
}

template <typename T>
Var<T> DetectorNet<T>::class_features(const Var<T>& class_images) const {
  if (class_images->value.ndim() != 4 || class_images->value.dim(1) != 4) {
    throw ShapeError("class data must be [C, 4, H, W], got " +
                     nn::shape_string(class_images->value.shape()));
  }
  return nn::global_avg_pool(backbone(class_images));
}

template <typename T>
HeadOutput<T> DetectorNet<T>::head(const Var<T>& f_qry, const Var<T>& f_cls) const {
  const int r = f_qry->value.dim(0), c = f_cls->value.dim(0);
  std::vector<int> iq(static_cast<std::size_t>(r) * c), ic(iq.size());
  for (int i = 0; i < r; ++i) {
    for (int k = 0; k < c; ++k) {
      iq[static_cast<std::size_t>(i) * c + k] = i;
      ic[static_cast<std::size_t>(i) * c + k] = k;
    }
  }
  Var<T> fused = agg::aggregate(nn::index_rows(f_qry, std::span<const int>(iq)),
                                nn::index_rows(f_cls, std::span<const int>(ic)), config_.scheme);
  Var<T> out = head_out_(nn::relu(head_hidden_(fused)));
  Var<T> per_class = nn::reshape(nn::slice_cols(out, 0, 1), {r, c});
  std::vector<Var<T>> parts{background_(f_qry), per_class};
  return {nn::concat_cols(std::span<const Var<T>>(parts)), nn::slice_cols(out, 1, 5)};
}

template <typename T>
Var<T> DetectorNet<T>::meta_logits(const Var<T>& f_cls) const {
  return meta_(f_cls);
}

template <typename T>
void read_rpn(const RpnOutput<T>& out, int n, std::vector<double>& objectness,
              std::vector<geom::BoxDelta>& deltas) {
  const int a = out.objectness->value.dim(1), h = out.h, w = out.w;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const T* ob = out.objectness->value.data() + static_cast<std::size_t>(n) * a * plane;
  const T* de = out.deltas->value.data() + static_cast<std::size_t>(n) * 4 * a * plane;
  objectness.assign(plane * a, 0.0);
  deltas.assign(plane * a, {});
  for (std::size_t p = 0; p < plane; ++p) {
    for (int k = 0; k < a; ++k) {
      const std::size_t idx = p * a + k;
      objectness[idx] = ob[k * plane + p];
      for (int j = 0; j < 4; ++j) deltas[idx][j] = de[(4 * k + j) * plane + p];
    }
  }
}

template <typename T>
agg::FeatureVector encode_class_detection(const DetectorNet<T>& net,
                                          const synth::DetectionClassData& cd) {
  if (cd.image_with_mask.channels != 4) throw ShapeError("class data must have 4 channels");
  nn::NoGradGuard guard;
  Var<T> f = net.class_features(
      nn::constant(image_tensor<T>(cd.image_with_mask, net.config().stride)));
  return agg::FeatureVector(f->value.values().begin(), f->value.values().end());
}

namespace {

template <typename T>
Var<T> class_matrix(const std::map<int, agg::FeatureVector>& class_feats,
                    std::span<const int> classes, int d) {
  Tensor<T> g({static_cast<int>(classes.size()), d});
  for (std::size_t k = 0; k < classes.size(); ++k) {
    auto it = class_feats.find(classes[k]);
    if (it == class_feats.end()) {
      throw ConfigError("no class feature for class " + std::to_string(classes[k]));
    }
    if (static_cast<int>(it->second.size()) != d) {
      throw ShapeError("class feature width " + std::to_string(it->second.size()) +
                       " does not match " + std::to_string(d));
    }
    for (int j = 0; j < d; ++j) g[k * d + j] = static_cast<T>(it->second[j]);
  }
  return nn::constant(std::move(g));
}

}  // namespace

template <typename T>
DetectionOutput detect_predict(const DetectorNet<T>& net, const Var<T>& roi_feats,
                               const std::map<int, agg::FeatureVector>& class_feats,
                               std::span<const int> classes) {
  nn::NoGradGuard guard;
  const int d = net.config().feature_dim();
  const int c = static_cast<int>(classes.size());
  const int r = roi_feats->value.dim(0);
  DetectionOutput out;
  out.classes.assign(classes.begin(), classes.end());
  HeadOutput<T> h = net.head(roi_feats, class_matrix<T>(class_feats, classes, d));
  out.scores.assign(r, std::vector<double>(c + 1));
  out.deltas.assign(r, std::vector<geom::BoxDelta>(c));
  for (int i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k <= c; ++k) mx = std::max(mx, double(h.logits->value[i * (c + 1) + k]));
    double z = 0.0;
    for (int k = 0; k <= c; ++k) {
      out.scores[i][k] = std::exp(double(h.logits->value[i * (c + 1) + k]) - mx);
      z += out.scores[i][k];
    }
    for (auto& s : out.scores[i]) s /= z;
    for (int k = 0; k < c; ++k) {
      for (int j = 0; j < 4; ++j) {
        out.deltas[i][k][j] =
            double(h.deltas->value[(static_cast<std::size_t>(i) * c + k) * 4 + j]) *
            kRoiDeltaScale[j];
      }
    }
  }
  return out;
}

template <typename T>
std::vector<Detection> detect(const DetectorNet<T>& net, const synth::Image& image,
                              const std::map<int, agg::FeatureVector>& class_feats,
                              std::span<const int> classes) {
  nn::NoGradGuard guard;
  const auto& cfg = net.config();
  Var<T> fm = net.backbone(nn::constant(image_tensor<T>(image, cfg.stride)));
  RpnOutput<T> rpn = net.rpn(fm);
  std::vector<double> obj;
  std::vector<geom::BoxDelta> deltas;
  read_rpn(rpn, 0, obj, deltas);
  const auto anchors = generate_anchors(rpn.h, rpn.w, cfg);
  const auto props = generate_proposals(anchors, obj, deltas, image.width, image.height,
                                        cfg.eval_top_n, cfg.rpn_nms);
  if (props.empty()) return {};
  std::vector<nn::RoiRef> rois;
  for (const auto& p : props) rois.push_back({0, p.box});
  RoiFeatures<T> rf = net.roi_features(fm, rois);
  if (rf.kept.empty()) return {};
  DetectionOutput pred = detect_predict(net, rf.features, class_feats, classes);

  std::vector<Detection> all;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    std::vector<geom::BoundingBox> boxes;
    std::vector<double> scores;
    for (std::size_t i = 0; i < rf.kept.size(); ++i) {
      const double s = pred.scores[i][k + 1];
      if (s < cfg.score_threshold) continue;
      if (!std::isfinite(s)) continue;
      const auto decoded = try_apply_delta(rois[rf.kept[i]].box, pred.deltas[i][k]);
      if (!decoded) continue;
      geom::BoundingBox b = geom::clip_box(*decoded, image.width, image.height);
      if (!b.valid()) continue;
      boxes.push_back(b);
      scores.push_back(s);
    }
    for (int i : nms(boxes, scores, cfg.final_nms)) all.push_back({classes[k], boxes[i], scores[i]});
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int>(all.size()) > cfg.max_detections) all.resize(cfg.max_detections);
  return all;
}

#define FSDV_DET_INSTANTIATE(T)                                                             \
  template nn::Tensor<T> image_tensor<T>(const synth::Image&, int);                         \
  template nn::Tensor<T> image_batch<T>(std::span<const synth::Image* const>, int);         \
  template class DetectorNet<T>;                                                            \
  template void read_rpn<T>(const RpnOutput<T>&, int, std::vector<double>&,                 \
                            std::vector<geom::BoxDelta>&);                                  \
  template agg::FeatureVector encode_class_detection<T>(const DetectorNet<T>&,              \
                                                        const synth::DetectionClassData&);  \
  template DetectionOutput detect_predict<T>(const DetectorNet<T>&, const Var<T>&,          \
                                             const std::map<int, agg::FeatureVector>&,      \
                                             std::span<const int>);                         \
  template std::vector<Detection> detect<T>(const DetectorNet<T>&, const synth::Image&,    \
                                            const std::map<int, agg::FeatureVector>&,       \
                                            std::span<const int>);

FSDV_DET_INSTANTIATE(float)
FSDV_DET_INSTANTIATE(double)

}  // namespace fsdv::det
