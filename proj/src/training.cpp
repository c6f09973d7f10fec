#include "fsdv/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>

#include "fsdv/error.hpp"
#include "fsdv/io.hpp"

namespace fsdv::train {

using nn::Tensor;
using nn::Var;

double smooth_l1(double x, double beta) {
  if (!(beta > 0.0)) throw ConfigError("smooth_l1: beta must be positive");
  const double a = std::abs(x);
  return a < beta ? 0.5 * x * x / beta : a - 0.5 * beta;
}

double LossBreakdown::term(const std::string& name) const {
  for (const auto& [n, v] : terms) {
    if (n == name) return v;
  }
  throw ConfigError("no loss term " + name);
}

double LossBreakdown::sum_of_terms() const {
  double s = 0.0;
  for (const auto& [_, v] : terms) s += v;
  return s;
}

std::string to_string(Task task) { return task == Task::kDetection ? "detection" : "viewpoint"; }

Task parse_task(const std::string& name) {
  if (name == "detection") return Task::kDetection;
  if (name == "viewpoint") return Task::kViewpoint;
  throw ConfigError("unknown task '" + name + "' (expected detection|viewpoint)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (pool_size < 1) throw ConfigError("class-data pool size must be >= 1");
  if (shots < 1) throw ConfigError("shots must be >= 1");
  if (!(schedule_scale > 0.0)) throw ConfigError("schedule scale must be > 0");
}

double TrainConfig::lr_at(int epoch, int step) const {
  double v = lr;
  for (int e : lr_drop_epochs) {
    if (epoch >= e) v *= 0.1;
  }
  if (warmup_steps > 0 && step < warmup_steps) v *= (step + 1.0) / warmup_steps;
  return v;
}

TrainConfig reference_preset(Task task, synth::Phase phase) {
  TrainConfig c;
  c.task = task;
  c.phase = phase;
  c.schedule_scale = 1.0;
  if (task == Task::kDetection) {
    c.optimizer = nn::OptimizerKind::kSgd;
    c.lr = 1e-3;
    c.batch_size = 4;
    if (phase == synth::Phase::kBase) {
      c.epochs = 20;
      c.lr_drop_epochs = {5, 10, 15};
      c.pool_size = 200;
    } else {
      c.epochs = 9;
      c.lr_drop_epochs = {5};
    }
  } else {
    c.optimizer = nn::OptimizerKind::kAdam;
    c.lr = 1e-4;
    c.batch_size = 16;
    c.weight_decay = 0.0;
    if (phase == synth::Phase::kBase) {
      c.epochs = 150;
    } else {
      c.epochs = 100;
      c.lr_drop_epochs = {50};
    }
  }
  return c;
}

TrainConfig desk_preset(Task task, synth::Phase phase) {
  TrainConfig c = reference_preset(task, phase);
  if (task == Task::kDetection) {
    c.pool_size = 50;
    c.lr = 0.02;
    c.warmup_steps = 100;
    if (phase == synth::Phase::kBase) {
      c.epochs = 6;
      c.lr_drop_epochs = {4};
      c.schedule_scale = 20.0 / 6.0;
    } else {
      c.lr = 0.01;
      c.warmup_steps = 20;
      c.epochs = 8;
      c.lr_drop_epochs = {6};
      c.schedule_scale = 9.0 / 8.0;
    }
  } else {
    if (phase == synth::Phase::kBase) {
      c.lr = 2e-3;
      c.epochs = 36;
      c.lr_drop_epochs = {27};
      c.schedule_scale = 150.0 / 36.0;
    } else {
      c.lr = 1e-4;
      c.epochs = 20;
      c.lr_drop_epochs = {15};
      c.schedule_scale = 100.0 / 20.0;
    }
  }
  return c;
}

// --- detection targets ---------------------------------------------------------

namespace {

struct Overlap {
  double best = 0.0;
  int arg = -1;
  double ignored = 0.0;
};

Overlap overlap(const geom::BoundingBox& b, const ImageTargets& t) {
  Overlap o;
  for (std::size_t g = 0; g < t.boxes.size(); ++g) {
    const double iou = geom::box_iou(b, t.boxes[g]);
    if (iou > o.best) {
      o.best = iou;
      o.arg = static_cast<int>(g);
    }
  }
  for (const auto& ig : t.ignored) o.ignored = std::max(o.ignored, geom::box_iou(b, ig));
  return o;
}

// Random subset of at most n, in ascending index order.
std::vector<int> subsample(std::vector<int> idx, std::size_t n, std::mt19937_64& rng) {
  if (idx.size() > n) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

geom::BoxDelta scaled_delta(const geom::BoundingBox& from, const geom::BoundingBox& to) {
  geom::BoxDelta d = geom::compute_box_delta(from, to);
  for (int j = 0; j < 4; ++j) d[j] /= det::kRoiDeltaScale[j];
  return d;
}

}  // namespace

template <typename T>
DetectionSample sample_detection_targets(const det::DetectorConfig& config,
                                         const det::RpnOutput<T>& rpn,
                                         std::span<const ImageTargets> targets, int image_width,
                                         int image_height, const SamplingConfig& sampling,
                                         std::mt19937_64& rng) {
  const int n_img = rpn.objectness->value.dim(0);
  if (static_cast<int>(targets.size()) != n_img) {
    throw ShapeError("target count does not match the batch");
  }
  const int a = config.anchors_per_cell(), h = rpn.h, w = rpn.w;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto anchors = det::generate_anchors(h, w, config);
  const std::size_t k_total = anchors.size();

  DetectionSample s;
  s.rpn_label.assign(n_img * k_total, 0.0);
  s.rpn_weight.assign(n_img * k_total, 0.0);
  s.rpn_target.assign(n_img * k_total * 4, 0.0);
  s.rpn_target_weight.assign(n_img * k_total * 4, 0.0);

  struct Picked {
    int image;
    int anchor;
    bool positive;
    int gt;
  };
  std::vector<Picked> picked;
  for (int n = 0; n < n_img; ++n) {
    const ImageTargets& t = targets[n];
    std::vector<Overlap> ov(k_total);
    for (std::size_t k = 0; k < k_total; ++k) ov[k] = overlap(anchors[k], t);
    std::vector<char> pos(k_total, 0);
    for (std::size_t k = 0; k < k_total; ++k) pos[k] = ov[k].best >= sampling.anchor_pos_iou;
    // Every ground truth keeps at least its best-matching anchors.
    for (std::size_t g = 0; g < t.boxes.size(); ++g) {
      double best = 0.0;
      for (std::size_t k = 0; k < k_total; ++k) {
        best = std::max(best, geom::box_iou(anchors[k], t.boxes[g]));
      }
      if (best <= 0.0) continue;
      for (std::size_t k = 0; k < k_total; ++k) {
        if (geom::box_iou(anchors[k], t.boxes[g]) == best) {
          pos[k] = 1;
          ov[k].arg = static_cast<int>(g);
        }
      }
    }
    std::vector<int> p, q;
    for (std::size_t k = 0; k < k_total; ++k) {
      if (pos[k]) {
        p.push_back(static_cast<int>(k));
      } else if (ov[k].best < sampling.anchor_neg_iou && ov[k].ignored < sampling.anchor_neg_iou) {
        q.push_back(static_cast<int>(k));
      }
    }
    const auto max_pos = static_cast<std::size_t>(sampling.anchors_per_image *
                                                  sampling.anchor_positive_fraction);
    p = subsample(p, max_pos, rng);
    q = subsample(q, sampling.anchors_per_image - p.size(), rng);
    for (int k : p) picked.push_back({n, k, true, ov[k].arg});
    for (int k : q) picked.push_back({n, k, false, -1});
  }
  const double rpn_norm = picked.empty() ? 0.0 : 1.0 / picked.size();
  for (const auto& pk : picked) {
    const int cell = pk.anchor / a, ai = pk.anchor % a;
    const std::size_t li = (static_cast<std::size_t>(pk.image) * a + ai) * plane + cell;
    s.rpn_weight[li] = rpn_norm;
    if (!pk.positive) continue;
    s.rpn_label[li] = 1.0;
    ++s.positive_anchors;
    const geom::BoxDelta d = geom::compute_box_delta(anchors[pk.anchor], targets[pk.image].boxes[pk.gt]);
    for (int j = 0; j < 4; ++j) {
      const std::size_t ti =
          (static_cast<std::size_t>(pk.image) * 4 * a + 4 * ai + j) * plane + cell;
      s.rpn_target[ti] = d[j];
      s.rpn_target_weight[ti] = rpn_norm;
    }
  }

  // RoIs: proposals from the current RPN plus the ground-truth boxes.
  std::vector<double> obj;
  std::vector<geom::BoxDelta> deltas;
  for (int n = 0; n < n_img; ++n) {
    const ImageTargets& t = targets[n];
    det::read_rpn(rpn, n, obj, deltas);
    std::vector<geom::BoundingBox> cand;
    for (const auto& p : det::generate_proposals(anchors, obj, deltas, image_width, image_height,
                                                 config.train_top_n, config.rpn_nms)) {
      cand.push_back(p.box);
    }
    cand.insert(cand.end(), t.boxes.begin(), t.boxes.end());
    std::vector<int> p, q;
    std::vector<Overlap> ov(cand.size());
    for (std::size_t i = 0; i < cand.size(); ++i) {
      ov[i] = overlap(cand[i], t);
      if (ov[i].best >= sampling.roi_pos_iou) {
        p.push_back(static_cast<int>(i));
      } else if (ov[i].ignored < sampling.roi_pos_iou) {
        q.push_back(static_cast<int>(i));
      }
    }
    const auto max_pos =
        static_cast<std::size_t>(sampling.rois_per_image * sampling.roi_positive_fraction);
    p = subsample(p, max_pos, rng);
    q = subsample(q, sampling.rois_per_image - p.size(), rng);
    for (int i : p) {
      s.rois.push_back({n, cand[i]});
      s.roi_label.push_back(1 + t.labels[ov[i].arg]);
      s.roi_target.push_back(scaled_delta(cand[i], t.boxes[ov[i].arg]));
      ++s.positive_rois;
    }
    for (int i : q) {
      s.rois.push_back({n, cand[i]});
      s.roi_label.push_back(0);
      s.roi_target.push_back({});
    }
  }
  return s;
}

template <typename T>
LossResult<T> detection_loss(const DetectionOutputs<T>& out, const DetectionSample& s,
                             std::span<const int> meta_targets, std::span<const int> allowed) {
  const std::size_t m = out.rpn_objectness->value.size();
  if (s.rpn_label.size() != m || s.rpn_target.size() != out.rpn_deltas->value.size()) {
    throw ShapeError("detection_loss: RPN sample does not match the outputs");
  }
  const int r = static_cast<int>(s.rois.size());
  const int c1 = out.logits->value.dim(1);
  const int c = c1 - 1;
  if (out.logits->value.dim(0) != r || out.deltas->value.dim(0) != r * c) {
    throw ShapeError("detection_loss: RoI sample does not match the head outputs");
  }

  Var<T> rpn_cls = nn::bce_with_logits(nn::reshape(out.rpn_objectness, {static_cast<int>(m)}),
                                       std::span<const double>(s.rpn_label),
                                       std::span<const double>(s.rpn_weight));
  Tensor<T> rpn_t(out.rpn_deltas->value.shape());
  for (std::size_t i = 0; i < s.rpn_target.size(); ++i) rpn_t[i] = static_cast<T>(s.rpn_target[i]);
  Var<T> rpn_reg = nn::smooth_l1_loss(out.rpn_deltas, rpn_t,
                                      std::span<const double>(s.rpn_target_weight), 1.0 / 9.0);
  Var<T> rpn = nn::add(rpn_cls, rpn_reg);

  Var<T> cls, loc;
  if (r > 0) {
    std::vector<double> wr(r, 1.0 / r);
    cls = nn::softmax_cross_entropy(out.logits, std::span<const int>(s.roi_label),
                                    std::span<const double>(wr));
    Tensor<T> tgt({r * c, 4});
    std::vector<double> wl(static_cast<std::size_t>(r) * c * 4, 0.0);
    for (int i = 0; i < r; ++i) {
      if (s.roi_label[i] == 0) continue;
      const std::size_t row = static_cast<std::size_t>(i) * c + (s.roi_label[i] - 1);
      for (int j = 0; j < 4; ++j) {
        tgt[row * 4 + j] = static_cast<T>(s.roi_target[i][j]);
        wl[row * 4 + j] = 1.0 / r;
      }
    }
    loc = nn::smooth_l1_loss(out.deltas, tgt, std::span<const double>(wl), 1.0);
  } else {
    cls = nn::constant(Tensor<T>({1}));
    loc = nn::constant(Tensor<T>({1}));
  }
  const int cm = out.meta_logits->value.dim(0);
  std::vector<double> wm(cm, cm > 0 ? 1.0 / cm : 0.0);
  Var<T> meta = nn::softmax_cross_entropy(out.meta_logits, meta_targets,
                                          std::span<const double>(wm), allowed);

  LossResult<T> res;
  res.total = nn::add(nn::add(nn::add(rpn, cls), loc), meta);
  res.breakdown.terms = {{"rpn", double(rpn->value[0])},
                         {"cls", double(cls->value[0])},
                         {"loc", double(loc->value[0])},
                         {"meta", double(meta->value[0])}};
  res.breakdown.total = double(res.total->value[0]);
  return res;
}

template <typename T>
DetectionStep<T> detection_step(const det::DetectorNet<T>& net, const Tensor<T>& images,
                                const Tensor<T>& class_images,
                                std::span<const ImageTargets> targets,
                                std::span<const int> class_ids, std::mt19937_64& rng,
                                const DetectionSample* fixed, const SamplingConfig& sampling) {
  DetectionStep<T> step;
  Var<T> fm = net.backbone(nn::constant(images));
  det::RpnOutput<T> rpn = net.rpn(fm);
  step.sample = fixed ? *fixed
                      : sample_detection_targets(net.config(), rpn, targets, images.dim(3),
                                                 images.dim(2), sampling, rng);
  Var<T> g = net.class_features(nn::constant(class_images));
  if (g->value.dim(0) != static_cast<int>(class_ids.size())) {
    throw ShapeError("one class datum per training class is required");
  }
  DetectionOutputs<T> out;
  out.rpn_objectness = rpn.objectness;
  out.rpn_deltas = rpn.deltas;
  const int c = static_cast<int>(class_ids.size());
  if (!step.sample.rois.empty()) {
    det::RoiFeatures<T> rf = net.roi_features(fm, step.sample.rois);
    if (rf.skipped > 0) throw ShapeError("sampled RoIs must have area >= 1");
    det::HeadOutput<T> head = net.head(rf.features, g);
    out.logits = head.logits;
    out.deltas = head.deltas;
  } else {
    out.logits = nn::constant(Tensor<T>({0, c + 1}));
    out.deltas = nn::constant(Tensor<T>({0, 4}));
  }
  out.meta_logits = net.meta_logits(g);
  step.loss = detection_loss(out, step.sample, class_ids, class_ids);
  return step;
}

// --- viewpoint ---------------------------------------------------------------

template <typename T>
LossResult<T> viewpoint_loss(const vp::ViewpointOutput<T>& out,
                             std::span<const geom::Viewpoint> targets) {
  const int b = out.logits->value.dim(0);
  if (static_cast<int>(targets.size()) != b || out.logits->value.dim(1) != vp::kOutputs ||
      out.offsets->value.shape() != out.logits->value.shape()) {
    throw ShapeError("viewpoint_loss: outputs do not match the targets");
  }
  static const char* const kNames[vp::kAngles] = {"azi", "ele", "inp"};
  std::vector<geom::ViewpointCode> codes;
  for (const auto& v : targets) codes.push_back(geom::encode_angle_bins(v));
  LossResult<T> res;
  Var<T> total;
  const std::vector<double> wr(b, 1.0 / b);
  for (int a = 0; a < vp::kAngles; ++a) {
    std::vector<int> bins(b);
    Tensor<T> tgt({b, vp::kBins});
    std::vector<double> w(static_cast<std::size_t>(b) * vp::kBins, 0.0);
    for (int i = 0; i < b; ++i) {
      bins[i] = codes[i][a].bin;
      tgt[i * vp::kBins + bins[i]] = static_cast<T>(codes[i][a].offset);
      w[i * vp::kBins + bins[i]] = 1.0 / b;
    }
    Var<T> cls = nn::softmax_cross_entropy(
        nn::slice_cols(out.logits, a * vp::kBins, (a + 1) * vp::kBins), std::span<const int>(bins),
        std::span<const double>(wr));
    Var<T> reg = nn::smooth_l1_loss(
        nn::slice_cols(out.offsets, a * vp::kBins, (a + 1) * vp::kBins), tgt,
        std::span<const double>(w), 1.0);
    res.breakdown.terms.emplace_back(std::string("cls_") + kNames[a], double(cls->value[0]));
    res.breakdown.terms.emplace_back(std::string("reg_") + kNames[a], double(reg->value[0]));
    total = total ? nn::add(nn::add(total, cls), reg) : nn::add(cls, reg);
  }
  res.total = total;
  res.breakdown.total = double(total->value[0]);
  return res;
}

// --- training loops ------------------------------------------------------------

namespace {

// Cycles through a shuffled copy of each class's pool, reshuffling once
// every item has been used.
class PoolSampler {
 public:
  PoolSampler(const std::map<int, std::vector<synth::ObjectRef>>& pools, std::mt19937_64& rng)
      : pools_(pools), rng_(rng) {}

  synth::ObjectRef next(int cls) {
    auto& st = state_[cls];
    const auto& pool = pools_.at(cls);
    if (pool.empty()) throw EmptyClassError("empty class-data pool for class " + std::to_string(cls));
    if (st.pos >= st.order.size()) {
      st.order = pool;
      std::shuffle(st.order.begin(), st.order.end(), rng_);
      st.pos = 0;
    }
    return st.order[st.pos++];
  }

 private:
  struct State {
    std::vector<synth::ObjectRef> order;
    std::size_t pos = 0;
  };
  const std::map<int, std::vector<synth::ObjectRef>>& pools_;
  std::mt19937_64& rng_;
  std::map<int, State> state_;
};

template <typename T>
double clip_gradients(nn::ParamStore<T>& params, double max_norm, bool freeze_prefix,
                      const char* prefix) {
  double sq = 0.0;
  for (auto& [name, p] : params.items()) {
    if (freeze_prefix && name.rfind(prefix, 0) == 0) {
      p->grad = Tensor<T>();
      continue;
    }
    for (std::size_t i = 0; i < p->grad.size(); ++i) sq += double(p->grad[i]) * p->grad[i];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& [_, p] : params.items()) {
      for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= f;
    }
  }
  return norm;
}

template <typename T>
[[noreturn]] void diverged(const nn::ParamStore<T>& params, const TrainConfig& cfg, int step,
                           const LossBreakdown& loss) {
  std::string msg = "non-finite loss at step " + std::to_string(step) + ":";
  for (const auto& [n, v] : loss.terms) msg += " " + n + "=" + std::to_string(v);
  if (!cfg.snapshot_dir.empty()) {
    io::write_archive(params.export_archive(), io::fs::path(cfg.snapshot_dir) / "diverged.bin");
    msg += " (parameters written to " + cfg.snapshot_dir + "/diverged.bin)";
  }
  throw DivergenceError(msg);
}

bool finite(const LossBreakdown& b) {
  if (!std::isfinite(b.total)) return false;
  for (const auto& [_, v] : b.terms) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void print_epoch(std::ostream* os, const char* task, int epoch, double lr,
                 const std::vector<StepRecord>& steps, std::size_t from, double secs) {
  if (!os || from >= steps.size()) return;
  const auto& names = steps[from].loss.terms;
  std::vector<double> mean(names.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = from; i < steps.size(); ++i) {
    for (std::size_t k = 0; k < names.size(); ++k) mean[k] += steps[i].loss.terms[k].second;
    total += steps[i].loss.total;
  }
  const double n = static_cast<double>(steps.size() - from);
  *os << task << " epoch " << std::setw(3) << epoch << "  lr " << std::setprecision(3) << lr;
  for (std::size_t k = 0; k < names.size(); ++k) {
    *os << "  " << names[k].first << " " << std::fixed << std::setprecision(4) << mean[k] / n;
  }
  *os << "  total " << total / n << std::defaultfloat << "  (" << std::setprecision(1)
      << std::fixed << secs << "s)" << std::defaultfloat << std::setprecision(6) << "\n";
  os->flush();
}

}  // namespace

template <typename T>
TrainLog run_detection_phase(det::DetectorNet<T>& net, const synth::Dataset& dataset,
                             const synth::Episode& episode, const TrainConfig& cfg,
                             std::ostream* progress) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const auto& scenes = dataset.split(episode.split);
  const std::vector<int>& classes = episode.classes;
  std::map<int, int> column;
  for (std::size_t k = 0; k < classes.size(); ++k) column[classes[k]] = static_cast<int>(k);
  for (int c : classes) {
    if (c < 0 || c >= net.config().registry_size) {
      throw ConfigError("class " + std::to_string(c) + " outside the detector registry");
    }
  }

  std::mt19937_64 rng(synth::derive_seed(cfg.seed, 101));
  PoolSampler pools(episode.class_pool, rng);
  nn::Optimizer<T> opt(cfg.optimizer, net.params(), cfg.momentum, cfg.weight_decay);
  TrainLog log;
  std::set<synth::ObjectRef> supervised;
  const int stride = net.config().stride;
  std::vector<int> order(episode.scenes.size());
  std::iota(order.begin(), order.end(), 0);
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    const std::size_t epoch_from = log.steps.size();
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      std::vector<const synth::Image*> ims;
      std::vector<ImageTargets> targets;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& es = episode.scenes[order[i]];
        const auto& sc = scenes[es.scene];
        ims.push_back(&sc.image);
        ImageTargets t;
        for (int o : es.targets) {
          t.boxes.push_back(sc.objects[o].box);
          t.labels.push_back(column.at(sc.objects[o].cls));
          supervised.insert({es.scene, o});
        }
        for (int o : es.ignored) t.ignored.push_back(sc.objects[o].box);
        targets.push_back(std::move(t));
      }
      std::vector<synth::DetectionClassData> cds;
      for (int c : classes) {
        const synth::ObjectRef ref = pools.next(c);
        log.class_data_used[c].push_back(ref);
        cds.push_back(synth::build_detection_class_data(scenes[ref.scene], ref.object));
      }
      std::vector<const synth::Image*> cims;
      for (const auto& cd : cds) cims.push_back(&cd.image_with_mask);

      net.params().zero_grad();
      auto res = detection_step<T>(net, det::image_batch<T>(ims, stride),
                                   det::image_batch<T>(cims, stride), targets, classes, rng);
      if (!finite(res.loss.breakdown)) diverged(net.params(), cfg, step, res.loss.breakdown);
      if (res.sample.positive_rois == 0) ++log.zero_positive_batches;
      nn::backward(res.loss.total);
      clip_gradients(net.params(), cfg.grad_clip, cfg.freeze_backbone, "backbone.");
      const double lr = cfg.lr_at(epoch, step);
      opt.step(lr);
      log.steps.push_back({step, epoch, lr, res.loss.breakdown});
      ++step;
    }
    print_epoch(progress, "detection", epoch, cfg.lr_at(epoch, step), log.steps, epoch_from,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count());
  }
  log.supervised.assign(supervised.begin(), supervised.end());
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return log;
}

template <typename T>
TrainLog run_viewpoint_phase(vp::ViewpointNet<T>& net, const synth::Dataset& dataset,
                             const synth::Episode& episode, const TrainConfig& cfg,
                             std::ostream* progress) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const auto& scenes = dataset.split(episode.split);
  std::map<int, std::vector<const synth::ShapePointCloud*>> clouds;
  for (int c : episode.classes) {
    clouds[c] = dataset.clouds_of(c);
    if (clouds[c].empty()) {
      throw EmptyClassError("no 3D models for class " + dataset.class_info(c).name);
    }
  }
  std::vector<synth::ObjectRef> items = episode.instances();
  std::mt19937_64 rng(synth::derive_seed(cfg.seed, 202));
  nn::Optimizer<T> opt(cfg.optimizer, net.params(), cfg.momentum, cfg.weight_decay);
  TrainLog log;
  log.supervised = items;
  const int crop = net.config().crop_size;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    const std::size_t epoch_from = log.steps.size();
    std::shuffle(items.begin(), items.end(), rng);
    for (std::size_t b0 = 0; b0 < items.size(); b0 += cfg.batch_size) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
      const std::size_t b1 = std::min(items.size(), b0 + cfg.batch_size);
      const int b = static_cast<int>(b1 - b0);
      Tensor<T> crops({b, 3, crop, crop});
      std::vector<geom::Viewpoint> targets;
      std::vector<int> row_of;
      std::map<int, int> class_row;
      std::vector<Var<T>> class_feats;
      const std::size_t per = static_cast<std::size_t>(3) * crop * crop;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& obj = scenes[items[i].scene].objects[items[i].object];
        Tensor<T> ct = vp::crop_tensor<T>(scenes[items[i].scene].image, obj.box, crop);
        std::copy(ct.values().begin(), ct.values().end(), crops.data() + (i - b0) * per);
        targets.push_back(obj.viewpoint);
        auto it = class_row.find(obj.cls);
        if (it == class_row.end()) {
          const auto& cs = clouds.at(obj.cls);
          const auto* pc = cs[std::uniform_int_distribution<std::size_t>(0, cs.size() - 1)(rng)];
          class_feats.push_back(net.encode_points(nn::constant(vp::points_tensor<T>(*pc))));
          it = class_row.emplace(obj.cls, static_cast<int>(class_feats.size()) - 1).first;
        }
        row_of.push_back(it->second);
      }
      net.params().zero_grad();
      Var<T> f_qry = net.encode_crops(nn::constant(std::move(crops)));
      Var<T> f_cls = nn::index_rows(nn::concat_rows(std::span<const Var<T>>(class_feats)),
                                    std::span<const int>(row_of));
      auto res = viewpoint_loss(net.predict(f_qry, f_cls), std::span<const geom::Viewpoint>(targets));
      if (!finite(res.breakdown)) diverged(net.params(), cfg, step, res.breakdown);
      nn::backward(res.total);
      clip_gradients(net.params(), cfg.grad_clip, cfg.freeze_backbone, "encoder.");
      const double lr = cfg.lr_at(epoch, step);
      opt.step(lr);
      log.steps.push_back({step, epoch, lr, res.breakdown});
      ++step;
    }
    print_epoch(progress, "viewpoint", epoch, cfg.lr_at(epoch, step), log.steps, epoch_from,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count());
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return log;
}

void write_metrics_csv(const TrainLog& log, const std::string& path) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "step,epoch,lr";
  if (!log.steps.empty()) {
    for (const auto& [n, _] : log.steps.front().loss.terms) os << "," << n;
  }
  os << ",total\n";
  for (const auto& s : log.steps) {
    os << s.step << "," << s.epoch << "," << s.lr;
    for (const auto& [_, v] : s.loss.terms) os << "," << v;
    os << "," << s.loss.total << "\n";
  }
  io::write_text(path, os.str());
}

template <typename T>
std::map<int, agg::FeatureVector> build_inference_class_features(const det::DetectorNet<T>& net,
                                                                 const synth::Dataset& dataset,
                                                                 const synth::Episode& episode) {
  const auto& scenes = dataset.split(episode.split);
  std::map<int, agg::FeatureVector> out;
  for (int c : episode.classes) {
    auto it = episode.class_pool.find(c);
    if (it == episode.class_pool.end() || it->second.empty()) {
      throw EmptyClassError("no class data for class " + dataset.class_info(c).name);
    }
    std::vector<agg::FeatureVector> feats;
    for (const auto& ref : it->second) {
      feats.push_back(det::encode_class_detection(
          net, synth::build_detection_class_data(scenes[ref.scene], ref.object)));
    }
    out[c] = agg::average_class_features(feats);
  }
  return out;
}

template <typename T>
std::map<int, agg::FeatureVector> build_inference_class_features(const vp::ViewpointNet<T>& net,
                                                                 const synth::Dataset& dataset,
                                                                 std::span<const int> classes) {
  std::map<int, agg::FeatureVector> out;
  for (int c : classes) {
    const auto clouds = dataset.clouds_of(c);
    if (clouds.empty()) throw EmptyClassError("no 3D models for class " + std::to_string(c));
    out[c] = vp::build_class_shape_feature(net, std::span<const synth::ShapePointCloud* const>(clouds));
  }
  return out;
}

#define FSDV_TRAIN_INSTANTIATE(T)                                                              \
  template DetectionSample sample_detection_targets<T>(                                        \
      const det::DetectorConfig&, const det::RpnOutput<T>&, std::span<const ImageTargets>, int, \
      int, const SamplingConfig&, std::mt19937_64&);                                           \
  template LossResult<T> detection_loss<T>(const DetectionOutputs<T>&, const DetectionSample&, \
                                           std::span<const int>, std::span<const int>);        \
  template DetectionStep<T> detection_step<T>(                                                 \
      const det::DetectorNet<T>&, const Tensor<T>&, const Tensor<T>&,                          \
      std::span<const ImageTargets>, std::span<const int>, std::mt19937_64&,                   \
      const DetectionSample*, const SamplingConfig&);                                          \
  template LossResult<T> viewpoint_loss<T>(const vp::ViewpointOutput<T>&,                      \
                                           std::span<const geom::Viewpoint>);                  \
  template std::map<int, agg::FeatureVector> build_inference_class_features<T>(                \
      const det::DetectorNet<T>&, const synth::Dataset&, const synth::Episode&);               \
  template std::map<int, agg::FeatureVector> build_inference_class_features<T>(                \
      const vp::ViewpointNet<T>&, const synth::Dataset&, std::span<const int>);               \
  template TrainLog run_detection_phase<T>(det::DetectorNet<T>&, const synth::Dataset&,       \
                                           const synth::Episode&, const TrainConfig&,          \
                                           std::ostream*);                                     \
  template TrainLog run_viewpoint_phase<T>(vp::ViewpointNet<T>&, const synth::Dataset&,       \
                                           const synth::Episode&, const TrainConfig&,          \
                                           std::ostream*);

FSDV_TRAIN_INSTANTIATE(float)
FSDV_TRAIN_INSTANTIATE(double)

}  // namespace fsdv::train
