#include "fsdv/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "fsdv/error.hpp"

namespace fsdv::eval {

std::vector<int> match_detections(std::span<const DetectionRecord> dets,
                                  std::span<const GroundTruth> gts, double iou_thresh) {
  std::map<std::pair<std::string, int>, std::vector<int>> groups;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    groups[{gts[g].image_id, gts[g].cls}].push_back(static_cast<int>(g));
  }
  std::vector<char> taken(gts.size(), 0);
  std::vector<int> out(dets.size(), -1);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    auto it = groups.find({dets[i].image_id, dets[i].cls});
    if (it == groups.end()) continue;
    int best = -1;
    double best_iou = iou_thresh;
    for (int g : it->second) {
      if (taken[g]) continue;
      const double iou = geom::box_iou(dets[i].box, gts[g].box);
      if (iou >= best_iou && (best < 0 || iou > best_iou)) {
        best = g;
        best_iou = iou;
      }
    }
    if (best >= 0) {
      taken[best] = 1;
      out[i] = best;
    }
  }
  return out;
}

std::optional<double> average_precision(std::span<const double> confidences,
                                        std::span<const int> matches, int num_gt,
                                        Interpolation interp) {
  if (confidences.size() != matches.size()) {
    throw ShapeError("average_precision: confidences and matches differ in length");
  }
  if (num_gt <= 0) return std::nullopt;
  std::vector<int> order(confidences.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return confidences[a] > confidences[b]; });
  const std::size_t n = order.size();
  std::vector<double> precision(n), recall(n);
  int tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += matches[order[i]] >= 0;
    precision[i] = static_cast<double>(tp) / (i + 1);
    recall[i] = static_cast<double>(tp) / num_gt;
  }
  // Envelope: best precision at any rank with at least this recall.
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  if (interp == Interpolation::kElevenPoint) {
    double s = 0.0;
    for (int k = 0; k <= 10; ++k) {
      const double r = k / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (recall[i] >= r - 1e-12) {
          p = precision[i];
          break;
        }
      }
      s += p;
    }
    return s / 11.0;
  }
  double ap = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return ap;
}

std::vector<int> confidence_order(std::span<const DetectionRecord> dets) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[a].confidence > dets[b].confidence; });
  return order;
}

namespace {

std::vector<DetectionRecord> sorted_of_class(std::span<const DetectionRecord> dets, int cls) {
  std::vector<DetectionRecord> out;
  for (const auto& d : dets) {
    if (d.cls == cls) out.push_back(d);
  }
  std::vector<DetectionRecord> sorted;
  for (int i : confidence_order(out)) sorted.push_back(out[i]);
  return sorted;
}

std::vector<GroundTruth> gts_of_class(std::span<const GroundTruth> gts, int cls) {
  std::vector<GroundTruth> out;
  for (const auto& g : gts) {
    if (g.cls == cls) out.push_back(g);
  }
  return out;
}

double recall_at(std::span<const DetectionRecord> sorted, std::span<const GroundTruth> gts,
                 double thr) {
  const auto m = match_detections(sorted, gts, thr);
  return static_cast<double>(std::count_if(m.begin(), m.end(), [](int v) { return v >= 0; })) /
         gts.size();
}

}  // namespace

std::vector<ClassDetectionMetrics> evaluate_detection(std::span<const DetectionRecord> dets,
                                                      std::span<const GroundTruth> gts,
                                                      std::span<const int> classes,
                                                      Interpolation interp) {
  std::vector<ClassDetectionMetrics> out;
  for (int c : classes) {
    ClassDetectionMetrics m;
    m.cls = c;
    const auto d = sorted_of_class(dets, c);
    const auto g = gts_of_class(gts, c);
    m.num_gt = static_cast<int>(g.size());
    m.num_dets = static_cast<int>(d.size());
    if (!g.empty()) {
      std::vector<double> conf;
      for (const auto& r : d) conf.push_back(r.confidence);
      double ap_sum = 0.0;
      for (int k = 0; k < 10; ++k) {
        const double thr = 0.5 + 0.05 * k;
        const auto match = match_detections(d, g, thr);
        const double ap = *average_precision(conf, match, m.num_gt, interp);
        if (k == 0) {
          m.ap50 = ap;
          m.recall50 = recall_at(d, g, thr);
        }
        ap_sum += ap;
      }
      m.ap = ap_sum / 10.0;
      // AR@k: top-k detections per image of this class, recall averaged
      // over the same IoU thresholds.
      for (int cap : {1, 10, 100}) {
        std::map<std::string, int> seen;
        std::vector<DetectionRecord> kept;
        for (const auto& r : d) {
          if (seen[r.image_id]++ < cap) kept.push_back(r);
        }
        double s = 0.0;
        for (int k = 0; k < 10; ++k) s += recall_at(kept, g, 0.5 + 0.05 * k);
        (cap == 1 ? m.ar1 : cap == 10 ? m.ar10 : m.ar100) = s / 10.0;
      }
    }
    out.push_back(m);
  }
  return out;
}

namespace {

// Strict bound; errors within 1e-9 degrees of 30 count as exactly 30.
bool within_30(double err_deg) { return err_deg < 30.0 - 1e-9; }

}  // namespace

std::optional<ViewpointMetrics> viewpoint_metrics(std::span<const geom::Viewpoint> preds,
                                                  std::span<const geom::Viewpoint> gts) {
  if (preds.size() != gts.size()) throw ShapeError("viewpoint_metrics: length mismatch");
  if (preds.empty()) return std::nullopt;
  std::vector<double> err;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    err.push_back(geom::rotation_error_deg(preds[i], gts[i]));
  }
  std::sort(err.begin(), err.end());
  ViewpointMetrics m;
  m.count = static_cast<int>(err.size());
  m.acc30 = static_cast<double>(std::count_if(err.begin(), err.end(),
                                              [](double e) { return within_30(e); })) /
            err.size();
  const std::size_t n = err.size();
  m.med_err = n % 2 ? err[n / 2] : 0.5 * (err[n / 2 - 1] + err[n / 2]);
  return m;
}

std::vector<JointClassResult> joint_eval(std::span<const DetectionRecord> dets,
                                         std::span<const GroundTruth> gts,
                                         std::span<const int> classes) {
  std::vector<JointClassResult> out;
  for (int c : classes) {
    JointClassResult r;
    r.cls = c;
    const auto d = sorted_of_class(dets, c);
    const auto g = gts_of_class(gts, c);
    r.num_gt = static_cast<int>(g.size());
    const auto match = match_detections(d, g, 0.5);
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (match[i] < 0) continue;
      ++r.detected;
      if (within_30(geom::rotation_error_deg(d[i].viewpoint, g[match[i]].viewpoint))) ++r.correct;
    }
    if (r.num_gt > 0) r.accuracy = static_cast<double>(r.correct) / r.num_gt;
    out.push_back(r);
  }
  return out;
}

EvalReport::Row EvalReport::mean_row() const {
  Row m{"mean", std::vector<std::optional<double>>(columns.size())};
  for (std::size_t k = 0; k < columns.size(); ++k) {
    double s = 0.0;
    int n = 0;
    for (const auto& r : rows) {
      if (k < r.values.size() && r.values[k]) {
        s += *r.values[k];
        ++n;
      }
    }
    if (n > 0) m.values[k] = s / n;
  }
  return m;
}

Json EvalReport::to_json() const {
  Json j{{"title", title}, {"columns", columns}, {"rows", Json::array()}};
  auto row_json = [&](const Row& r) {
    Json v = Json::object();
    for (std::size_t k = 0; k < columns.size(); ++k) {
      v[columns[k]] = r.values[k] ? Json(*r.values[k]) : Json(nullptr);
    }
    return Json{{"label", r.label}, {"values", v}};
  };
  for (const auto& r : rows) j["rows"].push_back(row_json(r));
  j["mean"] = row_json(mean_row());
  j["config"] = config;
  return j;
}

namespace {

std::string fmt(const std::optional<double>& v, int precision) {
  if (!v) return "";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

}  // namespace

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "label";
  for (const auto& c : columns) os << "," << c;
  os << "\n";
  auto put = [&](const Row& r) {
    os << r.label;
    for (const auto& v : r.values) os << "," << fmt(v, 6);
    os << "\n";
  };
  for (const auto& r : rows) put(r);
  put(mean_row());
  return os.str();
}

std::string EvalReport::to_markdown() const {
  std::ostringstream os;
  if (!title.empty()) os << "### " << title << "\n\n";
  os << "| class |";
  for (const auto& c : columns) os << " " << c << " |";
  os << "\n|---|";
  for (std::size_t k = 0; k < columns.size(); ++k) os << "---:|";
  os << "\n";
  auto put = [&](const Row& r) {
    os << "| " << r.label << " |";
    for (const auto& v : r.values) os << " " << (v ? fmt(v, 3) : "-") << " |";
    os << "\n";
  };
  for (const auto& r : rows) put(r);
  put(mean_row());
  return os.str();
}

}  // namespace fsdv::eval
