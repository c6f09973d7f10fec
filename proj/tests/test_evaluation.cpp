#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "fsdv/error.hpp"
#include "fsdv/evaluation.hpp"
#include "oracles.hpp"

using namespace fsdv;
using eval::DetectionRecord;
using eval::GroundTruth;
using geom::BoundingBox;

namespace {

using oracle::reference_match;

// For every recall level reached, the best precision at any rank reaching at
// least that recall, summed over recall increments.
double reference_ap(const std::vector<int>& tp_in_rank_order, int num_gt) {
  const int n = static_cast<int>(tp_in_rank_order.size());
  std::vector<double> prec(n), rec(n);
  int tp = 0;
  for (int i = 0; i < n; ++i) {
    tp += tp_in_rank_order[i];
    prec[i] = double(tp) / (i + 1);
    rec[i] = double(tp) / num_gt;
  }
  std::set<double> levels(rec.begin(), rec.end());
  double ap = 0.0, prev = 0.0;
  for (double r : levels) {
    if (r == 0.0) continue;
    double best = 0.0;
    for (int i = 0; i < n; ++i)
      if (rec[i] >= r) best = std::max(best, prec[i]);
    ap += (r - prev) * best;
    prev = r;
  }
  return ap;
}

std::vector<double> descending(int n) {
  std::vector<double> c(n);
  for (int i = 0; i < n; ++i) c[i] = 1.0 - 0.1 * i;
  return c;
}

}  // namespace

TEST(Match, WorkedExamples) {
  const std::vector<GroundTruth> gts{{"a", 1, {0, 0, 10, 10}, {}}};
  const std::vector<DetectionRecord> one{{"a", 1, {0, 0, 10, 10}, 0.9, {}}};
  EXPECT_EQ(eval::match_detections(one, gts, 0.5), (std::vector<int>{0}));
  const std::vector<DetectionRecord> two{{"a", 1, {0, 0, 10, 10}, 0.9, {}}, {"a", 1, {0, 0, 10, 11}, 0.8, {}}};
  EXPECT_EQ(eval::match_detections(two, gts, 0.5), (std::vector<int>{0, -1}));
  const std::vector<DetectionRecord> wrong{{"b", 1, {0, 0, 10, 10}, 0.9, {}}, {"a", 2, {0, 0, 10, 10}, 0.9, {}}};
  EXPECT_EQ(eval::match_detections(wrong, gts, 0.5), (std::vector<int>{-1, -1}));
}

TEST(Match, MatchesExhaustiveGreedyReference) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> pos(0, 40), size(6, 24), jitter(-4, 4), conf(0, 1);
  std::uniform_int_distribution<int> img(0, 2), cls(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<GroundTruth> gts;
    for (int g = 0; g < 10; ++g) {
      const double x = pos(rng), y = pos(rng);
      gts.push_back({"im" + std::to_string(img(rng)), cls(rng), {x, y, x + size(rng), y + size(rng)}, {}});
    }
    std::vector<DetectionRecord> dets;
    for (int d = 0; d < 20; ++d) {
      const auto& g = gts[rng() % gts.size()];
      dets.push_back({g.image_id, d % 5 ? g.cls : 1 - g.cls,
                      {g.box.x1 + jitter(rng), g.box.y1 + jitter(rng), g.box.x2 + jitter(rng), g.box.y2 + jitter(rng)},
                      conf(rng), {}});
    }
    std::vector<DetectionRecord> sorted;
    for (int i : eval::confidence_order(dets)) sorted.push_back(dets[i]);
    for (double thr : {0.3, 0.5, 0.75}) {
      EXPECT_EQ(eval::match_detections(sorted, gts, thr), reference_match(sorted, gts, thr)) << trial;
    }
  }
}

TEST(ConfidenceOrder, StableOnTies) {
  const std::vector<DetectionRecord> d{{"a", 0, {}, 0.5, {}}, {"a", 0, {}, 0.9, {}}, {"a", 0, {}, 0.5, {}}};
  EXPECT_EQ(eval::confidence_order(d), (std::vector<int>{1, 0, 2}));
}

TEST(Ap, TrivialCases) {
  const auto c = descending(3);
  EXPECT_DOUBLE_EQ(*eval::average_precision(c, std::vector<int>{0, 1, 2}, 3), 1.0);
  EXPECT_DOUBLE_EQ(*eval::average_precision(c, std::vector<int>{-1, -1, -1}, 3), 0.0);
  EXPECT_DOUBLE_EQ(*eval::average_precision({}, std::vector<int>{}, 2), 0.0);
  EXPECT_FALSE(eval::average_precision({}, std::vector<int>{}, 0).has_value());
  EXPECT_THROW(eval::average_precision(c, std::vector<int>{0}, 3), ShapeError);
}

TEST(Ap, HandCaseAgainstEnvelopeOracle) {
  // TP, FP, TP, FP, TP over 3 ground truths.
  const std::vector<int> m{0, -1, 1, -1, 2};
  const double ap = *eval::average_precision(descending(5), m, 3);
  EXPECT_NEAR(ap, reference_ap({1, 0, 1, 0, 1}, 3), 1e-12);
  EXPECT_NEAR(ap, (1.0 + 2.0 / 3.0 + 0.6) / 3.0, 1e-12);
}

TEST(Ap, RandomRankingsAgainstEnvelopeOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + rng() % 30;
    const int num_gt = 1 + rng() % 15;
    std::vector<int> flags, matches;
    int used = 0;
    for (int i = 0; i < n; ++i) {
      const bool tp = used < num_gt && rng() % 2;
      flags.push_back(tp);
      matches.push_back(tp ? used++ : -1);
    }
    EXPECT_NEAR(*eval::average_precision(descending(n), matches, num_gt), reference_ap(flags, num_gt), 1e-12);
  }
}

TEST(Ap, InvariantUnderMonotoneRescaling) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> c;
    std::vector<int> m;
    int used = 0;
    for (int i = 0; i < 25; ++i) {
      c.push_back(std::round(u(rng) * 10) / 10);  // ties included
      m.push_back(rng() % 3 ? used++ : -1);
    }
    std::vector<double> scaled;
    for (double v : c) scaled.push_back(std::exp(3.0 * v) - 7.0);
    EXPECT_EQ(*eval::average_precision(c, m, used + 2), *eval::average_precision(scaled, m, used + 2));
    EXPECT_EQ(*eval::average_precision(c, m, used + 2, eval::Interpolation::kElevenPoint),
              *eval::average_precision(scaled, m, used + 2, eval::Interpolation::kElevenPoint));
  }
}

TEST(Ap, ElevenPointHandCase) {
  // Precision envelope 1 up to recall 1/2, 2/3 up to 1.
  const std::vector<int> m{0, -1, 1};
  // r = 0..0.5 -> 1 (6 points), 0.6..1.0 -> 2/3 (5 points)
  EXPECT_NEAR(*eval::average_precision(descending(3), m, 2, eval::Interpolation::kElevenPoint),
              (6.0 + 5.0 * 2.0 / 3.0) / 11.0, 1e-12);
}

TEST(EvaluateDetection, PerfectAndExcludedClasses) {
  std::vector<GroundTruth> gts;
  std::vector<DetectionRecord> dets;
  for (int i = 0; i < 4; ++i) {
    const BoundingBox b{10.0 * i, 5, 10.0 * i + 8, 13};
    gts.push_back({"img", 0, b, {}});
    dets.push_back({"img", 0, b, 0.9 - 0.1 * i, {}});
  }
  const std::vector<int> classes{0, 1};
  const auto m = eval::evaluate_detection(dets, gts, classes);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_DOUBLE_EQ(*m[0].ap50, 1.0);
  EXPECT_DOUBLE_EQ(*m[0].ap, 1.0);
  EXPECT_DOUBLE_EQ(*m[0].recall50, 1.0);
  EXPECT_DOUBLE_EQ(*m[0].ar1, 0.25);
  EXPECT_DOUBLE_EQ(*m[0].ar100, 1.0);
  EXPECT_EQ(m[0].num_gt, 4);
  EXPECT_FALSE(m[1].ap50.has_value());
  EXPECT_EQ(m[1].num_gt, 0);
}

TEST(EvaluateDetection, Pure) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 50);
  std::vector<GroundTruth> gts;
  std::vector<DetectionRecord> dets;
  for (int i = 0; i < 30; ++i) {
    const double x = u(rng), y = u(rng);
    gts.push_back({"i" + std::to_string(i % 4), i % 3, {x, y, x + 12, y + 12}, {}});
    dets.push_back({"i" + std::to_string(i % 4), i % 3, {x + 2, y - 1, x + 13, y + 12}, u(rng) / 50, {}});
  }
  const std::vector<int> classes{0, 1, 2};
  const auto a = eval::evaluate_detection(dets, gts, classes);
  const auto b = eval::evaluate_detection(dets, gts, classes);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].ap50, b[k].ap50);
    EXPECT_EQ(a[k].ap, b[k].ap);
    EXPECT_EQ(a[k].ar10, b[k].ar10);
  }
}

TEST(ViewpointMetrics, Examples) {
  const std::vector<geom::Viewpoint> g{{10, 0, 0}, {200, 0, 0}};
  EXPECT_EQ(eval::viewpoint_metrics(g, g)->acc30, 1.0);
  EXPECT_EQ(eval::viewpoint_metrics(g, g)->med_err, 0.0);
  const std::vector<geom::Viewpoint> p{{20, 0, 0}, {250, 0, 0}};
  const auto m = *eval::viewpoint_metrics(p, g);
  EXPECT_NEAR(m.acc30, 0.5, 1e-12);
  EXPECT_NEAR(m.med_err, 30.0, 1e-9);
  EXPECT_EQ(m.count, 2);
  const std::vector<geom::Viewpoint> at30{{40, 0, 0}}, at0{{10, 0, 0}};
  EXPECT_NEAR(eval::viewpoint_metrics(at30, at0)->med_err, 30.0, 1e-9);
  EXPECT_EQ(eval::viewpoint_metrics(std::vector<geom::Viewpoint>{{30, 0, 0}},
                                    std::vector<geom::Viewpoint>{{0, 0, 0}})->acc30, 0.0);
  EXPECT_FALSE(eval::viewpoint_metrics({}, {}).has_value());
  EXPECT_THROW(eval::viewpoint_metrics(p, at0), ShapeError);
}

TEST(ViewpointMetrics, PermutationInvariant) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> a(0, 360), e(-60, 60);
  std::vector<geom::Viewpoint> p, g;
  for (int i = 0; i < 101; ++i) {
    p.push_back({a(rng), e(rng), e(rng)});
    g.push_back({a(rng), e(rng), e(rng)});
  }
  const auto ref = *eval::viewpoint_metrics(p, g);
  std::vector<int> idx(101);
  for (int i = 0; i < 101; ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<geom::Viewpoint> p2, g2;
  for (int i : idx) p2.push_back(p[i]), g2.push_back(g[i]);
  const auto m = *eval::viewpoint_metrics(p2, g2);
  EXPECT_EQ(m.acc30, ref.acc30);
  EXPECT_EQ(m.med_err, ref.med_err);
}

TEST(Joint, PerfectAndAllWrong) {
  std::vector<GroundTruth> gts;
  std::vector<DetectionRecord> good, bad;
  for (int i = 0; i < 3; ++i) {
    const BoundingBox b{20.0 * i, 0, 20.0 * i + 15, 15};
    const geom::Viewpoint v{30.0 * i, 10, 0};
    gts.push_back({"x", 4, b, v});
    good.push_back({"x", 4, b, 0.9, v});
    bad.push_back({"x", 4, b, 0.9, {30.0 * i + 90, 10, 0}});
  }
  const std::vector<int> classes{4};
  EXPECT_DOUBLE_EQ(*eval::joint_eval(good, gts, classes)[0].accuracy, 1.0);
  EXPECT_DOUBLE_EQ(*eval::joint_eval(bad, gts, classes)[0].accuracy, 0.0);
}

TEST(Joint, SixObjectsOneMissOneBadViewpoint) {
  std::vector<GroundTruth> gts;
  std::vector<DetectionRecord> dets;
  for (int i = 0; i < 6; ++i) {
    const BoundingBox b{0, 0, 20, 20};
    const geom::Viewpoint v{50.0 * i, 5, 0};
    const std::string img = "s" + std::to_string(i);
    gts.push_back({img, 2, b, v});
    if (i == 1) continue;  // missed box
    dets.push_back({img, 2, {1, 1, 20, 21}, 0.5 + 0.05 * i, i == 4 ? geom::Viewpoint{50.0 * i + 45, 5, 0} : v});
  }
  dets.push_back({"s0", 2, {60, 60, 80, 80}, 0.99, {0, 5, 0}});  // stray false positive
  const std::vector<int> classes{2};
  const auto r = eval::joint_eval(dets, gts, classes)[0];
  EXPECT_EQ(r.num_gt, 6);
  EXPECT_EQ(r.detected, 5);
  EXPECT_EQ(r.correct, 4);
  EXPECT_NEAR(*r.accuracy, 4.0 / 6.0, 1e-12);
}

TEST(Joint, NeverExceedsRecall) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> pos(0, 40), jitter(-5, 5), conf(0, 1), ang(0, 360);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<GroundTruth> gts;
    std::vector<DetectionRecord> dets;
    for (int g = 0; g < 8; ++g) {
      const double x = pos(rng), y = pos(rng);
      gts.push_back({"i" + std::to_string(g % 3), g % 2, {x, y, x + 15, y + 15}, {ang(rng), 0, 0}});
    }
    for (int d = 0; d < 12; ++d) {
      const auto& g = gts[rng() % gts.size()];
      dets.push_back({g.image_id, g.cls, {g.box.x1 + jitter(rng), g.box.y1, g.box.x2, g.box.y2 + jitter(rng)},
                      conf(rng), d % 2 ? g.viewpoint : geom::Viewpoint{ang(rng), 0, 0}});
    }
    const std::vector<int> classes{0, 1};
    const auto joint = eval::joint_eval(dets, gts, classes);
    const auto detm = eval::evaluate_detection(dets, gts, classes);
    for (int k = 0; k < 2; ++k) {
      if (!joint[k].accuracy) continue;
      EXPECT_LE(*joint[k].accuracy, *detm[k].recall50 + 1e-12);
      EXPECT_LE(joint[k].correct, joint[k].detected);
    }
  }
}

TEST(Report, MeanRowAndSerialization) {
  eval::EvalReport r;
  r.title = "t";
  r.columns = {"A", "B"};
  r.rows = {{"x", {0.5, std::nullopt}}, {"y", {0.25, 3.0}}, {"z", {1.0, 5.0}}};
  const auto mean = r.mean_row();
  EXPECT_NEAR(*mean.values[0], (0.5 + 0.25 + 1.0) / 3.0, 1e-12);
  EXPECT_NEAR(*mean.values[1], 4.0, 1e-12);
  const auto j = r.to_json();
  EXPECT_EQ(j["rows"].size(), 3u);
  EXPECT_TRUE(j["rows"][0]["values"]["B"].is_null());
  EXPECT_NEAR(j["mean"]["values"]["B"].get<double>(), 4.0, 1e-12);
  EXPECT_NE(r.to_markdown().find("| - |"), std::string::npos);
  EXPECT_NE(r.to_csv().find("0.583333"), std::string::npos);
}
