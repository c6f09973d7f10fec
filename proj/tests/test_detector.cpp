#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fsdv/detector.hpp"
#include "fsdv/error.hpp"
#include "oracles.hpp"

using namespace fsdv;
using geom::BoundingBox;

namespace {

using oracle::reference_nms;

synth::Image noise_image(int h, int w, int c, std::uint64_t seed) {
  synth::Image img(h, w, c);
  std::mt19937_64 rng(seed);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
  if (c == 4) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) img.pixels[img.index(y, x, 3)] = (x > 10 && y > 12) ? 255 : 0;
  }
  return img;
}

nn::Var<double> roi_rows(const det::DetectorNet<double>& net, int rows, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  nn::Tensor<double> t({rows, net.config().feature_dim()});
  for (auto& v : t.values()) v = d(rng);
  return nn::constant(t);
}

agg::FeatureVector random_feature(int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  agg::FeatureVector f(dim);
  for (auto& v : f) v = d(rng);
  return f;
}

}  // namespace

TEST(Backbone, FeatureMapIsCeilOfStride) {
  det::DetectorNet<double> net({}, 0);
  for (auto [h, w] : {std::pair{96, 96}, {50, 70}, {16, 33}}) {
    const auto x = det::image_tensor<double>(noise_image(h, w, 3, 1), 16);
    const auto fm = net.backbone(nn::constant(x));
    EXPECT_EQ(fm->value.dim(1), 128);
    EXPECT_EQ(fm->value.dim(2), (h + 15) / 16);
    EXPECT_EQ(fm->value.dim(3), (w + 15) / 16);
  }
}

TEST(Backbone, PureAndRejectsBadShapes) {
  det::DetectorNet<double> net({}, 0);
  const auto x = nn::constant(det::image_tensor<double>(noise_image(96, 96, 3, 2), 16));
  EXPECT_EQ(net.backbone(x)->value.values(), net.backbone(x)->value.values());
  EXPECT_THROW(net.backbone(nn::constant(nn::Tensor<double>({1, 3, 20, 32}))), ShapeError);
  EXPECT_THROW(net.backbone(nn::constant(nn::Tensor<double>({1, 2, 32, 32}))), ShapeError);
}

TEST(ImageTensor, CenteredRgbMaskAndZeroPadding) {
  auto img = noise_image(20, 18, 4, 3);
  const auto t = det::image_tensor<double>(img, 16);
  ASSERT_EQ(t.shape(), (std::vector<int>{1, 4, 32, 32}));
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const bool inside = y < 20 && x < 18;
      for (int c = 0; c < 4; ++c) {
        const double v = t[(c * 32 + y) * 32 + x];
        if (!inside) ASSERT_EQ(v, 0.0);
        else if (c < 3) ASSERT_DOUBLE_EQ(v, img.value(y, x, c) - 0.5);
        else ASSERT_EQ(v, img.value(y, x, 3) > 0.5 ? 1.0 : 0.0);
      }
    }
  }
}

TEST(Anchors, CountCentersAndShapes) {
  const det::DetectorConfig cfg;
  const auto a = det::generate_anchors(6, 6, cfg);
  ASSERT_EQ(a.size(), 324u);
  EXPECT_EQ(a, det::generate_anchors(6, 6, cfg));
  const int na = cfg.anchors_per_cell();
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 6; ++x) {
      for (std::size_t s = 0; s < cfg.anchor_sizes.size(); ++s) {
        for (std::size_t r = 0; r < cfg.anchor_ratios.size(); ++r) {
          const auto& b = a[(y * 6 + x) * na + s * cfg.anchor_ratios.size() + r];
          EXPECT_NEAR(0.5 * (b.x1 + b.x2), (x + 0.5) * 16, 1e-9);
          EXPECT_NEAR(0.5 * (b.y1 + b.y2), (y + 0.5) * 16, 1e-9);
          EXPECT_NEAR(b.area(), cfg.anchor_sizes[s] * cfg.anchor_sizes[s], 1e-9);
          EXPECT_NEAR(b.height() / b.width(), cfg.anchor_ratios[r], 1e-9);
        }
      }
    }
  }
}

TEST(Nms, WorkedExamples) {
  const std::vector<BoundingBox> same{{0, 0, 10, 10}, {0, 0, 10, 10}};
  const std::vector<double> s{0.8, 0.9};
  EXPECT_EQ(det::nms(same, s, 0.5), (std::vector<int>{1}));
  const std::vector<BoundingBox> apart{{0, 0, 10, 10}, {20, 0, 30, 10}, {40, 40, 50, 50}};
  const std::vector<double> s3{0.1, 0.7, 0.4};
  EXPECT_EQ(det::nms(apart, s3, 0.3), (std::vector<int>{1, 2, 0}));
  const std::vector<double> tied{0.5, 0.5};
  EXPECT_EQ(det::nms(same, tied, 0.5), (std::vector<int>{0}));
}

TEST(Nms, MatchesQuadraticReference) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(0, 80), size(4, 30), score(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<BoundingBox> boxes;
    std::vector<double> scores;
    for (int i = 0; i < 50; ++i) {
      const double x = pos(rng), y = pos(rng);
      boxes.push_back({x, y, x + size(rng), y + size(rng)});
      // coarse scores force ties
      scores.push_back(std::round(score(rng) * 20) / 20);
    }
    for (double thr : {0.3, 0.5, 0.7}) {
      EXPECT_EQ(det::nms(boxes, scores, thr), reference_nms(boxes, scores, thr)) << trial;
    }
  }
}

TEST(Proposals, ClippedSortedAndCapped) {
  const det::DetectorConfig cfg;
  const auto anchors = det::generate_anchors(6, 6, cfg);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> d(0, 0.6);
  std::vector<double> obj;
  std::vector<geom::BoxDelta> deltas;
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    obj.push_back(d(rng));
    deltas.push_back({d(rng), d(rng), d(rng), d(rng)});
  }
  const auto props = det::generate_proposals(anchors, obj, deltas, 96, 96, 40, 0.7);
  ASSERT_FALSE(props.empty());
  EXPECT_LE(props.size(), 40u);
  for (std::size_t i = 0; i < props.size(); ++i) {
    const auto& b = props[i].box;
    EXPECT_GE(b.x1, 0);
    EXPECT_GE(b.y1, 0);
    EXPECT_LE(b.x2, 96);
    EXPECT_LE(b.y2, 96);
    EXPECT_GE(b.width(), 1.0);
    EXPECT_GE(b.height(), 1.0);
    EXPECT_TRUE(std::isfinite(props[i].objectness));
    EXPECT_EQ(props[i].objectness, obj[props[i].anchor]);
    if (i) EXPECT_GE(props[i - 1].objectness, props[i].objectness);
    for (std::size_t j = 0; j < i; ++j) EXPECT_LE(geom::box_iou(b, props[j].box), 0.7);
  }
}

TEST(RoiAlign, ConstantMapGivesConstantFeatures) {
  nn::Tensor<double> fm({1, 2, 6, 6});
  for (int i = 0; i < 36; ++i) fm[i] = 1.5, fm[36 + i] = -0.25;
  const std::vector<nn::RoiRef> rois{{0, {3, 7, 50, 61}}, {0, {0, 0, 96, 96}}, {0, {40.5, 12.25, 44, 20}}};
  const auto out = nn::roi_align(nn::constant(fm), std::span<const nn::RoiRef>(rois), 5, 16.0);
  ASSERT_EQ(out->value.shape(), (std::vector<int>{3, 50}));
  for (int r = 0; r < 3; ++r) {
    for (int j = 0; j < 50; ++j) EXPECT_DOUBLE_EQ(out->value[r * 50 + j], j < 25 ? 1.5 : -0.25);
  }
}

TEST(RoiAlign, CellAlignedBoxAveragesCoveredCells) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> d;
  nn::Tensor<double> fm({1, 1, 6, 6});
  for (auto& v : fm.values()) v = d(rng);
  auto cell = [&](int y, int x) { return fm[y * 6 + x]; };
  // 2x2 cells per bin: the bin center falls on the shared corner.
  const std::vector<nn::RoiRef> rois{{0, {16, 32, 80, 96}}};
  const auto out = nn::roi_align(nn::constant(fm), std::span<const nn::RoiRef>(rois), 2, 16.0);
  for (int by = 0; by < 2; ++by) {
    for (int bx = 0; bx < 2; ++bx) {
      const int y0 = 2 + 2 * by, x0 = 1 + 2 * bx;
      const double expect =
          (cell(y0, x0) + cell(y0, x0 + 1) + cell(y0 + 1, x0) + cell(y0 + 1, x0 + 1)) / 4.0;
      EXPECT_NEAR(out->value[by * 2 + bx], expect, 1e-12);
    }
  }
}

TEST(ClassFeatures, IdenticalPixelsAndWidth) {
  det::DetectorNet<double> net({}, 1);
  const auto img = noise_image(96, 96, 4, 8);
  const synth::Image* two[] = {&img, &img};
  const auto g = net.class_features(nn::constant(det::image_batch<double>(two, 16)));
  ASSERT_EQ(g->value.shape(), (std::vector<int>{2, net.config().feature_dim()}));
  for (int j = 0; j < 128; ++j) EXPECT_EQ(g->value[j], g->value[128 + j]);
}

TEST(Head, ScoresNormalizedAndShaped) {
  det::DetectorNet<double> net({}, 2);
  const auto rois = roi_rows(net, 7, 1);
  std::map<int, agg::FeatureVector> feats{{3, random_feature(128, 2)}, {5, random_feature(128, 3)},
                                          {9, random_feature(128, 4)}};
  const std::vector<int> classes{3, 5, 9};
  const auto out = det::detect_predict(net, rois, feats, classes);
  ASSERT_EQ(out.scores.size(), 7u);
  EXPECT_EQ(out.classes, classes);
  for (const auto& row : out.scores) {
    ASSERT_EQ(row.size(), 4u);
    double s = 0;
    for (double v : row) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  const std::vector<int> missing{3, 4};
  EXPECT_THROW(det::detect_predict(net, rois, feats, missing), ConfigError);
}

TEST(Head, IdenticalClassFeaturesGiveIdenticalDeltas) {
  det::DetectorNet<double> net({}, 3);
  const auto f = random_feature(128, 5);
  std::map<int, agg::FeatureVector> feats{{0, f}, {1, f}, {2, f}};
  const std::vector<int> classes{0, 1, 2};
  const auto out = det::detect_predict(net, roi_rows(net, 4, 6), feats, classes);
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_EQ(out.deltas[r][0], out.deltas[r][1]);
    EXPECT_EQ(out.deltas[r][0], out.deltas[r][2]);
    EXPECT_EQ(out.scores[r][1], out.scores[r][3]);
  }
}

TEST(Head, EquivariantUnderClassRelabeling) {
  det::DetectorNet<double> net({}, 4);
  const auto rois = roi_rows(net, 5, 7);
  const auto a = random_feature(128, 8), b = random_feature(128, 9), c = random_feature(128, 10);
  const std::vector<int> classes{0, 1, 2};
  const auto base = det::detect_predict(net, rois, {{0, a}, {1, b}, {2, c}}, classes);
  const auto perm = det::detect_predict(net, rois, {{0, c}, {1, a}, {2, b}}, classes);
  for (int r = 0; r < 5; ++r) {
    EXPECT_NEAR(perm.scores[r][0], base.scores[r][0], 1e-12);
    EXPECT_NEAR(perm.scores[r][2], base.scores[r][1], 1e-12);
    EXPECT_NEAR(perm.scores[r][3], base.scores[r][2], 1e-12);
    EXPECT_NEAR(perm.scores[r][1], base.scores[r][3], 1e-12);
    EXPECT_EQ(perm.deltas[r][1], base.deltas[r][0]);
  }
}

TEST(Head, QueryPathwaySurvivesZeroClassFeaturesOnlyWithFull) {
  for (agg::Scheme s : {agg::Scheme::kFull, agg::Scheme::kRw}) {
    det::DetectorConfig cfg;
    cfg.scheme = s;
    det::DetectorNet<double> net(cfg, 5);
    const auto q = roi_rows(net, 2, 11);
    const auto g = nn::constant(nn::Tensor<double>({1, 128}));
    const auto agg = agg::aggregate(q, nn::index_rows(g, std::vector<int>{0, 0}), s);
    double norm = 0;
    for (double v : agg->value.values()) norm += std::abs(v);
    const auto out = net.head(q, g);
    // Two different queries: deltas differ only when f_qry reaches the head.
    bool differ = false;
    for (int j = 0; j < 4; ++j) differ |= out.deltas->value[j] != out.deltas->value[4 + j];
    if (s == agg::Scheme::kFull) {
      EXPECT_GT(norm, 0.0);
      EXPECT_TRUE(differ);
    } else {
      EXPECT_EQ(norm, 0.0);
      EXPECT_FALSE(differ);
    }
  }
}

TEST(Detect, OutputsValidAndDeterministic) {
  det::DetectorNet<double> net({}, 6);
  const auto img = noise_image(96, 96, 3, 12);
  std::map<int, agg::FeatureVector> feats{{0, random_feature(128, 13)}, {1, random_feature(128, 14)}};
  const std::vector<int> classes{0, 1};
  const auto a = det::detect(net, img, feats, classes);
  const auto b = det::detect(net, img, feats, classes);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_LE(static_cast<int>(a.size()), net.config().max_detections);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].box, b[i].box);
    EXPECT_EQ(a[i].score, b[i].score);
    EXPECT_TRUE(a[i].box.valid());
    EXPECT_TRUE(std::isfinite(a[i].score));
    EXPECT_GE(a[i].score, net.config().score_threshold);
    EXPECT_LE(a[i].box.x2, 96);
    EXPECT_GE(a[i].box.x1, 0);
  }
}

TEST(Detector, ArchitectureHashTracksShapes) {
  det::DetectorConfig a, b;
  b.scheme = agg::Scheme::kRw;
  EXPECT_EQ(det::architecture_hash(a), det::architecture_hash(a));
  EXPECT_NE(det::architecture_hash(a), det::architecture_hash(b));
}
