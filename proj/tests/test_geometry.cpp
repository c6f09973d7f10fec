#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Dense>

#include "fsdv/error.hpp"
#include "fsdv/geometry.hpp"
#include "oracles.hpp"

using namespace fsdv;
using geom::BoundingBox;
using geom::Viewpoint;

namespace {

using oracle::angle_gap;
using oracle::quat_angle_deg;
using oracle::quat_matrix;
using oracle::random_viewpoint;
using oracle::viewpoint_quat;

constexpr double kPi = std::numbers::pi;

}  // namespace

TEST(Rotation, ZeroIsIdentity) {
  EXPECT_TRUE(geom::euler_to_rotation({0, 0, 0}).isApprox(Eigen::Matrix3d::Identity(), 1e-15));
}

TEST(Rotation, HalfTurnAboutAzimuthAxis) {
  const auto r = geom::euler_to_rotation({180, 0, 0});
  EXPECT_NEAR(r.trace(), -1.0, 1e-12);
  EXPECT_NEAR(r(1, 1), 1.0, 1e-12);  // azimuth axis is y
}

TEST(Rotation, MatchesQuaternionComposition) {
  const Viewpoint v{40, 20, 10};
  const Eigen::Matrix3d diff = geom::euler_to_rotation(v) - quat_matrix(viewpoint_quat(v));
  EXPECT_LT(diff.cwiseAbs().maxCoeff(), 1e-9);

  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const Viewpoint r = random_viewpoint(rng);
    const Eigen::Matrix3d d = geom::euler_to_rotation(r) - quat_matrix(viewpoint_quat(r));
    ASSERT_LT(d.cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Rotation, OrthonormalWithUnitDeterminant) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    const auto r = geom::euler_to_rotation(geom::normalize(random_viewpoint(rng)));
    ASSERT_LT((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    ASSERT_NEAR(r.determinant(), 1.0, 1e-9);
  }
}

TEST(RotationError, Examples) {
  EXPECT_NEAR(geom::rotation_error_deg({10, 20, 30}, {10, 20, 30}), 0.0, 1e-6);
  EXPECT_NEAR(geom::rotation_error_deg({30, 0, 0}, {0, 0, 0}), 30.0, 1e-9);
  const double oracle = quat_angle_deg(viewpoint_quat({40, 20, 10}), viewpoint_quat({0, 0, 0}));
  EXPECT_NEAR(geom::rotation_error_deg({40, 20, 10}, {0, 0, 0}), oracle, 1e-6);
}

TEST(RotationError, QuaternionOracleOnRandomPairs) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    const Viewpoint a = geom::normalize(random_viewpoint(rng));
    const Viewpoint b = geom::normalize(random_viewpoint(rng));
    ASSERT_NEAR(geom::rotation_error_deg(a, b), quat_angle_deg(viewpoint_quat(a), viewpoint_quat(b)),
                1e-6);
  }
}

TEST(RotationError, MetricAxioms) {
  std::mt19937_64 rng(13);
  std::vector<Viewpoint> vs;
  for (int i = 0; i < 1000; ++i) vs.push_back(geom::normalize(random_viewpoint(rng)));
  for (std::size_t i = 0; i + 2 < vs.size(); ++i) {
    const double ab = geom::rotation_error_deg(vs[i], vs[i + 1]);
    const double ba = geom::rotation_error_deg(vs[i + 1], vs[i]);
    const double bc = geom::rotation_error_deg(vs[i + 1], vs[i + 2]);
    const double ac = geom::rotation_error_deg(vs[i], vs[i + 2]);
    ASSERT_GE(ab, 0.0);
    ASSERT_LE(ab, 180.0);
    ASSERT_NEAR(ab, ba, 1e-9);
    ASSERT_NEAR(geom::rotation_error_deg(vs[i], vs[i]), 0.0, 1e-6);
    ASSERT_LE(ac, ab + bc + 1e-6);
  }
}

TEST(Normalize, RangesAndIdempotence) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> wide(-1000, 1000);
  for (int i = 0; i < 1000; ++i) {
    const Viewpoint v = geom::normalize({wide(rng), wide(rng), wide(rng)});
    ASSERT_GE(v.azi, 0.0);
    ASSERT_LT(v.azi, 360.0);
    ASSERT_GE(v.ele, -90.0);
    ASSERT_LE(v.ele, 90.0);
    ASSERT_GE(v.inp, -180.0);
    ASSERT_LT(v.inp, 180.0);
    ASSERT_EQ(geom::normalize(v), v);
  }
}

TEST(Normalize, PreservesRotation) {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> wide(-720, 720);
  for (int i = 0; i < 500; ++i) {
    const Viewpoint raw{wide(rng), wide(rng), wide(rng)};
    const auto d = geom::euler_to_rotation(raw) - geom::euler_to_rotation(geom::normalize(raw));
    ASSERT_LT(d.cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(AngleCodec, Examples) {
  auto c = geom::encode_angle(7.5);
  EXPECT_EQ(c.bin, 0);
  EXPECT_NEAR(c.offset, 0.0, 1e-12);
  c = geom::encode_angle(0.0);
  EXPECT_EQ(c.bin, 0);
  EXPECT_NEAR(c.offset, -0.5, 1e-12);
  c = geom::encode_angle(190.5);
  EXPECT_EQ(c.bin, 12);
  EXPECT_NEAR(c.offset, 0.2, 1e-12);
  EXPECT_NEAR(geom::decode_angle_bins({{{0, 0.0}, {0, 0.0}, {0, 0.0}}}).azi, 7.5, 1e-12);
}

TEST(AngleCodec, OffsetsStayHalfOpen) {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0, 360);
  for (int i = 0; i < 10000; ++i) {
    const auto c = geom::encode_angle(u(rng));
    ASSERT_GE(c.bin, 0);
    ASSERT_LT(c.bin, geom::kNumBins);
    ASSERT_GE(c.offset, -0.5);
    ASSERT_LT(c.offset, 0.5);
  }
}

TEST(AngleCodec, RoundTripOnRandomViewpoints) {
  std::mt19937_64 rng(29);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Viewpoint v = geom::normalize(random_viewpoint(rng));
    const Viewpoint back = geom::decode_angle_bins(geom::encode_angle_bins(v));
    worst = std::max({worst, angle_gap(v.azi, back.azi), angle_gap(v.ele, back.ele),
                      angle_gap(v.inp, back.inp)});
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(AngleCodec, UpperBoundaryWrapsIntoRange) {
  const Viewpoint v = geom::decode_angle_bins({{{23, 0.4999999}, {0, 0.0}, {0, 0.0}}});
  EXPECT_GE(v.azi, 0.0);
  EXPECT_LT(v.azi, 360.0);
  EXPECT_GT(v.azi, 359.99);
}

TEST(AngleCodec, InvalidCodesThrow) {
  EXPECT_THROW(geom::decode_angle_bins({{{24, 0.0}, {0, 0.0}, {0, 0.0}}}), InvalidCodeError);
  EXPECT_THROW(geom::decode_angle_bins({{{-1, 0.0}, {0, 0.0}, {0, 0.0}}}), InvalidCodeError);
  EXPECT_THROW(geom::decode_angle_bins({{{0, 0.0}, {0, 0.7}, {0, 0.0}}}), InvalidCodeError);
}

TEST(BoxIou, Examples) {
  const BoundingBox a{0, 0, 10, 10}, b{5, 5, 15, 15}, c{20, 20, 30, 30};
  EXPECT_DOUBLE_EQ(geom::box_iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(geom::box_iou(a, c), 0.0);
  EXPECT_NEAR(geom::box_iou(a, b), 1.0 / 7.0, 1e-15);
  EXPECT_DOUBLE_EQ(geom::box_iou(a, b), geom::box_iou(b, a));
}

TEST(BoxIou, MatchesPixelRasterization) {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> pos(0, 60), size(1, 50);
  for (int t = 0; t < 500; ++t) {
    BoundingBox box[2];
    for (auto& b : box) {
      b.x1 = pos(rng);
      b.y1 = pos(rng);
      b.x2 = b.x1 + size(rng);
      b.y2 = b.y1 + size(rng);
    }
    const double oracle = oracle::raster_iou(box[0], box[1], 120);
    const double iou = geom::box_iou(box[0], box[1]);
    ASSERT_GE(iou, 0.0);
    ASSERT_LE(iou, 1.0);
    ASSERT_LE(std::abs(iou - oracle), 1.0 / std::min(box[0].area(), box[1].area()));
  }
}

TEST(BoxDelta, Examples) {
  const BoundingBox b{0, 0, 10, 10};
  EXPECT_EQ(geom::apply_box_delta(b, {0, 0, 0, 0}), b);
  const BoundingBox s = geom::apply_box_delta(b, {0.5, 0, 0, 0});
  EXPECT_NEAR(s.x1, 5, 1e-12);
  EXPECT_NEAR(s.y1, 0, 1e-12);
  EXPECT_NEAR(s.x2, 15, 1e-12);
  EXPECT_NEAR(s.y2, 10, 1e-12);
}

TEST(BoxDelta, InversePair) {
  std::mt19937_64 rng(37);
  std::uniform_real_distribution<double> d(-1, 1), p(0, 50), s(2, 40);
  for (int i = 0; i < 1000; ++i) {
    const double x = p(rng), y = p(rng);
    const BoundingBox b{x, y, x + s(rng), y + s(rng)};
    const geom::BoxDelta delta{d(rng), d(rng), d(rng), d(rng)};
    const auto back = geom::compute_box_delta(b, geom::apply_box_delta(b, delta));
    for (int k = 0; k < 4; ++k) ASSERT_NEAR(back[k], delta[k], 1e-9);
  }
}

TEST(BoxDelta, DegenerateAfterClippingThrows) {
  EXPECT_THROW(geom::apply_box_delta({0, 0, 10, 10}, {-5, 0, 0, 0}, 96, 96), DegenerateBoxError);
}
