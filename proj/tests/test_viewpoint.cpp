#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "fsdv/error.hpp"
#include "fsdv/viewpoint.hpp"

using namespace fsdv;

namespace {

synth::ShapePointCloud random_cloud(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  synth::ShapePointCloud pc;
  for (int i = 0; i < n; ++i) pc.points.emplace_back(u(rng), u(rng), u(rng));
  return pc;
}

agg::FeatureVector random_feature(int dim, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, scale);
  agg::FeatureVector f(dim);
  for (auto& v : f) v = d(rng);
  return f;
}

vp::ViewpointScores one_hot(const geom::ViewpointCode& code) {
  vp::ViewpointScores s;
  for (int a = 0; a < vp::kAngles; ++a) {
    s.logits[a * vp::kBins + code[a].bin] = 1.0;
    s.offsets[a * vp::kBins + code[a].bin] = code[a].offset;
  }
  return s;
}

}  // namespace

TEST(CropEncoder, DeterministicAndTranslationInvariantOnUniformImage) {
  vp::ViewpointNet<double> net({}, 1);
  synth::Image img(96, 96, 3);
  for (int y = 0; y < 96; ++y)
    for (int x = 0; x < 96; ++x) img.set(y, x, 0, 0.7), img.set(y, x, 1, 0.2), img.set(y, x, 2, 0.4);
  const auto a = vp::encode_query_crop(net, img, {4, 5, 40, 33});
  EXPECT_EQ(a, vp::encode_query_crop(net, img, {4, 5, 40, 33}));
  EXPECT_EQ(a, vp::encode_query_crop(net, img, {50, 60, 86, 88}));
  EXPECT_EQ(static_cast<int>(a.size()), net.config().feature_dim());
  EXPECT_THROW(vp::encode_query_crop(net, img, {10, 10, 10.5, 30}), DegenerateBoxError);
  EXPECT_THROW(vp::encode_query_crop(net, img, {-40, 10, -5, 30}), DegenerateBoxError);
}

TEST(ShapeEncoder, PermutationAndDuplicationInvariantBitwise) {
  vp::ViewpointNet<double> net({}, 2);
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    auto pc = random_cloud(64 + t, 100 + t);
    const auto ref = vp::encode_shape(net, pc);
    auto shuffled = pc;
    std::shuffle(shuffled.points.begin(), shuffled.points.end(), rng);
    ASSERT_EQ(vp::encode_shape(net, shuffled), ref) << t;
    auto doubled = pc;
    doubled.points.insert(doubled.points.end(), pc.points.begin(), pc.points.end());
    ASSERT_EQ(vp::encode_shape(net, doubled), ref) << t;
  }
  EXPECT_THROW(vp::encode_shape(net, random_cloud(vp::kMinPoints - 1, 1)), ConfigError);
}

TEST(Predictor, ArityBoundedOffsetsAndDeterminism) {
  vp::ViewpointNet<double> net({}, 3);
  for (int t = 0; t < 20; ++t) {
    const auto f = random_feature(128, 2 * t, 10.0), g = random_feature(128, 2 * t + 1, 10.0);
    const auto a = vp::viewpoint_predict(net, f, g);
    EXPECT_EQ(a.logits.size(), std::size_t(vp::kAngles * vp::kBins));
    EXPECT_EQ(a.offsets.size(), std::size_t(vp::kAngles * vp::kBins));
    for (double o : a.offsets) {
      EXPECT_GE(o, -0.5);
      EXPECT_LE(o, 0.5);
    }
    const auto b = vp::viewpoint_predict(net, f, g);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.offsets, b.offsets);
  }
  EXPECT_THROW(vp::viewpoint_predict(net, random_feature(64, 0), random_feature(128, 1)), ShapeError);
}

TEST(Decode, OneHotBinZero) {
  const auto v = vp::viewpoint_decode(one_hot({{{0, 0.0}, {0, 0.0}, {0, 0.0}}}));
  EXPECT_DOUBLE_EQ(v.azi, 7.5);
  EXPECT_EQ(v, geom::decode_angle_bins({{{0, 0.0}, {0, 0.0}, {0, 0.0}}}));
}

TEST(Decode, UniformLogitsTieToBinZero) {
  vp::ViewpointScores s;
  s.logits.fill(0.25);
  const auto v = vp::viewpoint_decode(s);
  EXPECT_EQ(v, geom::decode_angle_bins({{{0, 0.0}, {0, 0.0}, {0, 0.0}}}));
}

TEST(Decode, OneHotCodecRoundTrip) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> azi(0, 360), ele(-89, 89), inp(-179, 179);
  for (int i = 0; i < 1000; ++i) {
    const auto v = geom::normalize({azi(rng), ele(rng), inp(rng)});
    const auto back = vp::viewpoint_decode(one_hot(geom::encode_angle_bins(v)));
    EXPECT_NEAR(geom::wrap180(back.azi - v.azi), 0.0, 1e-9);
    EXPECT_NEAR(back.ele, v.ele, 1e-9);
    EXPECT_NEAR(geom::wrap180(back.inp - v.inp), 0.0, 1e-9);
  }
}

TEST(ClassShapeFeature, MeanOfEncodings) {
  vp::ViewpointNet<double> net({}, 5);
  std::vector<synth::ShapePointCloud> clouds;
  for (int k = 0; k < 4; ++k) clouds.push_back(random_cloud(96, 30 + k));
  std::vector<const synth::ShapePointCloud*> ptrs;
  for (const auto& c : clouds) ptrs.push_back(&c);

  const std::vector<const synth::ShapePointCloud*> one{ptrs[2]};
  EXPECT_EQ(vp::build_class_shape_feature(net, std::span<const synth::ShapePointCloud* const>(one)),
            vp::encode_shape(net, clouds[2]));

  const auto mean = vp::build_class_shape_feature(net, std::span<const synth::ShapePointCloud* const>(ptrs));
  agg::FeatureVector brute(128, 0.0);
  for (const auto& c : clouds) {
    const auto e = vp::encode_shape(net, c);
    for (int j = 0; j < 128; ++j) brute[j] += e[j];
  }
  for (int j = 0; j < 128; ++j) EXPECT_NEAR(mean[j], brute[j] / 4.0, 1e-9);

  std::reverse(ptrs.begin(), ptrs.end());
  const auto rev = vp::build_class_shape_feature(net, std::span<const synth::ShapePointCloud* const>(ptrs));
  for (int j = 0; j < 128; ++j) EXPECT_NEAR(rev[j], mean[j], 1e-12);

  EXPECT_THROW(vp::build_class_shape_feature(net, std::span<const synth::ShapePointCloud* const>()),
               EmptyClassError);
}

TEST(ClassShapeFeature, FromModelsIsDeterministic) {
  vp::ViewpointNet<double> net({}, 6);
  const auto models = synth::generate_class_models(4, 0);
  std::vector<synth::ClassModel> cls0;
  for (const auto& m : models)
    if (m.class_id == 0) cls0.push_back(m);
  const auto a = vp::build_class_shape_feature(net, std::span<const synth::ClassModel>(cls0), 128, 7);
  EXPECT_EQ(a, vp::build_class_shape_feature(net, std::span<const synth::ClassModel>(cls0), 128, 7));
  EXPECT_EQ(static_cast<int>(a.size()), 128);
}

TEST(Viewpoint, ArchitectureHashTracksShapes) {
  vp::ViewpointConfig a, b;
  b.predictor_hidden = {128, 64};
  EXPECT_NE(vp::architecture_hash(a), vp::architecture_hash(b));
}
