#pragma once

// Finite-difference checks of every differentiable module and of both full
// losses, shared by the unit tests and the acceptance runner.

#include <functional>
#include <string>
#include <vector>

#include "fsdv/detector.hpp"
#include "fsdv/training.hpp"
#include "fsdv/viewpoint.hpp"
#include "gradcheck.hpp"

namespace fsdv::gradsuite {

using namespace check;

inline det::DetectorConfig tiny_detector() {
  det::DetectorConfig c;
  c.widths = {4, 6, 8, 8};
  c.gn_groups = 2;
  c.pool = 3;
  c.head_hidden = 12;
  c.registry_size = 4;
  c.anchor_sizes = {12.0, 20.0};
  c.anchor_ratios = {1.0};
  return c;
}

inline vp::ViewpointConfig tiny_viewpoint() {
  vp::ViewpointConfig c;
  c.widths = {4, 6, 8, 8};
  c.gn_groups = 2;
  c.crop_size = 16;
  c.point_hidden = 8;
  c.predictor_hidden = {16, 12};
  return c;
}

inline std::vector<std::pair<std::string, DVar>> all_params(const nn::ParamStore<double>& ps,
                                                            const std::string& prefix = "") {
  std::vector<std::pair<std::string, DVar>> out;
  for (const auto& [name, p] : ps.items()) {
    if (name.rfind(prefix, 0) == 0) out.emplace_back(name, p);
  }
  return out;
}

constexpr double kH = 1e-5;
constexpr double kModuleTol = 1e-4;
constexpr double kProbeTol = 1e-3;
constexpr double kProbeH = 1e-6;
constexpr int kProbes = 20;
constexpr double kFloor = 1e-6;

inline GradCheck backbone() {
  det::DetectorNet<double> net(tiny_detector(), 1);
  std::mt19937_64 rng(1);
  auto x = nn::parameter(random_tensor({1, 3, 32, 32}, rng, 0.3));
  const auto r = random_tensor({1, 8, 2, 2}, rng);
  auto wrt = all_params(net.params(), "backbone");
  wrt.emplace_back("x", x);
  const auto res = check_gradients([&] { return project(net.backbone(x), r); }, wrt, 6, kH, kFloor);
  return res;
}

inline GradCheck backbone_sum_of_outputs_smallest_input() {
  det::DetectorNet<double> net(tiny_detector(), 3);
  std::mt19937_64 rng(3);
  auto x = nn::parameter(random_tensor({1, 3, 16, 16}, rng, 0.3));
  auto wrt = all_params(net.params(), "backbone.conv0.query");
  wrt.emplace_back("x", x);
  const auto res = check_gradients([&] { return nn::sum(net.backbone(x)); }, wrt, 24, kH, kFloor);
  return res;
}

inline GradCheck class_branch_of_backbone() {
  det::DetectorNet<double> net(tiny_detector(), 2);
  std::mt19937_64 rng(2);
  auto x = nn::parameter(random_tensor({2, 4, 32, 32}, rng, 0.3));
  const auto r = random_tensor({2, 8}, rng);
  const auto res = check_gradients([&] { return project(net.class_features(x), r); },
                                   {{"x", x}, {"w0", net.params().get("backbone.conv0.class.w")}},
                                   20, kH, kFloor);
  return res;
}

inline GradCheck roi_align() {
  std::mt19937_64 rng(3);
  auto fm = nn::parameter(random_tensor({2, 3, 4, 4}, rng));
  const std::vector<nn::RoiRef> rois{{0, {1.3, 2.7, 20.1, 25.6}},
                                     {1, {5.5, 0.2, 31.0, 13.9}},
                                     {0, {-3.0, 10.0, 12.5, 40.0}}};
  const auto r = random_tensor({3, 3 * 4 * 4}, rng);
  const auto res = check_gradients(
      [&] { return project(nn::roi_align(fm, std::span<const nn::RoiRef>(rois), 4, 8.0), r); },
      {{"fm", fm}}, 96, kH, kFloor);
  return res;
}

inline GradCheck roi_feature_projection() {
  det::DetectorNet<double> net(tiny_detector(), 4);
  std::mt19937_64 rng(4);
  auto fm = nn::parameter(random_tensor({1, 8, 2, 2}, rng));
  const std::vector<nn::RoiRef> rois{{0, {2, 3, 20, 30}}, {0, {10, 1, 31, 17}}};
  const auto r = random_tensor({2, 8}, rng);
  auto wrt = all_params(net.params(), "roi");
  wrt.emplace_back("fm", fm);
  const auto res = check_gradients(
      [&] { return project(net.roi_features(fm, std::span<const nn::RoiRef>(rois)).features, r); },
      wrt, 10, kH, kFloor);
  return res;
}

inline GradCheck shape_encoder() {
  vp::ViewpointNet<double> net(tiny_viewpoint(), 5);
  std::mt19937_64 rng(5);
  auto pts = nn::parameter(random_tensor({40, 3}, rng, 0.3));
  const auto r = random_tensor({1, 8}, rng);
  auto wrt = all_params(net.params(), "shape");
  wrt.emplace_back("points", pts);
  const auto res = check_gradients([&] { return project(net.encode_points(pts), r); }, wrt, 12, kH, kFloor);
  return res;
}

inline GradCheck crop_encoder() {
  vp::ViewpointNet<double> net(tiny_viewpoint(), 6);
  std::mt19937_64 rng(6);
  auto crops = nn::parameter(random_tensor({2, 3, 16, 16}, rng, 0.3));
  const auto r = random_tensor({2, 8}, rng);
  auto wrt = all_params(net.params(), "encoder");
  wrt.emplace_back("crops", crops);
  const auto res = check_gradients([&] { return project(net.encode_crops(crops), r); }, wrt, 6, kH, kFloor);
  return res;
}

inline GradCheck detection_head_all_schemes() {
  GradCheck worst;
  for (agg::Scheme s : agg::kAllSchemes) {
    auto cfg = tiny_detector();
    cfg.scheme = s;
    det::DetectorNet<double> net(cfg, 7);
    std::mt19937_64 rng(7);
    auto fq = nn::parameter(random_tensor({5, 8}, rng));
    auto fc = nn::parameter(random_tensor({3, 8}, rng));
    const auto r1 = random_tensor({5, 4}, rng);
    const auto r2 = random_tensor({15, 4}, rng);
    const auto r3 = random_tensor({3, 4}, rng);
    auto wrt = all_params(net.params(), "head");
    auto meta = all_params(net.params(), "meta");
    wrt.insert(wrt.end(), meta.begin(), meta.end());
    wrt.emplace_back("f_qry", fq);
    wrt.emplace_back("f_cls", fc);
    const auto res = check_gradients(
        [&] {
          const auto out = net.head(fq, fc);
          return nn::add(nn::add(project(out.logits, r1), project(out.deltas, r2)),
                         project(net.meta_logits(fc), r3));
        },
        wrt, 10, kH, kFloor);
    merge(worst, res, agg::to_string(s));
  }
  return worst;
}

inline GradCheck viewpoint_predictor_all_schemes() {
  GradCheck worst;
  for (agg::Scheme s : agg::kAllSchemes) {
    auto cfg = tiny_viewpoint();
    cfg.scheme = s;
    vp::ViewpointNet<double> net(cfg, 8);
    std::mt19937_64 rng(8);
    auto fq = nn::parameter(random_tensor({3, 8}, rng));
    auto fc = nn::parameter(random_tensor({3, 8}, rng));
    const auto r1 = random_tensor({3, vp::kOutputs}, rng);
    const auto r2 = random_tensor({3, vp::kOutputs}, rng);
    auto wrt = all_params(net.params(), "predictor");
    wrt.emplace_back("f_qry", fq);
    wrt.emplace_back("f_cls", fc);
    const auto res = check_gradients(
        [&] {
          const auto out = net.predict(fq, fc);
          return nn::add(project(out.logits, r1), project(out.offsets, r2));
        },
        wrt, 10, kH, kFloor);
    merge(worst, res, agg::to_string(s));
  }
  return worst;
}

inline GradCheck viewpoint_loss() {
  std::mt19937_64 rng(9);
  auto logits = nn::parameter(random_tensor({4, vp::kOutputs}, rng));
  nn::Tensor<double> off({4, vp::kOutputs});
  std::uniform_real_distribution<double> u(-0.45, 0.45), a(0, 360), e(-60, 60);
  for (auto& v : off.values()) v = u(rng);
  auto offsets = nn::parameter(off);
  const std::vector<geom::Viewpoint> targets{{a(rng), e(rng), e(rng)}, {a(rng), e(rng), e(rng)},
                                             {a(rng), e(rng), e(rng)}, {a(rng), e(rng), e(rng)}};
  const auto res = check_gradients(
      [&] {
        return train::viewpoint_loss<double>({logits, offsets}, std::span<const geom::Viewpoint>(targets)).total;
      },
      {{"logits", logits}, {"offsets", offsets}}, 60, kH, kFloor);
  return res;
}

inline GradCheck detection_loss() {
  std::mt19937_64 rng(10);
  train::DetectionOutputs<double> out;
  out.rpn_objectness = nn::parameter(random_tensor({1, 2, 2, 2}, rng));
  out.rpn_deltas = nn::parameter(random_tensor({1, 8, 2, 2}, rng, 0.2));
  out.logits = nn::parameter(random_tensor({3, 3}, rng));
  out.deltas = nn::parameter(random_tensor({6, 4}, rng));
  out.meta_logits = nn::parameter(random_tensor({2, 4}, rng));
  train::DetectionSample s;
  s.rpn_label = {1, 0, 0, 1, 0, 0, 1, 0};
  s.rpn_weight = {0.2, 0.2, 0, 0.2, 0.2, 0, 0.2, 0};
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  for (int i = 0; i < 32; ++i) {
    s.rpn_target.push_back(u(rng));
    s.rpn_target_weight.push_back(i % 3 ? 0.1 : 0.0);
  }
  s.rois = {{0, {0, 0, 10, 10}}, {0, {2, 2, 12, 14}}, {0, {5, 5, 20, 20}}};
  s.roi_label = {0, 1, 2};
  s.roi_target = {{0, 0, 0, 0}, {0.7, -1.9, 0.3, 0.05}, {-0.2, 0.4, 2.5, -0.8}};
  const std::vector<int> meta_targets{1, 3}, allowed{1, 3};
  const auto res = check_gradients(
      [&] { return train::detection_loss<double>(out, s, meta_targets, allowed).total; },
      {{"rpn_obj", out.rpn_objectness}, {"rpn_delta", out.rpn_deltas}, {"logits", out.logits},
       {"deltas", out.deltas}, {"meta", out.meta_logits}},
      40, kH, kFloor);
  return res;
}

inline GradCheck full_detection_loss_parameter_probes() {
  const auto models = synth::generate_class_models(4, 0);
  synth::LayoutSpec layout;
  layout.width = layout.height = 48;
  layout.min_scale = 18;
  layout.max_scale = 22;
  layout.min_objects = layout.max_objects = 1;
  std::vector<synth::SceneSample> scenes;
  std::vector<synth::DetectionClassData> cds;
  std::vector<train::ImageTargets> targets;
  const std::vector<int> class_ids{0, 2};
  for (int k = 0; k < 2; ++k) {
    layout.classes = {class_ids[k]};
    scenes.push_back(synth::render_scene(models, layout, 11 + k));
    cds.push_back(synth::build_detection_class_data(scenes.back(), 0));
    targets.push_back({{scenes.back().objects[0].box}, {k}, {}});
  }
  const synth::Image* q[] = {&scenes[0].image, &scenes[1].image};
  const synth::Image* c[] = {&cds[0].image_with_mask, &cds[1].image_with_mask};
  const auto images = det::image_batch<double>(q, 16);
  const auto class_images = det::image_batch<double>(c, 16);

  det::DetectorNet<double> net(tiny_detector(), 12);
  std::mt19937_64 rng(12);
  train::SamplingConfig sampling;
  sampling.anchors_per_image = 16;
  sampling.rois_per_image = 8;
  const auto first = train::detection_step(net, images, class_images, std::span<const train::ImageTargets>(targets),
                                           std::span<const int>(class_ids), rng, nullptr, sampling);
  if (first.sample.positive_rois + first.sample.positive_anchors == 0) return failed("no positive samples");
  for (const auto& [name, v] : first.loss.breakdown.terms)
    if (!std::isfinite(v)) return failed("non-finite term " + name);
  const auto res = check_random_elements(
      [&] {
        return train::detection_step(net, images, class_images, std::span<const train::ImageTargets>(targets),
                                     std::span<const int>(class_ids), rng, &first.sample, sampling)
            .loss.total;
      },
      all_params(net.params()), kProbes, kProbeH, kFloor, 12);
  return res;
}

inline GradCheck full_viewpoint_loss_parameter_probes() {
  const auto models = synth::generate_class_models(4, 0);
  vp::ViewpointNet<double> net(tiny_viewpoint(), 13);
  std::mt19937_64 rng(13);
  auto crops = nn::constant(random_tensor({2, 3, 16, 16}, rng, 0.3));
  auto pts = nn::constant(vp::points_tensor<double>(synth::sample_point_cloud(models[0], 32, 1)));
  const std::vector<geom::Viewpoint> targets{{33.0, 10.0, -4.0}, {290.0, -7.5, 12.0}};
  const std::vector<int> rows{0, 0};
  const auto res = check_random_elements(
      [&] {
        auto g = nn::index_rows(net.encode_points(pts), std::span<const int>(rows));
        return train::viewpoint_loss(net.predict(net.encode_crops(crops), g),
                                     std::span<const geom::Viewpoint>(targets))
            .total;
      },
      all_params(net.params()), kProbes, kProbeH, kFloor, 13);
  return res;
}

struct GradientCase {
  std::string name;
  double tolerance;
  int expected_probes;  // 0: any count
  std::function<GradCheck()> run;
};

inline std::vector<GradientCase> gradient_cases() {
  return {
      {"Backbone", kModuleTol, 0, backbone},
      {"BackboneSumOfOutputsSmallestInput", kModuleTol, 0, backbone_sum_of_outputs_smallest_input},
      {"ClassBranchOfBackbone", kModuleTol, 0, class_branch_of_backbone},
      {"RoiAlign", kModuleTol, 0, roi_align},
      {"RoiFeatureProjection", kModuleTol, 0, roi_feature_projection},
      {"ShapeEncoder", kModuleTol, 0, shape_encoder},
      {"CropEncoder", kModuleTol, 0, crop_encoder},
      {"DetectionHeadAllSchemes", kModuleTol, 0, detection_head_all_schemes},
      {"ViewpointPredictorAllSchemes", kModuleTol, 0, viewpoint_predictor_all_schemes},
      {"ViewpointLoss", kModuleTol, 0, viewpoint_loss},
      {"DetectionLoss", kModuleTol, 0, detection_loss},
      {"FullDetectionLossParameterProbes", kProbeTol, kProbes, full_detection_loss_parameter_probes},
      {"FullViewpointLossParameterProbes", kProbeTol, kProbes, full_viewpoint_loss_parameter_probes},
  };
}

}  // namespace fsdv::gradsuite
