#pragma once

// Procedural benchmark: parametric class prototypes, an orthographic
// rasterizer that produces labeled scenes, surface point sampling and the
// episode builder for the two training phases.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fsdv/geometry.hpp"

namespace fsdv::synth {

struct Triangle {
  std::array<Eigen::Vector3d, 3> v;
  bool accent = false;

  double area() const { return 0.5 * (v[1] - v[0]).cross(v[2] - v[0]).norm(); }
};

using Rgb = std::array<double, 3>;

struct Appearance {
  Rgb base{};
  Rgb accent{};
  bool has_accent = false;
};

/// One 3D model of a class. A class owns several variants (2 to 5) that share
/// family and appearance but differ in proportions.
struct ClassModel {
  int class_id = 0;
  int variant = 0;
  std::string name;
  std::string family;
  bool symmetric = false;  // silhouette and shading admit rotational ambiguity
  std::vector<Triangle> mesh;
  Appearance appearance;

  friend bool operator==(const ClassModel& a, const ClassModel& b);
};

struct ClassInfo {
  int id = 0;
  std::string name;
  std::string family;
  bool symmetric = false;
};

inline constexpr int kNumFamilies = 6;
inline constexpr int kPalettesPerFamily = 4;

/// Deterministic under seed. Throws CapacityError beyond
/// kNumFamilies * kPalettesPerFamily classes, ConfigError below two.
std::vector<ClassModel> generate_class_models(int num_classes, std::uint64_t seed);

std::vector<ClassInfo> class_registry(const std::vector<ClassModel>& models);

/// 8-bit image, channel-interleaved. value() maps to [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), pixels(std::size_t(h) * w * c) {}

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double value(int y, int x, int c) const { return pixels[index(y, x, c)] / 255.0; }
  void set(int y, int x, int c, double v);

  friend bool operator==(const Image&, const Image&) = default;
};

struct ObjectAnnotation {
  int cls = 0;
  int model_variant = 0;
  geom::BoundingBox box;
  geom::Viewpoint viewpoint;

  friend bool operator==(const ObjectAnnotation&, const ObjectAnnotation&) = default;
};

struct SceneSample {
  std::string id;
  Image image;
  std::vector<ObjectAnnotation> objects;

  friend bool operator==(const SceneSample&, const SceneSample&) = default;
};

struct LayoutSpec {
  int width = 96;
  int height = 96;
  int min_objects = 1;
  int max_objects = 3;
  double min_scale = 26.0;  // pixels per canonical unit
  double max_scale = 44.0;
  double max_iou = 0.3;
  double min_elevation = -15.0;
  double max_elevation = 45.0;
  double max_inplane = 15.0;
  int max_retries = 200;
  std::vector<int> classes;  // empty: every class in the model list
};

/// Places and rasterizes objects; annotation boxes are the integer-snapped
/// tight boxes of the projected vertices. Throws PlacementError if an object
/// cannot be placed within max_retries.
SceneSample render_scene(const std::vector<ClassModel>& models, const LayoutSpec& layout,
                         std::uint64_t seed);

/// Orthographic projection used by the renderer: u = cx + s * p.x,
/// v = cy - s * p.y with p = R * vertex.
struct Placement {
  geom::Viewpoint viewpoint;
  double scale = 1.0;
  double cx = 0.0;
  double cy = 0.0;
};

/// Draws one model into `image` (painter's order, per-object depth test).
void rasterize_model(const ClassModel& model, const Placement& placement,
                     double light_gain, Image& image);

geom::BoundingBox projected_box(const ClassModel& model, const Placement& placement);

struct ShapePointCloud {
  int class_id = 0;
  int variant = 0;
  std::vector<Eigen::Vector3d> points;
};

/// Area-proportional triangle choice, uniform within the triangle. Throws
/// InvalidMeshError on zero total area, ConfigError for n_points < 1.
ShapePointCloud sample_point_cloud(const ClassModel& model, int n_points, std::uint64_t seed);

/// RGB of the scene plus a mask channel that is 1 inside box_i.
struct DetectionClassData {
  int cls = 0;
  geom::BoundingBox box;
  Image image_with_mask;  // 4 channels
};

DetectionClassData build_detection_class_data(const SceneSample& sample, int object_index);

// --- dataset and episodes ----------------------------------------------------

struct DatasetConfig {
  int num_classes = 12;
  int num_novel = 4;
  int base_scenes = 2000;
  int pool_scenes = 400;
  int test_scenes = 300;
  int points_per_cloud = 512;
  std::uint64_t seed = 0;
  LayoutSpec layout;
};

inline constexpr const char* kBaseSplit = "base_train";
inline constexpr const char* kPoolSplit = "fewshot_pool";
inline constexpr const char* kTestSplit = "test";

struct Dataset {
  DatasetConfig config;
  std::vector<ClassInfo> classes;
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  std::map<std::string, std::vector<SceneSample>> splits;
  std::vector<ShapePointCloud> point_clouds;

  const std::vector<SceneSample>& split(const std::string& name) const;
  std::vector<const ShapePointCloud*> clouds_of(int class_id) const;
  const ClassInfo& class_info(int class_id) const;
};

/// Base split holds only base classes; pool and test splits hold all.
/// Scenes derive sub-seeds from (seed, split, index), so `workers` does not
/// change the output.
Dataset generate_dataset(const DatasetConfig& config, int workers = 1);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

struct EpisodeSpec {
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  int shots = 10;
  std::uint64_t seed = 0;
  int pool_size = 50;  // |Z_c| per base class in the base phase
};

enum class Phase { kBase, kFinetune };

std::string to_string(Phase phase);
Phase parse_phase(const std::string& name);

struct ObjectRef {
  int scene = 0;   // index into the episode split
  int object = 0;  // index into the scene's objects

  friend bool operator==(const ObjectRef&, const ObjectRef&) = default;
  friend auto operator<=>(const ObjectRef&, const ObjectRef&) = default;
};

struct EpisodeScene {
  int scene = 0;
  std::vector<int> targets;  // supervised objects
  std::vector<int> ignored;  // objects present but outside the shot budget

  friend bool operator==(const EpisodeScene&, const EpisodeScene&) = default;
};

struct Episode {
  Phase phase = Phase::kBase;
  std::string split;
  std::vector<int> classes;  // C_train
  std::vector<EpisodeScene> scenes;
  std::map<int, std::vector<ObjectRef>> class_pool;  // Z_c

  /// Every supervised object instance, for the audit log.
  std::vector<ObjectRef> instances() const;

  friend bool operator==(const Episode&, const Episode&) = default;
};

/// Throws EpisodeError naming the class when a class lacks samples.
Episode build_episode(const Dataset& dataset, const EpisodeSpec& spec, Phase phase);

}  // namespace fsdv::synth
