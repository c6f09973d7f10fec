#include "fsdv/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include "fsdv/error.hpp"

namespace fsdv::synth {

namespace {

using Eigen::Vector3d;

const char* const kFamilies[kNumFamilies] = {"bar", "lshape", "pyramid", "prism", "wedge", "tee"};

// Families whose geometry and appearance admit a rotational ambiguity.
bool family_symmetric(int family) { return family == 3; }

struct MeshBuilder {
  std::vector<Triangle> tris;

  // Adds a convex part, orienting every face away from the part centroid.
  void convex(const std::vector<Vector3d>& verts, const std::vector<std::array<int, 3>>& faces) {
    Vector3d center = Vector3d::Zero();
    for (const auto& v : verts) center += v;
    center /= static_cast<double>(verts.size());
    for (const auto& f : faces) {
      Triangle t{{verts[f[0]], verts[f[1]], verts[f[2]]}, false};
      const Vector3d n = (t.v[1] - t.v[0]).cross(t.v[2] - t.v[0]);
      const Vector3d c = (t.v[0] + t.v[1] + t.v[2]) / 3.0;
      if (n.dot(c - center) < 0.0) std::swap(t.v[1], t.v[2]);
      tris.push_back(t);
    }
  }

  void box(const Vector3d& lo, const Vector3d& hi) {
    std::vector<Vector3d> v;
    for (int i = 0; i < 8; ++i) {
      v.emplace_back(i & 1 ? hi.x() : lo.x(), i & 2 ? hi.y() : lo.y(), i & 4 ? hi.z() : lo.z());
    }
    convex(v, {{0, 1, 3}, {0, 3, 2}, {4, 5, 7}, {4, 7, 6}, {0, 1, 5}, {0, 5, 4},
               {2, 3, 7}, {2, 7, 6}, {0, 2, 6}, {0, 6, 4}, {1, 3, 7}, {1, 7, 5}});
  }

  void pyramid(double half, double height) {
    std::vector<Vector3d> v{{-half, -height / 2, -half}, {half, -height / 2, -half},
                            {half, -height / 2, half},   {-half, -height / 2, half},
                            {0.0, height / 2, 0.0}};
    convex(v, {{0, 1, 2}, {0, 2, 3}, {0, 1, 4}, {1, 2, 4}, {2, 3, 4}, {3, 0, 4}});
  }

  void hex_prism(double radius, double height) {
    std::vector<Vector3d> v;
    for (int s = 0; s < 2; ++s) {
      for (int k = 0; k < 6; ++k) {
        const double a = k * M_PI / 3.0;
        v.emplace_back(radius * std::cos(a), s ? height / 2 : -height / 2, radius * std::sin(a));
      }
    }
    v.emplace_back(0.0, -height / 2, 0.0);
    v.emplace_back(0.0, height / 2, 0.0);
    std::vector<std::array<int, 3>> f;
    for (int k = 0; k < 6; ++k) {
      const int k2 = (k + 1) % 6;
      f.push_back({k, k2, 6 + k2});
      f.push_back({k, 6 + k2, 6 + k});
      f.push_back({12, k, k2});
      f.push_back({13, 6 + k, 6 + k2});
    }
    convex(v, f);
  }

  // Right-triangle cross-section in the xy plane, ramp facing +x, extruded in z.
  void wedge(double ax, double ay, double az) {
    std::vector<Vector3d> v{{-ax, -ay, -az}, {ax, -ay, -az}, {-ax, ay, -az},
                            {-ax, -ay, az},  {ax, -ay, az},  {-ax, ay, az}};
    convex(v, {{0, 1, 2}, {3, 4, 5}, {0, 1, 4}, {0, 4, 3}, {1, 2, 5}, {1, 5, 4},
               {0, 2, 5}, {0, 5, 3}});
  }
};

std::vector<Triangle> build_family(int family, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(0.85, 1.15);
  auto j = [&](double x) { return x * jitter(rng); };
  MeshBuilder b;
  switch (family) {
    case 0: {  // elongated bar
      const double lx = j(0.5), ly = j(0.17), lz = j(0.22);
      b.box({-lx, -ly, -lz}, {lx, ly, lz});
      break;
    }
    case 1: {  // L: slab along x with an upright at the back
      const double lx = j(0.5), t = j(0.14), h = j(0.42), lz = j(0.24);
      b.box({-lx, -h, -lz}, {lx, -h + 2 * t, lz});
      b.box({-lx, -h + 2 * t, -lz}, {-lx + 2 * t, h, lz});
      break;
    }
    case 2:
      b.pyramid(j(0.5), j(0.9));
      break;
    case 3:
      b.hex_prism(j(0.4), j(0.95));
      break;
    case 4:
      b.wedge(j(0.5), j(0.3), j(0.25));
      break;
    case 5: {  // T: stem with a crossbar along z on top
      const double s = j(0.13), h = j(0.45), bar = j(0.5), bt = j(0.11);
      b.box({-s, -h, -s}, {s, h - 2 * bt, s});
      b.box({-s * 1.2, h - 2 * bt, -bar}, {s * 1.2, h, bar});
      break;
    }
    default:
      throw CapacityError("no prototype family " + std::to_string(family));
  }
  return b.tris;
}

void normalize_mesh(std::vector<Triangle>& tris) {
  Vector3d lo = Vector3d::Constant(std::numeric_limits<double>::infinity());
  Vector3d hi = -lo;
  for (const auto& t : tris) {
    for (const auto& v : t.v) {
      lo = lo.cwiseMin(v);
      hi = hi.cwiseMax(v);
    }
  }
  const Vector3d center = 0.5 * (lo + hi);
  const double extent = (hi - lo).maxCoeff();
  for (auto& t : tris) {
    for (auto& v : t.v) {
      v = ((v - center) / extent).cwiseMax(Vector3d::Constant(-0.5)).cwiseMin(Vector3d::Constant(0.5));
    }
  }
}

Rgb hsv(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 360.0) / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Rgb rgb{};
  const int sector = static_cast<int>(hp);
  switch (sector) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const double m = v - c;
  for (auto& ch : rgb) ch += m;
  return rgb;
}

struct Projected {
  double u, v, z;
};

Projected project(const Eigen::Matrix3d& r, const Vector3d& p, const Placement& pl) {
  const Vector3d q = r * p;
  return {pl.cx + pl.scale * q.x(), pl.cy - pl.scale * q.y(), q.z()};
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

bool operator==(const ClassModel& a, const ClassModel& b) {
  if (a.class_id != b.class_id || a.variant != b.variant || a.name != b.name ||
      a.family != b.family || a.symmetric != b.symmetric || a.mesh.size() != b.mesh.size() ||
      a.appearance.base != b.appearance.base || a.appearance.accent != b.appearance.accent ||
      a.appearance.has_accent != b.appearance.has_accent) {
    return false;
  }
  for (std::size_t i = 0; i < a.mesh.size(); ++i) {
    if (a.mesh[i].accent != b.mesh[i].accent) return false;
    for (int k = 0; k < 3; ++k) {
      if (a.mesh[i].v[k] != b.mesh[i].v[k]) return false;
    }
  }
  return true;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

std::vector<ClassModel> generate_class_models(int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("need at least 2 classes");
  const int capacity = kNumFamilies * kPalettesPerFamily;
  if (num_classes > capacity) {
    throw CapacityError("requested " + std::to_string(num_classes) + " classes, capacity is " +
                        std::to_string(capacity) + " (families x appearance variants)");
  }
  std::vector<ClassModel> out;
  for (int c = 0; c < num_classes; ++c) {
    const int family = c % kNumFamilies;
    std::mt19937_64 rng(derive_seed(seed, 17, static_cast<std::uint64_t>(c)));
    const int variants = std::uniform_int_distribution<int>(2, 5)(rng);
    Appearance app;
    app.base = hsv(c * 137.508, 0.8, 0.85);
    app.accent = {0.95, 0.95, 0.95};
    app.has_accent = !family_symmetric(family);
    // Color names are indices; the hue is what separates classes.
    const std::string name = std::string(kFamilies[family]) + "_" + std::to_string(c);
    for (int v = 0; v < variants; ++v) {
      ClassModel m;
      m.class_id = c;
      m.variant = v;
      m.name = name;
      m.family = kFamilies[family];
      m.symmetric = family_symmetric(family);
      m.appearance = app;
      m.mesh = build_family(family, rng);
      normalize_mesh(m.mesh);
      if (app.has_accent) {
        for (auto& t : m.mesh) {
          const Vector3d n = (t.v[1] - t.v[0]).cross(t.v[2] - t.v[0]).normalized();
          t.accent = n.x() > 0.5;
        }
      }
      out.push_back(std::move(m));
    }
  }
  return out;
}

std::vector<ClassInfo> class_registry(const std::vector<ClassModel>& models) {
  std::map<int, ClassInfo> by_id;
  for (const auto& m : models) by_id[m.class_id] = {m.class_id, m.name, m.family, m.symmetric};
  std::vector<ClassInfo> out;
  for (auto& [_, info] : by_id) out.push_back(info);
  return out;
}

void Image::set(int y, int x, int c, double v) {
  pixels[index(y, x, c)] =
      static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

geom::BoundingBox projected_box(const ClassModel& model, const Placement& pl) {
  const Eigen::Matrix3d r = geom::euler_to_rotation(pl.viewpoint);
  double u0 = std::numeric_limits<double>::infinity(), v0 = u0, u1 = -u0, v1 = -u0;
  for (const auto& t : model.mesh) {
    for (const auto& p : t.v) {
      const auto q = project(r, p, pl);
      u0 = std::min(u0, q.u);
      u1 = std::max(u1, q.u);
      v0 = std::min(v0, q.v);
      v1 = std::max(v1, q.v);
    }
  }
  return {std::floor(u0), std::floor(v0), std::ceil(u1), std::ceil(v1)};
}

void rasterize_model(const ClassModel& model, const Placement& pl, double light_gain,
                     Image& image) {
  const Eigen::Matrix3d r = geom::euler_to_rotation(pl.viewpoint);
  const Vector3d light = Vector3d(0.3, 0.5, 0.8).normalized();
  std::vector<double> depth(static_cast<std::size_t>(image.height) * image.width,
                            -std::numeric_limits<double>::infinity());
  for (const auto& t : model.mesh) {
    const Projected a = project(r, t.v[0], pl), b = project(r, t.v[1], pl),
                    c = project(r, t.v[2], pl);
    const double area = (b.u - a.u) * (c.v - a.v) - (b.v - a.v) * (c.u - a.u);
    if (std::abs(area) < 1e-12) continue;
    const Vector3d n = (r * (t.v[1] - t.v[0]).cross(t.v[2] - t.v[0])).normalized();
    const double shade = (0.35 + 0.65 * std::abs(n.dot(light))) * light_gain;
    const Rgb& albedo = t.accent ? model.appearance.accent : model.appearance.base;
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min({a.u, b.u, c.u}))));
    const int x1 = std::min(image.width - 1, static_cast<int>(std::ceil(std::max({a.u, b.u, c.u}))));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min({a.v, b.v, c.v}))));
    const int y1 = std::min(image.height - 1, static_cast<int>(std::ceil(std::max({a.v, b.v, c.v}))));
    for (int y = y0; y <= y1; ++y) {
      const double py = y + 0.5;
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5;
        double w0 = (c.u - b.u) * (py - b.v) - (c.v - b.v) * (px - b.u);
        double w1 = (a.u - c.u) * (py - c.v) - (a.v - c.v) * (px - c.u);
        double w2 = (b.u - a.u) * (py - a.v) - (b.v - a.v) * (px - a.u);
        if (area < 0) {
          w0 = -w0;
          w1 = -w1;
          w2 = -w2;
        }
        if (w0 < 0 || w1 < 0 || w2 < 0) continue;
        const double z = (w0 * a.z + w1 * b.z + w2 * c.z) / std::abs(area);
        const std::size_t di = static_cast<std::size_t>(y) * image.width + x;
        if (z <= depth[di]) continue;
        depth[di] = z;
        for (int ch = 0; ch < 3; ++ch) image.set(y, x, ch, albedo[ch] * shade);
      }
    }
  }
}

SceneSample render_scene(const std::vector<ClassModel>& models, const LayoutSpec& layout,
                         std::uint64_t seed) {
  if (models.empty()) throw ConfigError("render_scene: no models");
  if (layout.min_objects < 0 || layout.max_objects < layout.min_objects) {
    throw ConfigError("render_scene: bad object count range");
  }
  std::map<int, std::vector<const ClassModel*>> by_class;
  for (const auto& m : models) by_class[m.class_id].push_back(&m);
  std::vector<int> classes = layout.classes;
  if (classes.empty()) {
    for (const auto& [c, _] : by_class) classes.push_back(c);
  }
  for (int c : classes) {
    if (!by_class.count(c)) throw ConfigError("render_scene: unknown class " + std::to_string(c));
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SceneSample scene;
  scene.image = Image(layout.height, layout.width, 3);

  // Background: tinted gray with low-frequency undulation and pixel noise.
  const double gray = 0.25 + 0.3 * unit(rng);
  const Rgb tint{0.9 + 0.2 * unit(rng), 0.9 + 0.2 * unit(rng), 0.9 + 0.2 * unit(rng)};
  const double fx = 1.0 + 3.0 * unit(rng), fy = 1.0 + 3.0 * unit(rng), ph = 6.283 * unit(rng);
  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      const double wave =
          0.07 * std::sin(fx * x / layout.width * 6.283 + ph) * std::cos(fy * y / layout.height * 6.283);
      for (int ch = 0; ch < 3; ++ch) {
        scene.image.set(y, x, ch, gray * tint[ch] + wave + 0.04 * (unit(rng) - 0.5));
      }
    }
  }

  const int count = std::uniform_int_distribution<int>(layout.min_objects, layout.max_objects)(rng);
  const double light_gain = 0.9 + 0.2 * unit(rng);
  for (int k = 0; k < count; ++k) {
    const int cls = classes[std::uniform_int_distribution<std::size_t>(0, classes.size() - 1)(rng)];
    const auto& variants = by_class[cls];
    const ClassModel& model =
        *variants[std::uniform_int_distribution<std::size_t>(0, variants.size() - 1)(rng)];
    bool placed = false;
    for (int attempt = 0; attempt < layout.max_retries && !placed; ++attempt) {
      Placement pl;
      pl.viewpoint = geom::normalize(
          {360.0 * unit(rng),
           layout.min_elevation + (layout.max_elevation - layout.min_elevation) * unit(rng),
           layout.max_inplane * (2.0 * unit(rng) - 1.0)});
      pl.scale = layout.min_scale + (layout.max_scale - layout.min_scale) * unit(rng);
      const geom::BoundingBox rel = projected_box(model, pl);  // centered at (0, 0)
      const double lo_x = -rel.x1, hi_x = layout.width - rel.x2;
      const double lo_y = -rel.y1, hi_y = layout.height - rel.y2;
      if (hi_x < lo_x || hi_y < lo_y) continue;
      // Integer centers keep the snapped box equal to the tight box shift.
      pl.cx = std::floor(lo_x + (hi_x - lo_x) * unit(rng));
      pl.cy = std::floor(lo_y + (hi_y - lo_y) * unit(rng));
      if (pl.cx < lo_x) pl.cx = std::ceil(lo_x);
      if (pl.cy < lo_y) pl.cy = std::ceil(lo_y);
      if (pl.cx > hi_x || pl.cy > hi_y) continue;
      const geom::BoundingBox box = projected_box(model, pl);
      if (box.x1 < 0 || box.y1 < 0 || box.x2 > layout.width || box.y2 > layout.height ||
          !box.valid()) {
        continue;
      }
      bool overlap = false;
      for (const auto& o : scene.objects) overlap |= geom::box_iou(o.box, box) > layout.max_iou;
      if (overlap) continue;
      rasterize_model(model, pl, light_gain, scene.image);
      scene.objects.push_back({cls, model.variant, box, pl.viewpoint});
      placed = true;
    }
    if (!placed) {
      throw PlacementError("could not place an object of class " + model.name + " within " +
                           std::to_string(layout.max_retries) + " attempts");
    }
  }
  return scene;
}

ShapePointCloud sample_point_cloud(const ClassModel& model, int n_points, std::uint64_t seed) {
  if (n_points < 1) throw ConfigError("sample_point_cloud: n_points must be >= 1");
  std::vector<double> areas;
  double total = 0.0;
  for (const auto& t : model.mesh) {
    areas.push_back(t.area());
    total += areas.back();
  }
  if (!(total > 0.0)) throw InvalidMeshError("mesh of " + model.name + " has zero area");
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ShapePointCloud pc;
  pc.class_id = model.class_id;
  pc.variant = model.variant;
  pc.points.reserve(n_points);
  for (int i = 0; i < n_points; ++i) {
    const Triangle& t = model.mesh[pick(rng)];
    const double r1 = std::sqrt(unit(rng)), r2 = unit(rng);
    Vector3d p = (1.0 - r1) * t.v[0] + r1 * (1.0 - r2) * t.v[1] + r1 * r2 * t.v[2];
    pc.points.push_back(p.cwiseMax(Vector3d::Constant(-0.5)).cwiseMin(Vector3d::Constant(0.5)));
  }
  return pc;
}

DetectionClassData build_detection_class_data(const SceneSample& sample, int object_index) {
  if (object_index < 0 || object_index >= static_cast<int>(sample.objects.size())) {
    throw IndexError("object index " + std::to_string(object_index) + " out of range for scene " +
                     sample.id);
  }
  const auto& obj = sample.objects[object_index];
  const Image& src = sample.image;
  DetectionClassData cd;
  cd.cls = obj.cls;
  cd.box = obj.box;
  cd.image_with_mask = Image(src.height, src.width, 4);
  const int bx0 = static_cast<int>(obj.box.x1), bx1 = static_cast<int>(obj.box.x2);
  const int by0 = static_cast<int>(obj.box.y1), by1 = static_cast<int>(obj.box.y2);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        cd.image_with_mask.pixels[cd.image_with_mask.index(y, x, c)] = src.pixels[src.index(y, x, c)];
      }
      const bool inside = x >= bx0 && x < bx1 && y >= by0 && y < by1;
      cd.image_with_mask.pixels[cd.image_with_mask.index(y, x, 3)] = inside ? 255 : 0;
    }
  }
  return cd;
}

// --- dataset ---------------------------------------------------------------

const std::vector<SceneSample>& Dataset::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw ConfigError("dataset has no split '" + name + "'");
  return it->second;
}

std::vector<const ShapePointCloud*> Dataset::clouds_of(int class_id) const {
  std::vector<const ShapePointCloud*> out;
  for (const auto& pc : point_clouds) {
    if (pc.class_id == class_id) out.push_back(&pc);
  }
  return out;
}

const ClassInfo& Dataset::class_info(int class_id) const {
  for (const auto& c : classes) {
    if (c.id == class_id) return c;
  }
  throw ConfigError("unknown class id " + std::to_string(class_id));
}

Dataset generate_dataset(const DatasetConfig& config, int workers) {
  if (config.num_novel < 1 || config.num_novel >= config.num_classes) {
    throw ConfigError("num_novel must be in [1, num_classes)");
  }
  const auto models = generate_class_models(config.num_classes, config.seed);
  Dataset ds;
  ds.config = config;
  ds.classes = class_registry(models);
  for (int c = 0; c < config.num_classes; ++c) {
    (c < config.num_classes - config.num_novel ? ds.base_classes : ds.novel_classes).push_back(c);
  }

  struct SplitPlan {
    const char* name;
    int count;
    std::vector<int> classes;
    std::uint64_t tag;
  };
  const std::vector<SplitPlan> plans{{kBaseSplit, config.base_scenes, ds.base_classes, 1},
                                     {kPoolSplit, config.pool_scenes, {}, 2},
                                     {kTestSplit, config.test_scenes, {}, 3}};
  for (const auto& plan : plans) {
    LayoutSpec layout = config.layout;
    layout.classes = plan.classes;
    std::vector<SceneSample> scenes(static_cast<std::size_t>(plan.count));
    std::vector<std::string> errors(scenes.size());
    const int nw = std::max(1, workers);
    auto work = [&](int w) {
      for (int i = w; i < plan.count; i += nw) {
        try {
          scenes[i] = render_scene(models, layout, derive_seed(config.seed, plan.tag, i));
        } catch (const PlacementError& e) {
          errors[i] = e.what();
        }
        char id[64];
        std::snprintf(id, sizeof(id), "%s_%06d", plan.name, i);
        scenes[i].id = id;
      }
    };
    if (nw == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < nw; ++w) pool.emplace_back(work, w);
      for (auto& t : pool) t.join();
    }
    for (std::size_t i = 0; i < errors.size(); ++i) {
      if (!errors[i].empty()) throw PlacementError(scenes[i].id + ": " + errors[i]);
    }
    ds.splits[plan.name] = std::move(scenes);
  }
  for (const auto& m : models) {
    ds.point_clouds.push_back(sample_point_cloud(
        m, config.points_per_cloud,
        derive_seed(config.seed, 1000 + m.class_id, static_cast<std::uint64_t>(m.variant))));
  }
  return ds;
}

// --- episodes ----------------------------------------------------------------

std::string to_string(Phase phase) { return phase == Phase::kBase ? "base" : "finetune"; }

Phase parse_phase(const std::string& name) {
  if (name == "base") return Phase::kBase;
  if (name == "finetune") return Phase::kFinetune;
  throw ConfigError("unknown phase '" + name + "'");
}

std::vector<ObjectRef> Episode::instances() const {
  std::vector<ObjectRef> out;
  for (const auto& s : scenes) {
    for (int o : s.targets) out.push_back({s.scene, o});
  }
  return out;
}

Episode build_episode(const Dataset& dataset, const EpisodeSpec& spec, Phase phase) {
  if (spec.shots < 1) throw ConfigError("shots must be >= 1");
  for (int b : spec.base_classes) {
    if (std::find(spec.novel_classes.begin(), spec.novel_classes.end(), b) !=
        spec.novel_classes.end()) {
      throw ConfigError("class " + std::to_string(b) + " is both base and novel");
    }
  }
  std::mt19937_64 rng(derive_seed(spec.seed, 77, phase == Phase::kBase ? 0 : 1));
  Episode ep;
  ep.phase = phase;
  ep.classes = spec.base_classes;
  if (phase == Phase::kFinetune) {
    ep.classes.insert(ep.classes.end(), spec.novel_classes.begin(), spec.novel_classes.end());
  }
  std::sort(ep.classes.begin(), ep.classes.end());
  const std::set<int> train_set(ep.classes.begin(), ep.classes.end());
  const std::set<int> novel_set(spec.novel_classes.begin(), spec.novel_classes.end());

  ep.split = phase == Phase::kBase ? kBaseSplit : kPoolSplit;
  const auto& scenes = dataset.split(ep.split);
  std::map<int, std::vector<ObjectRef>> by_class;
  for (int s = 0; s < static_cast<int>(scenes.size()); ++s) {
    const auto& objs = scenes[s].objects;
    if (phase == Phase::kBase) {
      const bool has_novel = std::any_of(objs.begin(), objs.end(), [&](const ObjectAnnotation& o) {
        return novel_set.count(o.cls) || !train_set.count(o.cls);
      });
      if (has_novel) continue;
    }
    for (int o = 0; o < static_cast<int>(objs.size()); ++o) {
      if (train_set.count(objs[o].cls)) by_class[objs[o].cls].push_back({s, o});
    }
  }

  const int needed = phase == Phase::kBase ? spec.pool_size : spec.shots;
  for (int c : ep.classes) {
    auto& refs = by_class[c];
    if (static_cast<int>(refs.size()) < needed) {
      throw EpisodeError("class " + dataset.class_info(c).name + " has " +
                         std::to_string(refs.size()) + " instances in split " + ep.split +
                         ", need " + std::to_string(needed));
    }
    std::shuffle(refs.begin(), refs.end(), rng);
    ep.class_pool[c] = std::vector<ObjectRef>(refs.begin(), refs.begin() + needed);
    std::sort(ep.class_pool[c].begin(), ep.class_pool[c].end());
  }

  if (phase == Phase::kBase) {
    std::map<int, EpisodeScene> used;
    for (const auto& [c, refs] : by_class) {
      for (const auto& r : refs) {
        used[r.scene].scene = r.scene;
        used[r.scene].targets.push_back(r.object);
      }
    }
    for (auto& [_, s] : used) {
      std::sort(s.targets.begin(), s.targets.end());
      ep.scenes.push_back(std::move(s));
    }
  } else {
    std::map<int, std::set<int>> chosen;
    for (const auto& [c, refs] : ep.class_pool) {
      for (const auto& r : refs) chosen[r.scene].insert(r.object);
    }
    for (const auto& [s, objs] : chosen) {
      EpisodeScene es;
      es.scene = s;
      es.targets.assign(objs.begin(), objs.end());
      for (int o = 0; o < static_cast<int>(scenes[s].objects.size()); ++o) {
        if (!objs.count(o)) es.ignored.push_back(o);
      }
      ep.scenes.push_back(std::move(es));
    }
  }
  return ep;
}

}  // namespace fsdv::synth
