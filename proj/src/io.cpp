#include "fsdv/io.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "fsdv/error.hpp"

namespace fsdv::io {

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("short write to " + path.string());
}

namespace {

std::string ppm_bytes(const synth::Image& image) {
  if (image.channels != 3) throw IoError("PPM needs 3 channels");
  std::string data = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                     "\n255\n";
  data.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  return data;
}

}  // namespace

void write_ppm(const fs::path& path, const synth::Image& image) {
  write_text(path, ppm_bytes(image));
}

synth::Image read_ppm(const fs::path& path) {
  const std::string data = read_text(path);
  std::istringstream in(data);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  if (magic != "P6" || !in || w <= 0 || h <= 0 || maxval != 255) {
    throw IoError("unsupported or corrupt image " + path.string());
  }
  in.get();
  const std::size_t offset = static_cast<std::size_t>(in.tellg());
  const std::size_t n = static_cast<std::size_t>(w) * h * 3;
  if (data.size() < offset + n) throw IoError("truncated image " + path.string());
  synth::Image im(h, w, 3);
  std::copy(data.begin() + offset, data.begin() + offset + n, im.pixels.begin());
  return im;
}

Json to_json(const synth::LayoutSpec& l) {
  return {{"width", l.width},           {"height", l.height},
          {"min_objects", l.min_objects}, {"max_objects", l.max_objects},
          {"min_scale", l.min_scale},   {"max_scale", l.max_scale},
          {"max_iou", l.max_iou},       {"min_elevation", l.min_elevation},
          {"max_elevation", l.max_elevation}, {"max_inplane", l.max_inplane},
          {"max_retries", l.max_retries}};
}

Json to_json(const synth::DatasetConfig& c) {
  return {{"num_classes", c.num_classes}, {"num_novel", c.num_novel},
          {"base_scenes", c.base_scenes}, {"pool_scenes", c.pool_scenes},
          {"test_scenes", c.test_scenes}, {"points_per_cloud", c.points_per_cloud},
          {"seed", c.seed},               {"layout", to_json(c.layout)}};
}

void reject_unknown(const Json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

synth::DatasetConfig dataset_config_from_json(const Json& j) {
  reject_unknown(j, {"num_classes", "num_novel", "base_scenes", "pool_scenes", "test_scenes",
                     "points_per_cloud", "seed", "layout"},
                 "dataset config");
  synth::DatasetConfig c;
  try {
    take(j, "num_classes", c.num_classes);
    take(j, "num_novel", c.num_novel);
    take(j, "base_scenes", c.base_scenes);
    take(j, "pool_scenes", c.pool_scenes);
    take(j, "test_scenes", c.test_scenes);
    take(j, "points_per_cloud", c.points_per_cloud);
    take(j, "seed", c.seed);
    if (j.contains("layout")) {
      const Json& l = j.at("layout");
      reject_unknown(l, {"width", "height", "min_objects", "max_objects", "min_scale",
                         "max_scale", "max_iou", "min_elevation", "max_elevation",
                         "max_inplane", "max_retries"},
                     "dataset.layout");
      auto& o = c.layout;
      take(l, "width", o.width);
      take(l, "height", o.height);
      take(l, "min_objects", o.min_objects);
      take(l, "max_objects", o.max_objects);
      take(l, "min_scale", o.min_scale);
      take(l, "max_scale", o.max_scale);
      take(l, "max_iou", o.max_iou);
      take(l, "min_elevation", o.min_elevation);
      take(l, "max_elevation", o.max_elevation);
      take(l, "max_inplane", o.max_inplane);
      take(l, "max_retries", o.max_retries);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset config: ") + e.what());
  }
  return c;
}

Json to_json(const geom::BoundingBox& b) { return Json::array({b.x1, b.y1, b.x2, b.y2}); }

geom::BoundingBox box_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 4) throw IoError("box must be [x1, y1, x2, y2]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

Json to_json(const geom::Viewpoint& v) { return {{"azi", v.azi}, {"ele", v.ele}, {"inp", v.inp}}; }

geom::Viewpoint viewpoint_from_json(const Json& j) {
  return {j.at("azi").get<double>(), j.at("ele").get<double>(), j.at("inp").get<double>()};
}

Json registry_json(const std::vector<synth::ClassInfo>& classes) {
  Json out = Json::array();
  for (const auto& c : classes) {
    out.push_back({{"id", c.id}, {"name", c.name}, {"family", c.family}, {"symmetric", c.symmetric}});
  }
  return out;
}

namespace {

std::string cloud_file(const synth::ShapePointCloud& pc) {
  return "pointclouds/class" + std::to_string(pc.class_id) + "_model" +
         std::to_string(pc.variant) + ".xyz";
}

std::string file_table_hash(const Json& files) { return sha256_hex(files.dump()); }

}  // namespace

std::string write_dataset(const synth::Dataset& ds, const fs::path& dir) {
  Json files = Json::object();
  auto put = [&](const std::string& rel, const std::string& bytes) {
    write_text(dir / rel, bytes);
    files[rel] = sha256_hex(bytes);
  };
  for (const auto& [name, scenes] : ds.splits) {
    Json ann{{"split", name},
             {"image_size", {ds.config.layout.width, ds.config.layout.height}},
             {"classes", registry_json(ds.classes)},
             {"base_classes", ds.base_classes},
             {"novel_classes", ds.novel_classes},
             {"images", Json::array()}};
    for (const auto& s : scenes) {
      const std::string rel = "images/" + name + "/" + s.id + ".ppm";
      put(rel, ppm_bytes(s.image));
      Json objs = Json::array();
      for (const auto& o : s.objects) {
        objs.push_back({{"class", o.cls},
                        {"model", o.model_variant},
                        {"box", to_json(o.box)},
                        {"viewpoint", to_json(o.viewpoint)}});
      }
      ann["images"].push_back({{"id", s.id}, {"file", rel}, {"objects", objs}});
    }
    put("annotations/" + name + ".json", ann.dump(1));
  }
  for (const auto& pc : ds.point_clouds) {
    std::string text;
    char line[96];
    for (const auto& p : pc.points) {
      std::snprintf(line, sizeof(line), "%.17g %.17g %.17g\n", p.x(), p.y(), p.z());
      text += line;
    }
    put(cloud_file(pc), text);
  }
  const std::string hash = file_table_hash(files);
  Json manifest{{"generator_version", kGeneratorVersion},
                {"seed", ds.config.seed},
                {"config", to_json(ds.config)},
                {"base_classes", ds.base_classes},
                {"novel_classes", ds.novel_classes},
                {"classes", registry_json(ds.classes)},
                {"files", files},
                {"manifest_hash", hash}};
  write_text(dir / "manifest.json", manifest.dump(1));
  return hash;
}

std::string dataset_manifest_hash(const fs::path& dir) {
  return Json::parse(read_text(dir / "manifest.json")).at("manifest_hash").get<std::string>();
}

synth::Dataset read_dataset(const fs::path& dir) {
  Json manifest;
  try {
    manifest = Json::parse(read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad manifest in " + dir.string() + ": " + e.what());
  }
  if (manifest.at("generator_version") != kGeneratorVersion) {
    throw IoError("dataset generator version mismatch in " + dir.string());
  }
  const Json& files = manifest.at("files");
  if (file_table_hash(files) != manifest.at("manifest_hash").get<std::string>()) {
    throw IoError("manifest file table does not match its hash");
  }
  std::map<std::string, std::string> cache;
  auto load = [&](const std::string& rel) -> const std::string& {
    auto it = files.find(rel);
    if (it == files.end()) throw IoError("file not listed in manifest: " + rel);
    std::string bytes = read_text(dir / rel);
    if (sha256_hex(bytes) != it->get<std::string>()) throw IoError("digest mismatch for " + rel);
    return cache[rel] = std::move(bytes);
  };

  synth::Dataset ds;
  ds.config = dataset_config_from_json(manifest.at("config"));
  ds.base_classes = manifest.at("base_classes").get<std::vector<int>>();
  ds.novel_classes = manifest.at("novel_classes").get<std::vector<int>>();
  for (const auto& c : manifest.at("classes")) {
    ds.classes.push_back({c.at("id").get<int>(), c.at("name").get<std::string>(),
                          c.at("family").get<std::string>(), c.at("symmetric").get<bool>()});
  }
  for (const char* name : {synth::kBaseSplit, synth::kPoolSplit, synth::kTestSplit}) {
    const std::string rel = std::string("annotations/") + name + ".json";
    if (!files.contains(rel)) continue;
    const Json ann = Json::parse(load(rel));
    auto& scenes = ds.splits[name];
    for (const auto& im : ann.at("images")) {
      synth::SceneSample s;
      s.id = im.at("id").get<std::string>();
      const std::string file = im.at("file").get<std::string>();
      load(file);
      s.image = read_ppm(dir / file);
      cache.erase(file);
      for (const auto& o : im.at("objects")) {
        s.objects.push_back({o.at("class").get<int>(), o.at("model").get<int>(),
                             box_from_json(o.at("box")), viewpoint_from_json(o.at("viewpoint"))});
      }
      scenes.push_back(std::move(s));
    }
    cache.erase(rel);
  }
  for (const auto& [rel, _] : files.items()) {
    if (rel.rfind("pointclouds/", 0) != 0) continue;
    synth::ShapePointCloud pc;
    if (std::sscanf(rel.c_str(), "pointclouds/class%d_model%d.xyz", &pc.class_id, &pc.variant) != 2) {
      throw IoError("unexpected point cloud file " + rel);
    }
    std::istringstream in(load(rel));
    double x, y, z;
    while (in >> x >> y >> z) pc.points.emplace_back(x, y, z);
    ds.point_clouds.push_back(std::move(pc));
    cache.erase(rel);
  }
  std::sort(ds.point_clouds.begin(), ds.point_clouds.end(), [](const auto& a, const auto& b) {
    return std::pair(a.class_id, a.variant) < std::pair(b.class_id, b.variant);
  });
  return ds;
}

void write_archive(const nn::ParamArchive& archive, const fs::path& path) {
  std::string out = "FSDVPAR1";
  auto put_u64 = [&](std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); };
  put_u64(archive.size());
  for (const auto& [name, t] : archive) {
    put_u64(name.size());
    out += name;
    put_u64(t.shape().size());
    for (int d : t.shape()) put_u64(static_cast<std::uint64_t>(d));
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
  write_text(path, out);
}

nn::ParamArchive read_archive(const fs::path& path) {
  const std::string data = read_text(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > data.size()) throw IoError("truncated parameter archive " + path.string());
  };
  auto get_u64 = [&] {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, data.data() + pos, 8);
    pos += 8;
    return v;
  };
  need(8);
  if (data.compare(0, 8, "FSDVPAR1") != 0) throw IoError("not a parameter archive: " + path.string());
  pos = 8;
  nn::ParamArchive out;
  const std::uint64_t count = get_u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t len = get_u64();
    need(len);
    std::string name = data.substr(pos, len);
    pos += len;
    std::vector<int> shape(get_u64());
    for (auto& d : shape) d = static_cast<int>(get_u64());
    nn::Tensor<double> t(shape);
    need(t.size() * sizeof(double));
    std::memcpy(t.data(), data.data() + pos, t.size() * sizeof(double));
    pos += t.size() * sizeof(double);
    out[name] = std::move(t);
  }
  return out;
}

}  // namespace fsdv::io
