#include "fsdv/checkpoint.hpp"

#include <sstream>

#include "fsdv/error.hpp"

#ifndef FSDV_CODE_VERSION
#define FSDV_CODE_VERSION "unknown"
#endif

namespace fsdv::ckpt {

std::string code_version() { return "fsdv-0.1.0+" FSDV_CODE_VERSION; }

det::DetectorConfig Checkpoint::detector_config() const {
  if (task != train::Task::kDetection) throw ConfigError("checkpoint holds a viewpoint model");
  return cfg::detector_config_from_json(architecture);
}

vp::ViewpointConfig Checkpoint::viewpoint_config() const {
  if (task != train::Task::kViewpoint) throw ConfigError("checkpoint holds a detection model");
  return cfg::viewpoint_config_from_json(architecture);
}

namespace {

template <typename Net>
Checkpoint fill(const Net& net, train::Task task, Json arch, std::string hash, synth::Phase phase,
                const synth::Dataset& dataset, const std::string& dataset_hash,
                std::vector<int> classes, std::map<int, agg::FeatureVector> features,
                const train::TrainConfig& config) {
  Checkpoint c;
  c.task = task;
  c.phase = phase;
  c.architecture = std::move(arch);
  c.architecture_hash = std::move(hash);
  c.registry = dataset.classes;
  c.classes = std::move(classes);
  c.class_features = std::move(features);
  c.dataset_hash = dataset_hash;
  c.train_config = cfg::to_json(config);
  c.params = net.params().export_archive();
  return c;
}

}  // namespace

template <typename T>
Checkpoint make_checkpoint(const det::DetectorNet<T>& net, synth::Phase phase,
                           const synth::Dataset& dataset, const std::string& dataset_hash,
                           std::vector<int> classes, std::map<int, agg::FeatureVector> features,
                           const train::TrainConfig& config) {
  return fill(net, train::Task::kDetection, cfg::to_json(net.config()),
              det::architecture_hash(net.config()), phase, dataset, dataset_hash,
              std::move(classes), std::move(features), config);
}

template <typename T>
Checkpoint make_checkpoint(const vp::ViewpointNet<T>& net, synth::Phase phase,
                           const synth::Dataset& dataset, const std::string& dataset_hash,
                           std::vector<int> classes, std::map<int, agg::FeatureVector> features,
                           const train::TrainConfig& config) {
  return fill(net, train::Task::kViewpoint, cfg::to_json(net.config()),
              vp::architecture_hash(net.config()), phase, dataset, dataset_hash,
              std::move(classes), std::move(features), config);
}

void save_checkpoint(const Checkpoint& c, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_archive(c.params, dir / "params.bin");
  Json features = Json::object();
  for (const auto& [cls, f] : c.class_features) features[std::to_string(cls)] = f;
  Json m{{"format", "fsdv-checkpoint/1"},
         {"task", train::to_string(c.task)},
         {"phase", synth::to_string(c.phase)},
         {"architecture", c.architecture},
         {"architecture_hash", c.architecture_hash},
         {"registry", io::registry_json(c.registry)},
         {"classes", c.classes},
         {"class_features", features},
         {"dataset_manifest_hash", c.dataset_hash},
         {"train_config", c.train_config},
         {"extra", c.extra},
         {"params_sha256", io::sha256_file(dir / "params.bin")},
         {"code_version", code_version()}};
  io::write_text(dir / "manifest.json", m.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json") || !fs::exists(dir / "params.bin")) {
    throw IoError("not a checkpoint directory: " + dir.string());
  }
  try {
    const Json m = Json::parse(io::read_text(dir / "manifest.json"));
    if (m.at("format") != "fsdv-checkpoint/1") throw IoError("unknown checkpoint format");
    if (io::sha256_file(dir / "params.bin") != m.at("params_sha256").get<std::string>()) {
      throw IoError("params.bin digest mismatch in " + dir.string());
    }
    Checkpoint c;
    c.task = train::parse_task(m.at("task").get<std::string>());
    c.phase = synth::parse_phase(m.at("phase").get<std::string>());
    c.architecture = m.at("architecture");
    c.architecture_hash = m.at("architecture_hash").get<std::string>();
    for (const auto& r : m.at("registry")) {
      c.registry.push_back({r.at("id").get<int>(), r.at("name").get<std::string>(),
                            r.at("family").get<std::string>(), r.at("symmetric").get<bool>()});
    }
    c.classes = m.at("classes").get<std::vector<int>>();
    for (const auto& [k, v] : m.at("class_features").items()) {
      c.class_features[std::stoi(k)] = v.get<agg::FeatureVector>();
    }
    c.dataset_hash = m.at("dataset_manifest_hash").get<std::string>();
    c.train_config = m.at("train_config");
    c.extra = m.value("extra", Json::object());
    c.params = io::read_archive(dir / "params.bin");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint manifest in " + dir.string() + ": " + e.what());
  }
}

void check_registry(const Checkpoint& c, const std::vector<synth::ClassInfo>& registry) {
  std::ostringstream diff;
  const std::size_t n = std::max(c.registry.size(), registry.size());
  for (std::size_t i = 0; i < n; ++i) {
    auto show = [](const std::vector<synth::ClassInfo>& r, std::size_t k) {
      if (k >= r.size()) return std::string("<none>");
      return std::to_string(r[k].id) + ":" + r[k].name;
    };
    const bool same = i < c.registry.size() && i < registry.size() &&
                      c.registry[i].id == registry[i].id && c.registry[i].name == registry[i].name &&
                      c.registry[i].family == registry[i].family &&
                      c.registry[i].symmetric == registry[i].symmetric;
    if (!same) {
      diff << "\n  - checkpoint " << show(c.registry, i) << "\n  + dataset    " << show(registry, i);
    }
  }
  if (!diff.str().empty()) {
    throw ConfigError("class registry mismatch between checkpoint and dataset:" + diff.str());
  }
}

template <typename T>
det::DetectorNet<T> load_detector(const Checkpoint& c) {
  const det::DetectorConfig config = c.detector_config();
  if (det::architecture_hash(config) != c.architecture_hash) {
    throw ConfigError("detector architecture hash mismatch");
  }
  det::DetectorNet<T> net(config, 0);
  net.params().import_archive(c.params);
  return net;
}

template <typename T>
vp::ViewpointNet<T> load_viewpoint(const Checkpoint& c) {
  const vp::ViewpointConfig config = c.viewpoint_config();
  if (vp::architecture_hash(config) != c.architecture_hash) {
    throw ConfigError("viewpoint architecture hash mismatch");
  }
  vp::ViewpointNet<T> net(config, 0);
  net.params().import_archive(c.params);
  return net;
}

#define FSDV_CKPT_INSTANTIATE(T)                                                                  \
  template Checkpoint make_checkpoint<T>(const det::DetectorNet<T>&, synth::Phase,              \
                                         const synth::Dataset&, const std::string&,             \
                                         std::vector<int>, std::map<int, agg::FeatureVector>,   \
                                         const train::TrainConfig&);                            \
  template Checkpoint make_checkpoint<T>(const vp::ViewpointNet<T>&, synth::Phase,              \
                                         const synth::Dataset&, const std::string&,             \
                                         std::vector<int>, std::map<int, agg::FeatureVector>,   \
                                         const train::TrainConfig&);                            \
  template det::DetectorNet<T> load_detector<T>(const Checkpoint&);                             \
  template vp::ViewpointNet<T> load_viewpoint<T>(const Checkpoint&);

FSDV_CKPT_INSTANTIATE(float)
FSDV_CKPT_INSTANTIATE(double)

}  // namespace fsdv::ckpt
