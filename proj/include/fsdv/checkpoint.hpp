#pragma once

// Checkpoint directories: params.bin (parameter archive) next to a JSON
// manifest carrying the architecture, class registry, training classes and
// the averaged inference class features.

#include <map>
#include <string>
#include <vector>

#include "fsdv/config.hpp"

namespace fsdv::ckpt {

using io::Json;
namespace fs = io::fs;

/// Code version string recorded in manifests.
std::string code_version();

struct Checkpoint {
  train::Task task = train::Task::kDetection;
  synth::Phase phase = synth::Phase::kBase;
  Json architecture;  // detector or viewpoint config
  std::string architecture_hash;
  std::vector<synth::ClassInfo> registry;
  std::vector<int> classes;  // C_train of the phase that produced it
  std::map<int, agg::FeatureVector> class_features;
  std::string dataset_hash;
  Json train_config;
  Json extra = Json::object();
  nn::ParamArchive params;

  det::DetectorConfig detector_config() const;
  vp::ViewpointConfig viewpoint_config() const;
};

template <typename T>
Checkpoint make_checkpoint(const det::DetectorNet<T>& net, synth::Phase phase,
                           const synth::Dataset& dataset, const std::string& dataset_hash,
                           std::vector<int> classes, std::map<int, agg::FeatureVector> features,
                           const train::TrainConfig& config);

template <typename T>
Checkpoint make_checkpoint(const vp::ViewpointNet<T>& net, synth::Phase phase,
                           const synth::Dataset& dataset, const std::string& dataset_hash,
                           std::vector<int> classes, std::map<int, agg::FeatureVector> features,
                           const train::TrainConfig& config);

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir);
/// Throws IoError on a missing or corrupt checkpoint.
Checkpoint load_checkpoint(const fs::path& dir);

/// Throws ConfigError listing every differing entry when the checkpoint's
/// registry does not match the dataset's.
void check_registry(const Checkpoint& ckpt, const std::vector<synth::ClassInfo>& registry);

/// Rebuilds the network and loads its parameters. Throws ConfigError when
/// the checkpoint holds the other task or a mismatched architecture.
template <typename T>
det::DetectorNet<T> load_detector(const Checkpoint& ckpt);
template <typename T>
vp::ViewpointNet<T> load_viewpoint(const Checkpoint& ckpt);

}  // namespace fsdv::ckpt
