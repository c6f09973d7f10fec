#pragma once

// On-disk formats: binary PPM images, per-split JSON annotations, XYZ point
// clouds, the dataset manifest with SHA-256 file digests, and the named
// parameter archive used for checkpoints.

#include <filesystem>
#include <set>
#include <string>
#include <string_view>

#include "fsdv/nn/module.hpp"
#include "fsdv/synthdata.hpp"
#include "json.hpp"

namespace fsdv::io {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

inline constexpr const char* kGeneratorVersion = "fsdv-synth/1";

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

std::string read_text(const fs::path& path);
/// Creates parent directories as needed.
void write_text(const fs::path& path, std::string_view text);

/// P6 for 3 channels; 4-channel images are not representable and throw.
void write_ppm(const fs::path& path, const synth::Image& image);
synth::Image read_ppm(const fs::path& path);

/// Sets `out` from j[key] when present.
template <typename V>
void take(const Json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

/// ConfigError "unknown key 'k' in <where>" for any key outside `known`.
void reject_unknown(const Json& j, const std::set<std::string>& known, const std::string& where);

Json to_json(const synth::LayoutSpec& layout);
Json to_json(const synth::DatasetConfig& config);
/// Rejects unknown keys with ConfigError naming the key; absent keys keep
/// their defaults.
synth::DatasetConfig dataset_config_from_json(const Json& j);

Json to_json(const geom::BoundingBox& box);
geom::BoundingBox box_from_json(const Json& j);
Json to_json(const geom::Viewpoint& v);
geom::Viewpoint viewpoint_from_json(const Json& j);
Json registry_json(const std::vector<synth::ClassInfo>& classes);

/// Writes images, annotations, point clouds and manifest.json. Returns the
/// manifest hash (digest of the file table).
std::string write_dataset(const synth::Dataset& dataset, const fs::path& dir);

/// Loads a dataset directory, verifying every file digest in the manifest.
synth::Dataset read_dataset(const fs::path& dir);

/// Digest recorded in manifest.json, without reading the payload.
std::string dataset_manifest_hash(const fs::path& dir);

void write_archive(const nn::ParamArchive& archive, const fs::path& path);
nn::ParamArchive read_archive(const fs::path& path);

}  // namespace fsdv::io
