#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "learngene/inherit.hpp"
#include "learngene/netgraph.hpp"

namespace lg {

inline constexpr int kCheckpointVersion = 1;

enum class CheckpointRole { Model, Bundle };
std::string to_string(CheckpointRole role);

struct TensorEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;  // bytes into the blob
  std::size_t length = 0;  // bytes
};

struct CheckpointManifest {
  int version = kCheckpointVersion;
  CheckpointRole role = CheckpointRole::Model;
  std::string blob;  // file name next to the manifest
  std::size_t blob_bytes = 0;
  std::uint32_t checksum = 0;  // CRC-32 of the blob
  std::vector<TensorEntry> tensors;
};

/// Blob path for a manifest path: "<path>.bin".
std::filesystem::path blob_path(const std::filesystem::path& manifest);

/// Writes `<path>` (JSON manifest) and `<path>.bin` (little-endian float32).
void write_checkpoint(const Model& model, const std::filesystem::path& path);
void write_checkpoint(const LearngeneBundle& bundle, const std::filesystem::path& path);

/// Both throw IoError on a missing file, malformed or edited manifest,
/// version mismatch, checksum mismatch or tensor table inconsistency.
Model read_model_checkpoint(const std::filesystem::path& path);
LearngeneBundle read_bundle_checkpoint(const std::filesystem::path& path);

/// Reads and verifies the manifest and blob without building anything.
CheckpointManifest inspect_checkpoint(const std::filesystem::path& path);

}  // namespace lg
