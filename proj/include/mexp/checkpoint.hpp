#pragma once

#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "mexp/model.hpp"

// Checkpoint file layout:
//   "MEXP1"                    5 bytes
//   header length              uint32 little-endian
//   header                     UTF-8 JSON
//   parameters                 float32 little-endian, parameter_list order,
//                              each tensor row-major
//   Adam m then v              same layout, present when header.optimizer
namespace mexp {

inline constexpr const char* kCheckpointMagic = "MEXP1";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t epoch = 0;
  /// Free-form run description (training config, RNG position, ...).
  nlohmann::json run = nlohmann::json::object();
};

/// Writes to a temporary sibling and renames, so an interrupted save never
/// leaves a truncated checkpoint behind.
void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                     const AdamState<float>* optimizer, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  Model<float> model;
  AdamState<float> optimizer;
  bool has_optimizer = false;
  CheckpointMeta meta;
};

/// Throws DataError on a bad magic, unsupported version, parameter name or
/// shape mismatch, or truncated payload.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Header only (no tensors).
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace mexp
