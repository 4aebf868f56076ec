#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "kcalnet/model.hpp"
#include "kcalnet/text.hpp"
#include "kcalnet/training.hpp"

namespace kcalnet {

/// Checkpoint layout (little-endian):
///   "KCALNETC"  u32 version  u64 payload_size  payload  u64 fnv1a64(payload)
/// The payload holds the model kind, the config as key = value text, the
/// vocabulary, the dataset fingerprint, target normalization, parameters with
/// shape headers, batch-norm running statistics, Adam moments and epoch count.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  CalorieModel model;
  TrainConfig config;
  std::optional<Vectorizer> vectorizer;
  TrainState state;
  std::string dataset_fingerprint;
};

/// Written to a temporary file and renamed, so `path` is never half written.
void save_checkpoint(const std::filesystem::path& path, const CalorieModel& model, const TrainConfig& config,
                     const Vectorizer* vectorizer, const TrainState& state, const std::string& dataset_fingerprint);

/// Throws IoError if unreadable and CheckpointError on a bad magic, version,
/// checksum, truncation or a parameter that does not fit the architecture.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace kcalnet
