#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "kcalnet/training.hpp"

namespace kcalnet {

/// Every TrainConfig field as `key -> text`. Lists are comma separated and
/// reals use the shortest round-trip form, so parsing the map back is exact.
std::map<std::string, std::string> to_key_values(const TrainConfig& cfg);
std::string to_config_text(const TrainConfig& cfg);

/// Overwrites the named fields. Throws ConfigError on unknown keys or bad values.
void apply_key_values(TrainConfig& cfg, const std::map<std::string, std::string>& values);

/// Layers defaults < file < overrides, then validates.
TrainConfig resolve_config(const std::filesystem::path* file, const std::map<std::string, std::string>& overrides);

/// Named starting points: "micro" (the default) and "full".
TrainConfig preset_config(const std::string& name);

}  // namespace kcalnet
