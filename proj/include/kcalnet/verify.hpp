#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace kcalnet {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct VerifyOptions {
  /// Frozen reference statistics (stats_fixtures.json); defaults to the copy
  /// in the source tree.
  std::optional<std::filesystem::path> fixtures;
  double layer_tolerance = 1e-6;
  double model_tolerance = 1e-5;
};

/// Suites: "gradcheck" (every layer and both micro models against central
/// differences), "stats" (fixtures from an external statistics package) and
/// "pipeline" (split, batching, augmentation and synthesis invariants).
/// Throws ArgumentError for an unknown suite.
std::vector<CheckResult> run_verify_suite(const std::string& suite, const VerifyOptions& options = {});

std::filesystem::path default_fixtures_path();

}  // namespace kcalnet
