#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "kcalnet/model.hpp"
#include "kcalnet/stats.hpp"

namespace kcalnet {

/// $KCALNET_OUTPUT_ROOT if set, else "runs".
std::filesystem::path output_root();

/// Content hash of the metadata file combined with the split seed.
std::string dataset_fingerprint(const std::filesystem::path& data_dir, std::uint64_t split_seed);

struct SynthArgs {
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  double text_signal = 0.5;
  std::size_t image_size = 64;
  std::optional<std::filesystem::path> out;
  bool force = false;
};

struct TrainArgs {
  std::filesystem::path data;
  ModelKind model = ModelKind::kUnimodal;
  std::optional<std::filesystem::path> config;
  /// Highest-precedence config entries (flags and --set).
  std::map<std::string, std::string> overrides;
  std::optional<std::filesystem::path> out;
  /// Continue the run stored in this checkpoint.
  std::optional<std::filesystem::path> resume;
  /// Stop after this epoch (the checkpoint can be resumed later).
  std::optional<std::size_t> stop_after;
  std::vector<std::string> command_line;
};

struct EvalArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::optional<std::filesystem::path> out;
  /// "test" (default), "train" or "all".
  std::string split = "test";
  std::vector<std::string> command_line;
};

struct CompareArgs {
  /// An eval output directory or a predictions CSV.
  std::filesystem::path eval_a;
  std::filesystem::path eval_b;
  double alpha = 0.1;
  std::optional<std::filesystem::path> out;
  std::string name_a = "unimodal";
  std::string name_b = "multimodal";
};

/// Each command writes its artifacts and progress lines to `log`; failures are
/// reported by exceptions from errors.hpp.
std::filesystem::path cmd_synth(const SynthArgs& args, std::ostream& log);
std::filesystem::path cmd_train(const TrainArgs& args, std::ostream& log);
std::filesystem::path cmd_eval(const EvalArgs& args, std::ostream& log);
Comparison cmd_compare(const CompareArgs& args, std::ostream& log);
/// Returns true when every check passed.
bool cmd_verify(const std::string& suite, const std::optional<std::filesystem::path>& fixtures, std::ostream& log);

/// Pairs B to A's dish order. Throws PairingError naming up to five dish ids
/// present on one side only.
void align_pairs(const PredictionSet& a, PredictionSet& b);

}  // namespace kcalnet
