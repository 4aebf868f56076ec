#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kcalnet/data.hpp"
#include "kcalnet/model.hpp"

namespace kcalnet {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;

  void validate() const;
};

/// Per-parameter moments keyed by parameter name, and the step count.
struct AdamState {
  std::vector<std::string> keys;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  bool empty() const { return keys.empty(); }
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update. An empty state is sized from `params` first.
/// Throws ArgumentError when grads or state do not line up with params.
void adam_step(std::span<Parameter* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg);

/// Mean over the batch of squared differences; shapes must match.
Var mse_loss(Var pred, Var target);

enum class AugmentMode {
  kOff,
  kOnline,  // fresh draws every epoch
  kOnce,    // one fixed draw per image for the whole run
};

std::string to_string(AugmentMode mode);
AugmentMode parse_augment_mode(const std::string& text);

struct TrainConfig {
  ArchConfig arch = ArchConfig::micro();
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  AdamConfig adam;
  /// Drives initialization, shuffling, dropout and augmentation.
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  double split_ratio = 0.8;
  double min_kcal = 1.0;
  double max_kcal = 3000.0;
  AugmentMode augment = AugmentMode::kOnline;
  AugmentPolicy augment_policy;

  /// Throws ConfigError.
  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean squared error over the epoch, kcal^2
  double seconds = 0.0;
};

struct TrainLog {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;

  /// Header `epoch,loss`. Timings are left out so the file is reproducible.
  std::string to_csv() const;
};

/// Everything besides the model needed to continue a run.
struct TrainState {
  AdamState adam;
  std::size_t epochs_done = 0;
};

/// Called after each epoch; may save a checkpoint.
using EpochCallback = std::function<void(const EpochRecord&, const TrainState&)>;

/// Runs epochs state.epochs_done + 1 .. min(cfg.epochs, stop_after). Every
/// random draw of epoch e derives from (cfg.seed, e), so stopping and resuming
/// from a checkpoint reproduces an uninterrupted run. A fresh run (epochs_done 0)
/// first sets the model's target normalization to the mean and standard
/// deviation of the training calories.
///
/// Throws DivergenceError naming the epoch and batch on a non-finite loss.
TrainLog train(CalorieModel& model, const std::vector<DishRecord>& records, const Vectorizer* vectorizer,
               ImageCache& cache, const TrainConfig& cfg, TrainState& state, std::size_t stop_after = SIZE_MAX,
               const EpochCallback& on_epoch = {});

/// Vocabulary fitted on the names of `records`, sized by cfg.arch.
Vectorizer fit_vectorizer(const std::vector<DishRecord>& records, const ArchConfig& arch);

}  // namespace kcalnet
