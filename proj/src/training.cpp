#include "kcalnet/training.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "kcalnet/errors.hpp"
#include "kcalnet/format.hpp"

namespace kcalnet {

void AdamConfig::validate() const {
  if (!(learning_rate >= 0.0 && std::isfinite(learning_rate))) throw ConfigError("learning_rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon_adam must be positive");
}

void adam_step(std::span<Parameter* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg) {
  if (grads.size() != params.size()) {
    throw ArgumentError("adam_step got " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  }
  if (state.empty()) {
    for (Parameter* p : params) {
      state.keys.push_back(p->name);
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.keys.size() != params.size()) throw ArgumentError("optimizer state does not match the parameter list");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.keys[k] != params[k]->name) {
      throw ArgumentError("optimizer state key '" + state.keys[k] + "' does not match parameter '" + params[k]->name + "'");
    }
    if (grads[k].shape() != params[k]->value.shape() || state.m[k].shape() != params[k]->value.shape()) {
      throw ArgumentError("shape mismatch for parameter '" + params[k]->name + "'");
    }
  }

  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->value.data();
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    const auto g = grads[k].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

Var mse_loss(Var pred, Var target) {
  if (pred.value().shape() != target.value().shape()) {
    throw DimensionError("mse_loss shapes differ: " + shape_string(pred.value().shape()) + " vs " +
                         shape_string(target.value().shape()));
  }
  Var d = ops::sub(pred, target);
  return ops::mean(ops::mul(d, d));
}

std::string to_string(AugmentMode mode) {
  switch (mode) {
    case AugmentMode::kOff:
      return "off";
    case AugmentMode::kOnline:
      return "online";
    case AugmentMode::kOnce:
      return "once";
  }
  return "?";
}

AugmentMode parse_augment_mode(const std::string& text) {
  if (text == "off") return AugmentMode::kOff;
  if (text == "online") return AugmentMode::kOnline;
  if (text == "once") return AugmentMode::kOnce;
  throw ConfigError("unknown augment mode '" + text + "' (expected off, online or once)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  adam.validate();
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split_ratio must lie in (0, 1)");
  if (!(min_kcal <= max_kcal)) throw ConfigError("min_kcal exceeds max_kcal");
  try {
    augment_policy.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "epoch,loss\n";
  for (const auto& e : epochs) os << e.epoch << ',' << format_double(e.loss) << '\n';
  return os.str();
}

namespace {

enum Stream : std::uint64_t { kShuffle = 1, kDropout = 2, kAugment = 3 };

std::uint64_t stream_seed(std::uint64_t seed, Stream stream, std::uint64_t epoch) {
  return Rng::derive(seed, stream, epoch).next_u64();
}

}  // namespace

Vectorizer fit_vectorizer(const std::vector<DishRecord>& records, const ArchConfig& arch) {
  std::vector<std::string> names;
  names.reserve(records.size());
  for (const auto& r : records) names.push_back(r.dish_name);
  return fit_vocab(names, arch.vocab_size, arch.max_tokens);
}

TrainLog train(CalorieModel& model, const std::vector<DishRecord>& records, const Vectorizer* vectorizer,
               ImageCache& cache, const TrainConfig& cfg, TrainState& state, std::size_t stop_after,
               const EpochCallback& on_epoch) {
  cfg.validate();
  if (records.empty()) throw ArgumentError("cannot train on an empty dataset");
  const bool text = model.kind() == ModelKind::kMultimodal;
  if (text != (vectorizer != nullptr)) throw ArgumentError("a vectorizer is required exactly for multimodal models");
  if (cache.image_size() != model.config().image_size) throw ArgumentError("image cache size differs from the model input");

  if (state.epochs_done == 0) {
    double mean = 0.0, sq = 0.0;
    for (const auto& r : records) mean += r.calories;
    mean /= static_cast<double>(records.size());
    for (const auto& r : records) sq += (r.calories - mean) * (r.calories - mean);
    const double sd = std::sqrt(sq / static_cast<double>(records.size()));
    model.set_target_normalization(mean, sd > 0.0 ? sd : 1.0);
  }

  TrainLog log;
  log.seed = cfg.seed;
  auto params = model.parameters();
  std::vector<Tensor> grads(params.size());
  const std::size_t last = std::min(cfg.epochs, stop_after);
  for (std::size_t epoch = state.epochs_done + 1; epoch <= last; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    BatchOptions opts;
    opts.batch_size = cfg.batch_size;
    opts.shuffle_seed = stream_seed(cfg.seed, kShuffle, epoch);
    if (cfg.augment != AugmentMode::kOff) {
      opts.augment = cfg.augment_policy;
      opts.augment_seed = stream_seed(cfg.seed, kAugment, cfg.augment == AugmentMode::kOnce ? 0 : epoch);
    }
    const std::uint64_t dropout_seed = stream_seed(cfg.seed, kDropout, epoch);
    BatchStream stream(records, vectorizer, cache, opts);

    double total = 0.0;
    std::size_t batch_index = 0;
    Batch batch;
    while (stream.next(batch)) {
      Tape tape;
      Rng dropout = Rng::derive(dropout_seed, batch_index);
      const ModelInput input{&batch.images, batch.token_ids, text};
      Var loss = mse_loss(model.forward(tape, input, {Mode::kTrain, &dropout}), tape.constant(batch.targets));
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_index + 1) + ": loss is not finite");
      }
      Gradients g = tape.backward(loss);
      for (std::size_t k = 0; k < params.size(); ++k) grads[k] = g.of(*params[k]);
      adam_step(params, grads, state.adam, cfg.adam);
      total += value * static_cast<double>(batch.size());
      ++batch_index;
    }
    state.epochs_done = epoch;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = total / static_cast<double>(records.size());
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec, state);
  }
  return log;
}

}  // namespace kcalnet
