#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kcalnet/data.hpp"
#include "kcalnet/image_io.hpp"

namespace kcalnet {

struct SynthOptions {
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  /// Share s of the calorie scale carried by the dish-name modifier token.
  double text_signal = 0.5;
  std::size_t image_size = 64;
  double base_kcal = 600.0;
};

/// One of four modifier tokens and its calorie multiplier g.
struct SynthModifier {
  std::string token;
  double multiplier;
};

/// g in {1 - 3h, 1 - h, 1 + h, 1 + 3h} with h = sqrt(1/60): mean 1 and
/// variance 1/12, the same as the area factor f.
const std::vector<SynthModifier>& synth_modifiers();

/// Area factor f(A) = 0.5 + (A - 0.05) / 0.4 for blob area fraction A ~ U[0.05, 0.45].
double synth_area_factor(double area);

/// Plates of colored blobs on a light background. Each dish has a nominal blob
/// area A and a modifier token t, and
///   calories = base * (1 - s) * f(A) + base * s * g(t).
/// With s = 0 the token is drawn but never used.
struct SynthDataset {
  SynthOptions options;
  /// image_path is images/<dish_id>.png relative to the dataset root.
  std::vector<DishRecord> records;
  std::vector<Image8> images;
  std::vector<double> areas;
  std::vector<std::size_t> modifiers;

  /// key = value description of the generator.
  std::string description() const;
};

/// Throws ArgumentError for n < 10 or text_signal outside [0, 1].
SynthDataset synth_generate(const SynthOptions& options);

/// Writes metadata.csv, images/<dish_id>.png and generator.txt under `root`.
void write_synth(const SynthDataset& data, const std::filesystem::path& root);

/// Makes records loadable from memory: stores every image in `cache` under
/// `root / image_path` and returns records pointing there.
std::vector<DishRecord> prime_cache(const SynthDataset& data, const std::filesystem::path& root, ImageCache& cache);

}  // namespace kcalnet
