#include "kcalnet/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "kcalnet/errors.hpp"
#include "kcalnet/format.hpp"

namespace kcalnet {

const std::vector<SynthModifier>& synth_modifiers() {
  static const std::vector<SynthModifier> kModifiers = [] {
    const double h = std::sqrt(1.0 / 60.0);
    return std::vector<SynthModifier>{{"lean", 1 - 3 * h}, {"light", 1 - h}, {"hearty", 1 + h}, {"loaded", 1 + 3 * h}};
  }();
  return kModifiers;
}

double synth_area_factor(double area) { return 0.5 + (area - 0.05) / 0.4; }

namespace {

const std::vector<std::string> kFillers{"chicken", "rice",  "salad", "pasta", "curry", "soup",
                                        "noodles", "tofu",  "beef",  "bowl",  "wrap",  "stew"};

constexpr double kAreaLo = 0.05;
constexpr double kAreaHi = 0.45;

std::uint8_t byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L)); }

Image8 render(std::size_t size, double area, Rng& rng) {
  const double S = static_cast<double>(size);
  Image8 img(size, size);
  const double plate = rng.uniform(0.8, 0.95);
  double bg[3];
  for (double& c : bg) c = plate + rng.uniform(-0.03, 0.03);
  for (std::size_t i = 0; i < size * size; ++i)
    for (int c = 0; c < 3; ++c) img.pixels[i * 3 + c] = byte(bg[c] + rng.uniform(-0.02, 0.02));

  // k blobs, one per vertical strip, so they never overlap.
  const std::size_t k = 1 + rng.below(3);
  std::vector<double> weights(k);
  for (double& w : weights) w = rng.uniform(0.8, 1.2);
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  const double strip = S / static_cast<double>(k);
  for (std::size_t b = 0; b < k; ++b) {
    const double blob_area = area * weights[b] / total * S * S;
    const double alpha_min = blob_area / (std::numbers::pi * (strip / 2) * 0.95 * (S / 2));
    const double rx = rng.uniform(alpha_min, 0.95) * strip / 2;
    const double ry = blob_area / (std::numbers::pi * rx);
    const double cx = b * strip + rx + rng.uniform() * (strip - 2 * rx);
    const double cy = ry + rng.uniform() * (S - 2 * ry);
    double color[3];
    for (double& c : color) c = rng.uniform(0.1, 0.6);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        if (dx * dx + dy * dy > 1.0) continue;
        for (int c = 0; c < 3; ++c) img.at(x, y)[c] = byte(color[c] + rng.uniform(-0.02, 0.02));
      }
    }
  }
  return img;
}

std::string dish_name(std::size_t modifier, Rng& rng) {
  std::vector<std::string> words{synth_modifiers()[modifier].token};
  const std::size_t fillers = 1 + rng.below(2);
  for (std::size_t i = 0; i < fillers; ++i) words.push_back(kFillers[rng.below(kFillers.size())]);
  rng.shuffle(words);
  std::string name;
  for (const auto& w : words) name += (name.empty() ? "" : " ") + w;
  return name;
}

}  // namespace

SynthDataset synth_generate(const SynthOptions& options) {
  if (options.n < 10) throw ArgumentError("synthetic datasets need n >= 10, got " + std::to_string(options.n));
  if (!(options.text_signal >= 0.0 && options.text_signal <= 1.0)) throw ArgumentError("text_signal must lie in [0, 1]");
  if (options.image_size < 8) throw ArgumentError("synthetic image_size must be at least 8");
  if (!(options.base_kcal > 0.0)) throw ArgumentError("base_kcal must be positive");

  SynthDataset data;
  data.options = options;
  const double s = options.text_signal;
  char id[32];
  for (std::size_t i = 0; i < options.n; ++i) {
    Rng rng = Rng::derive(options.seed, i);
    const double area = rng.uniform(kAreaLo, kAreaHi);
    const std::size_t modifier = rng.below(synth_modifiers().size());
    const double g = synth_modifiers()[modifier].multiplier;

    std::snprintf(id, sizeof id, "synth_%05zu", i);
    DishRecord rec;
    rec.dish_id = id;
    rec.dish_name = dish_name(modifier, rng);
    rec.calories = options.base_kcal * ((1 - s) * synth_area_factor(area) + s * g);
    rec.image_path = std::filesystem::path("images") / (rec.dish_id + ".png");
    data.images.push_back(render(options.image_size, area, rng));
    data.records.push_back(std::move(rec));
    data.areas.push_back(area);
    data.modifiers.push_back(modifier);
  }
  return data;
}

std::string SynthDataset::description() const {
  const double s = options.text_signal;
  std::ostringstream os;
  os << "generator = blobs\n";
  os << "n = " << options.n << "\n";
  os << "seed = " << options.seed << "\n";
  os << "text_signal = " << format_double(s) << "\n";
  os << "text_dependence = " << (s == 0.0 ? "none" : "modifier_token") << "\n";
  // var f = var g = 1/12, so the token's share of calorie variance is s^2 / (s^2 + (1 - s)^2).
  os << "text_variance_fraction = " << format_double(s * s / (s * s + (1 - s) * (1 - s))) << "\n";
  os << "image_size = " << options.image_size << "\n";
  os << "base_kcal = " << format_double(options.base_kcal) << "\n";
  os << "calories = base_kcal * ((1 - text_signal) * f(area) + text_signal * g(token))\n";
  os << "f(area) = 0.5 + (area - 0.05) / 0.4, area ~ U[0.05, 0.45]\n";
  for (const auto& m : synth_modifiers()) os << "g(" << m.token << ") = " << format_double(m.multiplier) << "\n";
  return os.str();
}

void write_synth(const SynthDataset& data, const std::filesystem::path& root) {
  ensure_directory(root / "images");
  std::ostringstream csv;
  csv << "dish_id,dish_name,total_calories\n";
  for (const auto& r : data.records)
    csv << csv_field(r.dish_id) << ',' << csv_field(r.dish_name) << ',' << format_double(r.calories) << '\n';
  write_text_file(root / "metadata.csv", csv.str());
  write_text_file(root / "generator.txt", data.description());
  for (std::size_t i = 0; i < data.records.size(); ++i) write_png(root / data.records[i].image_path, data.images[i]);
}

std::vector<DishRecord> prime_cache(const SynthDataset& data, const std::filesystem::path& root, ImageCache& cache) {
  std::vector<DishRecord> out = data.records;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].image_path = root / out[i].image_path;
    cache.put(out[i].image_path, to_tensor(data.images[i]));
  }
  return out;
}

}  // namespace kcalnet
