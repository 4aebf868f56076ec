#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kcalnet/tensor.hpp"
#include "kcalnet/text.hpp"

namespace kcalnet {

struct DishRecord {
  std::string dish_id;
  std::string dish_name;
  double calories = 0.0;
  std::filesystem::path image_path;

  friend bool operator==(const DishRecord&, const DishRecord&) = default;
};

/// Parses comma-separated text with double-quoted fields ("" escapes a quote).
/// Quoted fields may span lines. A trailing newline does not produce a row.
std::vector<std::vector<std::string>> parse_csv(const std::string& text);
/// Quotes a field only when it contains a comma, quote or line break.
std::string csv_field(const std::string& value);

struct MetadataOptions {
  double min_kcal = 1.0;
  double max_kcal = 3000.0;
  /// Directory holding <dish_id>.png; defaults to "images" next to the CSV.
  std::optional<std::filesystem::path> image_dir;
  /// Without a dish_name column, ingestion fails when names are required and
  /// yields empty names otherwise.
  bool require_names = true;
};

/// Why rows were dropped.
struct LoadReport {
  std::size_t rows = 0;
  std::size_t kept = 0;
  std::size_t missing_name = 0;
  std::size_t bad_calories = 0;
  std::size_t out_of_range = 0;
  std::size_t missing_image = 0;
  std::size_t duplicate_id = 0;
  std::size_t malformed = 0;

  std::size_t dropped() const { return rows - kept; }
  std::string summary() const;
};

/// Reads `dish_id`, `dish_name` and `total_calories`; extra columns are ignored.
/// Throws IoError if unreadable and DatasetError if a required column is absent
/// or no row survives filtering.
std::vector<DishRecord> load_metadata(const std::filesystem::path& csv_path, const MetadataOptions& options = {},
                                      LoadReport* report = nullptr);

struct SplitDataset {
  std::vector<DishRecord> train;
  std::vector<DishRecord> test;
  std::uint64_t seed = 0;
};

/// Seeded shuffle, then the first floor(ratio * N) records train. Throws
/// ArgumentError for N < 2 or ratio outside (0, 1).
SplitDataset split(const std::vector<DishRecord>& records, double ratio, std::uint64_t seed);

/// Horizontal flip with probability flip_prob, brightness x -> b x, then
/// contrast about the image mean x -> m + c (x - m), then clamping to [0, 1].
struct AugmentPolicy {
  double flip_prob = 0.5;
  double brightness_lo = 0.9;
  double brightness_hi = 1.1;
  double contrast_lo = 0.9;
  double contrast_hi = 1.1;

  /// Throws ArgumentError unless both ranges are ordered and contain 1.
  void validate() const;
};

/// The random draws behind one augmentation.
struct AugmentDraw {
  bool flip = false;
  double brightness = 1.0;
  double contrast = 1.0;
};

AugmentDraw draw_augmentation(const AugmentPolicy& policy, Rng& rng);
Tensor apply_augmentation(const Tensor& hwc, const AugmentDraw& draw);
Tensor augment(const Tensor& hwc, const AugmentPolicy& policy, Rng& rng);
Tensor flip_horizontal(const Tensor& hwc);

/// Decoded and resized images keyed by path. Loading errors carry the dish id.
class ImageCache {
 public:
  explicit ImageCache(std::size_t image_size) : image_size_(image_size) {}

  const Tensor& get(const DishRecord& record);
  /// Stores an in-memory image under `path`, resized to the cache size.
  void put(const std::filesystem::path& path, const Tensor& hwc);
  std::size_t image_size() const { return image_size_; }
  std::size_t size() const { return images_.size(); }

 private:
  std::size_t image_size_;
  std::map<std::filesystem::path, Tensor> images_;
};

struct Batch {
  Tensor images;                   // b x H x W x 3
  std::vector<std::size_t> token_ids;  // b x L, empty without a vectorizer
  Tensor targets;                  // b x 1
  std::vector<std::string> dish_ids;

  std::size_t size() const { return dish_ids.size(); }
};

struct BatchOptions {
  std::size_t batch_size = 16;
  /// Absent: records keep their order.
  std::optional<std::uint64_t> shuffle_seed;
  std::optional<AugmentPolicy> augment;
  /// Augmentation draws for record i come from Rng::derive(augment_seed, i).
  std::uint64_t augment_seed = 0;
};

/// One pass over `records` in batches, the last one possibly partial. Batch
/// contents depend only on the records, the options and the cache size.
class BatchStream {
 public:
  BatchStream(const std::vector<DishRecord>& records, const Vectorizer* vectorizer, ImageCache& cache,
              BatchOptions options);

  /// Fills `out` with the next batch; false once the pass is complete.
  bool next(Batch& out);
  std::size_t batch_count() const;

 private:
  const std::vector<DishRecord>& records_;
  const Vectorizer* vectorizer_;
  ImageCache& cache_;
  BatchOptions options_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Materializes every batch of one pass.
std::vector<Batch> make_batches(const std::vector<DishRecord>& records, const Vectorizer* vectorizer, ImageCache& cache,
                                const BatchOptions& options);

}  // namespace kcalnet
