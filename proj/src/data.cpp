#include "kcalnet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "kcalnet/errors.hpp"
#include "kcalnet/format.hpp"
#include "kcalnet/image_io.hpp"

namespace kcalnet {

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool row_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    switch (ch) {
      case '"':
        quoted = true;
        row_started = true;
        break;
      case ',':
        row.push_back(std::move(field));
        field.clear();
        row_started = true;
        break;
      case '\r':
        break;
      case '\n':
        if (row_started || !field.empty()) {
          row.push_back(std::move(field));
          rows.push_back(std::move(row));
        }
        field.clear();
        row.clear();
        row_started = false;
        break;
      default:
        field += ch;
        row_started = true;
    }
  }
  if (quoted) throw DatasetError("unterminated quoted field in CSV");
  if (row_started || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string csv_field(const std::string& value) {
  if (value.find_first_of(",\"\r\n") == std::string::npos) return value;
  std::string out = "\"";
  for (char ch : value) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

std::string LoadReport::summary() const {
  std::ostringstream os;
  os << "rows " << rows << ", kept " << kept << ", dropped " << dropped() << " (missing name " << missing_name
     << ", bad calories " << bad_calories << ", out of range " << out_of_range << ", missing image " << missing_image
     << ", duplicate id " << duplicate_id << ", malformed " << malformed << ")";
  return os.str();
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::optional<double> parse_number(const std::string& text) {
  const std::string t = trim(text);
  if (t.empty()) return std::nullopt;
  double v = 0.0;
  const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || end != t.data() + t.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace

std::vector<DishRecord> load_metadata(const std::filesystem::path& csv_path, const MetadataOptions& options,
                                      LoadReport* report) {
  if (!(options.min_kcal <= options.max_kcal)) throw ArgumentError("min_kcal exceeds max_kcal");
  const auto rows = parse_csv(read_text_file(csv_path));
  if (rows.empty()) throw DatasetError(csv_path.string() + " has no header row");

  const auto& header = rows.front();
  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (trim(header[i]) == name) return i;
    return std::nullopt;
  };
  const auto id_col = column("dish_id");
  const auto name_col = column("dish_name");
  const auto kcal_col = column("total_calories");
  if (!id_col || !kcal_col) throw DatasetError(csv_path.string() + " needs dish_id and total_calories columns");
  if (!name_col && options.require_names) throw DatasetError(csv_path.string() + " has no dish_name column");

  const auto image_dir = options.image_dir.value_or(csv_path.parent_path() / "images");
  LoadReport r;
  std::set<std::string> seen;
  std::vector<DishRecord> records;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    ++r.rows;
    const std::size_t needed = std::max({*id_col, *kcal_col, name_col.value_or(0)}) + 1;
    if (row.size() < needed || trim(row[*id_col]).empty()) {
      ++r.malformed;
      continue;
    }
    DishRecord rec;
    rec.dish_id = trim(row[*id_col]);
    if (name_col) {
      rec.dish_name = trim(row[*name_col]);
      if (rec.dish_name.empty()) {
        ++r.missing_name;
        continue;
      }
    }
    const auto kcal = parse_number(row[*kcal_col]);
    if (!kcal || *kcal <= 0.0) {
      ++r.bad_calories;
      continue;
    }
    if (*kcal < options.min_kcal || *kcal > options.max_kcal) {
      ++r.out_of_range;
      continue;
    }
    rec.calories = *kcal;
    rec.image_path = image_dir / (rec.dish_id + ".png");
    if (!std::filesystem::is_regular_file(rec.image_path)) {
      ++r.missing_image;
      continue;
    }
    if (!seen.insert(rec.dish_id).second) {
      ++r.duplicate_id;
      continue;
    }
    records.push_back(std::move(rec));
  }
  r.kept = records.size();
  if (report) *report = r;
  if (records.empty()) throw DatasetError(csv_path.string() + ": no usable rows; " + r.summary());
  return records;
}

SplitDataset split(const std::vector<DishRecord>& records, double ratio, std::uint64_t seed) {
  if (records.size() < 2) throw ArgumentError("split needs at least 2 records");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ArgumentError("split ratio must lie in (0, 1)");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(records.size())));
  SplitDataset out;
  out.seed = seed;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_train ? out.train : out.test).push_back(records[order[i]]);
  return out;
}

void AugmentPolicy::validate() const {
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ArgumentError("flip_prob must lie in [0, 1]");
  if (!(brightness_lo <= 1.0 && 1.0 <= brightness_hi && brightness_lo >= 0.0))
    throw ArgumentError("brightness range must contain 1");
  if (!(contrast_lo <= 1.0 && 1.0 <= contrast_hi && contrast_lo >= 0.0))
    throw ArgumentError("contrast range must contain 1");
}

AugmentDraw draw_augmentation(const AugmentPolicy& policy, Rng& rng) {
  policy.validate();
  AugmentDraw d;
  d.flip = rng.bernoulli(policy.flip_prob);
  d.brightness = rng.uniform(policy.brightness_lo, policy.brightness_hi);
  d.contrast = rng.uniform(policy.contrast_lo, policy.contrast_hi);
  return d;
}

Tensor flip_horizontal(const Tensor& hwc) {
  if (hwc.rank() != 3) throw DimensionError("flip expects H x W x C, got " + shape_string(hwc.shape()));
  const std::size_t H = hwc.dim(0), W = hwc.dim(1), C = hwc.dim(2);
  Tensor out(hwc.shape());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) out[(y * W + x) * C + c] = hwc[(y * W + (W - 1 - x)) * C + c];
  return out;
}

Tensor apply_augmentation(const Tensor& hwc, const AugmentDraw& draw) {
  Tensor out = draw.flip ? flip_horizontal(hwc) : hwc;
  if (draw.brightness == 1.0 && draw.contrast == 1.0) return out;
  for (auto& v : out.data()) v *= draw.brightness;
  double mean = 0.0;
  for (double v : out.data()) mean += v;
  mean /= static_cast<double>(std::max<std::size_t>(out.size(), 1));
  for (auto& v : out.data()) v = std::clamp(mean + draw.contrast * (v - mean), 0.0, 1.0);
  return out;
}

Tensor augment(const Tensor& hwc, const AugmentPolicy& policy, Rng& rng) {
  return apply_augmentation(hwc, draw_augmentation(policy, rng));
}

const Tensor& ImageCache::get(const DishRecord& record) {
  auto it = images_.find(record.image_path);
  if (it != images_.end()) return it->second;
  try {
    return images_.emplace(record.image_path, load_image(record.image_path, image_size_)).first->second;
  } catch (const IoError& e) {
    throw IoError("dish " + record.dish_id + ": " + e.what());
  }
}

void ImageCache::put(const std::filesystem::path& path, const Tensor& hwc) {
  images_.insert_or_assign(path, resize_bilinear(hwc, image_size_, image_size_));
}

BatchStream::BatchStream(const std::vector<DishRecord>& records, const Vectorizer* vectorizer, ImageCache& cache,
                         BatchOptions options)
    : records_(records), vectorizer_(vectorizer), cache_(cache), options_(std::move(options)), order_(records.size()) {
  if (options_.batch_size == 0) throw ArgumentError("batch_size must be at least 1");
  if (options_.augment) options_.augment->validate();
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (options_.shuffle_seed) {
    Rng rng(*options_.shuffle_seed);
    rng.shuffle(order_);
  }
}

std::size_t BatchStream::batch_count() const {
  return (records_.size() + options_.batch_size - 1) / options_.batch_size;
}

bool BatchStream::next(Batch& out) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t b = std::min(options_.batch_size, order_.size() - cursor_);
  const std::size_t S = cache_.image_size();
  const std::size_t pixels = S * S * 3;
  out.images = Tensor({b, S, S, 3});
  out.targets = Tensor({b, 1});
  out.token_ids.clear();
  out.dish_ids.clear();
  for (std::size_t k = 0; k < b; ++k) {
    const std::size_t index = order_[cursor_ + k];
    const DishRecord& rec = records_[index];
    const Tensor& img = cache_.get(rec);
    std::span<const double> src = img.data();
    Tensor augmented;
    if (options_.augment) {
      Rng rng = Rng::derive(options_.augment_seed, index);
      augmented = augment(img, *options_.augment, rng);
      src = augmented.data();
    }
    std::copy(src.begin(), src.end(), out.images.data().begin() + static_cast<std::ptrdiff_t>(k * pixels));
    out.targets[k] = rec.calories;
    out.dish_ids.push_back(rec.dish_id);
    if (vectorizer_) {
      const auto ids = vectorizer_->vectorize(rec.dish_name);
      out.token_ids.insert(out.token_ids.end(), ids.begin(), ids.end());
    }
  }
  cursor_ += b;
  return true;
}

std::vector<Batch> make_batches(const std::vector<DishRecord>& records, const Vectorizer* vectorizer, ImageCache& cache,
                                const BatchOptions& options) {
  BatchStream stream(records, vectorizer, cache, options);
  std::vector<Batch> out;
  Batch b;
  while (stream.next(b)) out.push_back(b);
  return out;
}

}  // namespace kcalnet
