#include "kcalnet/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "kcalnet/config.hpp"
#include "kcalnet/errors.hpp"
#include "kcalnet/format.hpp"

namespace kcalnet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'K', 'C', 'A', 'L', 'N', 'E', 'T', 'C'};

class Writer {
 public:
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void tensor(const Tensor& t) {
    u64(t.rank());
    for (auto d : t.shape()) u64(d);
    raw(t.data().data(), t.size() * sizeof(double));
  }
  void raw(const void* p, std::size_t n) { bytes_.append(static_cast<const char*>(p), n); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  double f64() {
    double v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = length(1);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    const auto rank = length(8);
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = length(0);
      if (d != 0 && count > (bytes_.size() - pos_) / d) fail();
      count *= d;
    }
    if (count > (bytes_.size() - pos_) / sizeof(double)) fail();
    std::vector<double> data(count);
    raw(data.data(), count * sizeof(double));
    return Tensor(std::move(shape), std::move(data));
  }
  /// A count whose elements take at least `unit` bytes each must fit in what is left.
  std::size_t length(std::size_t unit) {
    const auto n = u64();
    if (unit > 0 && n > (bytes_.size() - pos_) / unit) fail();
    return static_cast<std::size_t>(n);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  [[noreturn]] static void fail() { throw CheckpointError("checkpoint payload is truncated or corrupt"); }
  void raw(void* p, std::size_t n) {
    if (n > bytes_.size() - pos_) fail();
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CalorieModel& model, const TrainConfig& config,
                     const Vectorizer* vectorizer, const TrainState& state, const std::string& dataset_fingerprint) {
  if (config.arch != model.config()) throw ArgumentError("checkpoint config does not match the model architecture");
  Writer w;
  w.str(to_string(model.kind()));
  w.str(to_config_text(config));
  w.u64(vectorizer != nullptr);
  if (vectorizer) {
    w.u64(vectorizer->max_tokens());
    w.u64(vectorizer->tokens().size());
    for (const auto& t : vectorizer->tokens()) w.str(t);
  }
  w.str(dataset_fingerprint);
  w.f64(model.target_offset());
  w.f64(model.target_scale());
  const auto params = model.parameters();
  w.u64(params.size());
  for (const Parameter* p : params) {
    w.str(p->name);
    w.tensor(p->value);
  }
  const auto norms = model.batch_norms();
  w.u64(norms.size());
  for (const BatchNormLayer* bn : norms) {
    w.tensor(bn->running_mean());
    w.tensor(bn->running_var());
  }
  w.u64(state.adam.t);
  w.u64(state.adam.keys.size());
  for (std::size_t k = 0; k < state.adam.keys.size(); ++k) {
    w.str(state.adam.keys[k]);
    w.tensor(state.adam.m[k]);
    w.tensor(state.adam.v[k]);
  }
  w.u64(state.epochs_done);

  Writer file;
  file.raw(kMagic, sizeof kMagic);
  const std::uint32_t version = kCheckpointVersion;
  file.raw(&version, sizeof version);
  file.u64(w.bytes().size());
  file.raw(w.bytes().data(), w.bytes().size());
  file.u64(fnv1a64(w.bytes()));
  write_text_file(path, file.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_text_file(path);
  const std::size_t header = sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < header || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError(path.string() + " is not a kcalnet checkpoint");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + sizeof kMagic, sizeof version);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  std::uint64_t payload_size;
  std::memcpy(&payload_size, bytes.data() + sizeof kMagic + sizeof version, sizeof payload_size);
  if (bytes.size() - header < sizeof(std::uint64_t) || payload_size != bytes.size() - header - sizeof(std::uint64_t))
    throw CheckpointError(path.string() + ": checkpoint is truncated");
  const std::string_view payload(bytes.data() + header, payload_size);
  std::uint64_t checksum;
  std::memcpy(&checksum, bytes.data() + header + payload_size, sizeof checksum);
  if (checksum != fnv1a64(payload)) throw CheckpointError(path.string() + ": checksum mismatch");

  Reader r(payload);
  ModelKind kind;
  TrainConfig config;
  try {
    kind = parse_model_kind(r.str());
    config = resolve_config(nullptr, parse_key_values(r.str()));
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": bad embedded config: " + e.what());
  }
  std::optional<Vectorizer> vectorizer;
  if (r.u64()) {
    const auto max_tokens = r.u64();
    std::vector<std::string> tokens(r.length(8));
    for (auto& t : tokens) t = r.str();
    vectorizer.emplace(std::move(tokens), max_tokens);
  }
  const std::string fingerprint = r.str();
  const double offset = r.f64();
  const double scale = r.f64();

  CalorieModel model = CalorieModel::build(kind, config.arch, 0);
  model.set_target_normalization(offset, scale);
  auto params = model.parameters();
  if (r.length(16) != params.size()) throw CheckpointError(path.string() + ": parameter count does not match");
  for (Parameter* p : params) {
    const std::string name = r.str();
    Tensor value = r.tensor();
    if (name != p->name || value.shape() != p->value.shape())
      throw CheckpointError(path.string() + ": parameter '" + name + "' does not fit '" + p->name + "'");
    p->value = std::move(value);
  }
  auto norms = model.batch_norms();
  if (r.length(16) != norms.size()) throw CheckpointError(path.string() + ": batch-norm count does not match");
  for (BatchNormLayer* bn : norms) {
    Tensor mean = r.tensor(), var = r.tensor();
    if (mean.shape() != bn->running_mean().shape() || var.shape() != bn->running_var().shape())
      throw CheckpointError(path.string() + ": batch-norm statistics have the wrong shape");
    bn->running_mean() = std::move(mean);
    bn->running_var() = std::move(var);
  }
  TrainState state;
  state.adam.t = r.u64();
  const auto keys = r.length(24);
  for (std::size_t k = 0; k < keys; ++k) {
    state.adam.keys.push_back(r.str());
    state.adam.m.push_back(r.tensor());
    state.adam.v.push_back(r.tensor());
  }
  state.epochs_done = r.u64();
  if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes in checkpoint payload");
  return Checkpoint{std::move(model), std::move(config), std::move(vectorizer), std::move(state), fingerprint};
}

}  // namespace kcalnet
