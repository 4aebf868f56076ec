#include "kcalnet/model.hpp"

#include <cmath>

#include "kcalnet/errors.hpp"

namespace kcalnet {

std::string to_string(ModelKind kind) { return kind == ModelKind::kUnimodal ? "unimodal" : "multimodal"; }

ModelKind parse_model_kind(const std::string& text) {
  if (text == "unimodal") return ModelKind::kUnimodal;
  if (text == "multimodal") return ModelKind::kMultimodal;
  throw ConfigError("unknown model kind '" + text + "' (expected unimodal or multimodal)");
}

ArchConfig ArchConfig::micro() { return ArchConfig{}; }

ArchConfig ArchConfig::full_scale() {
  ArchConfig cfg;
  cfg.image_size = 224;
  cfg.stem_channels = 32;
  cfg.backbone_widths = {16, 24, 32, 64, 96, 160, 320};
  cfg.backbone_blocks = {1, 2, 3, 4, 3, 3, 1};
  cfg.backbone_strides = {1, 2, 2, 2, 1, 2, 1};
  cfg.backbone_expansions = {1, 6, 6, 6, 6, 6, 6};
  cfg.head_channels = 1280;
  cfg.dense_units = {64, 32};
  cfg.dropout_rate = 0.2;
  cfg.vocab_size = 1000;
  cfg.max_tokens = 16;
  cfg.embed_dim = 1280;
  cfg.attention_heads = 2;
  cfg.key_dim = 64;
  return cfg;
}

std::size_t ArchConfig::feature_dim() const {
  if (head_channels > 0) return head_channels;
  return backbone_widths.empty() ? stem_channels : backbone_widths.back();
}

std::size_t ArchConfig::feature_grid() const {
  std::size_t s = (image_size + 1) / 2;
  for (auto stride : backbone_strides) s = (s + stride - 1) / stride;
  return s;
}

void ArchConfig::validate(ModelKind kind) const {
  const auto fail = [](const std::string& what) { throw ConfigError("invalid architecture: " + what); };
  if (image_size == 0) fail("image_size must be positive");
  if (stem_channels == 0) fail("stem_channels must be positive");
  const std::size_t stages = backbone_widths.size();
  if (stages == 0) fail("backbone_widths must not be empty");
  if (backbone_blocks.size() != stages || backbone_strides.size() != stages || backbone_expansions.size() != stages) {
    fail("backbone widths/blocks/strides/expansions must have equal lengths");
  }
  for (std::size_t i = 0; i < stages; ++i) {
    if (backbone_widths[i] == 0) fail("backbone widths must be positive");
    if (backbone_blocks[i] == 0) fail("every stage needs at least one block");
    if (backbone_strides[i] != 1 && backbone_strides[i] != 2) fail("stage strides must be 1 or 2");
    if (backbone_expansions[i] == 0) fail("expansion factors must be positive");
  }
  if (dense_units.size() != 2) fail("dense_units must list exactly two widths");
  if (dense_units[0] == 0 || dense_units[1] == 0) fail("dense widths must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
  if (kind == ModelKind::kMultimodal) {
    if (vocab_size < 3) fail("vocab_size must exceed the two reserved ids");
    if (max_tokens == 0) fail("max_tokens must be positive");
    if (attention_heads == 0 || key_dim == 0) fail("attention_heads and key_dim must be positive");
    if (embed_dim != feature_dim()) {
      fail("embed_dim (" + std::to_string(embed_dim) + ") must equal the backbone feature width (" +
           std::to_string(feature_dim()) + ")");
    }
  }
}

CalorieModel CalorieModel::build(ModelKind kind, const ArchConfig& cfg, std::uint64_t seed) {
  cfg.validate(kind);
  CalorieModel m(kind, cfg);

  Rng backbone_init = Rng::derive(seed, 1);
  auto& bb = m.backbone_;
  bb.stem.emplace("backbone.stem", 3, 3, cfg.stem_channels, 2, backbone_init);
  bb.stem_bn.emplace("backbone.stem_bn", cfg.stem_channels);
  std::size_t channels = cfg.stem_channels;
  for (std::size_t stage = 0; stage < cfg.backbone_widths.size(); ++stage) {
    for (std::size_t b = 0; b < cfg.backbone_blocks[stage]; ++b) {
      const std::string name = "backbone.stage" + std::to_string(stage) + ".block" + std::to_string(b);
      const std::size_t stride = b == 0 ? cfg.backbone_strides[stage] : 1;
      bb.blocks.emplace_back(name, channels, cfg.backbone_widths[stage], cfg.backbone_expansions[stage], stride,
                             backbone_init);
      channels = cfg.backbone_widths[stage];
    }
  }
  if (cfg.head_channels > 0) {
    bb.head.emplace("backbone.head", 1, channels, cfg.head_channels, 1, backbone_init);
    bb.head_bn.emplace("backbone.head_bn", cfg.head_channels);
  }

  const std::size_t D = cfg.feature_dim();
  std::size_t fused = D;
  if (kind == ModelKind::kMultimodal) {
    Rng text_init = Rng::derive(seed, 2);
    m.embedding_.emplace("text.embedding", cfg.vocab_size, cfg.embed_dim, text_init);
    Rng attention_init = Rng::derive(seed, 3);
    m.attention_.emplace("fusion.attention", D, cfg.attention_heads, cfg.key_dim, attention_init);
    const std::size_t grid = cfg.feature_grid();
    fused = D + cfg.embed_dim + grid * grid * D;
  }

  Rng head_init = Rng::derive(seed, 4);
  m.head_.hidden.emplace_back("head.dense0", fused, cfg.dense_units[0], head_init);
  m.head_.hidden.emplace_back("head.dense1", cfg.dense_units[0], cfg.dense_units[1], head_init);
  m.head_.dropout = DropoutLayer(cfg.dropout_rate);
  m.head_.output.emplace("head.output", cfg.dense_units[1], 1, head_init);
  return m;
}

CalorieModel build_unimodal(const ArchConfig& cfg, std::uint64_t seed) {
  return CalorieModel::build(ModelKind::kUnimodal, cfg, seed);
}

CalorieModel build_multimodal(const ArchConfig& cfg, std::uint64_t seed) {
  return CalorieModel::build(ModelKind::kMultimodal, cfg, seed);
}

Var CalorieModel::backbone_forward(Tape& tape, Var x, Mode mode) const {
  const auto& bb = backbone_;
  Var h = ops::relu6(bb.stem_bn->forward(tape, bb.stem->forward(tape, x), mode));
  for (const auto& block : bb.blocks) h = block.forward(tape, h, mode);
  if (bb.head) h = ops::relu6(bb.head_bn->forward(tape, bb.head->forward(tape, h), mode));
  return h;
}

Var CalorieModel::forward(Tape& tape, const ModelInput& input, const ForwardContext& ctx) const {
  if (!input.images) throw ArgumentError("forward requires an image batch");
  const Tensor& images = *input.images;
  const std::size_t S = cfg_.image_size;
  if (images.rank() != 4 || images.dim(1) != S || images.dim(2) != S || images.dim(3) != 3) {
    throw DimensionError("expected images of shape [B x " + std::to_string(S) + " x " + std::to_string(S) +
                         " x 3], got " + shape_string(images.shape()));
  }
  const std::size_t B = images.dim(0);
  if (kind_ == ModelKind::kUnimodal && input.has_text) {
    throw ArgumentError("the unimodal model does not accept text input");
  }
  if (kind_ == ModelKind::kMultimodal) {
    if (!input.has_text) throw ArgumentError("the multimodal model requires token ids");
    if (input.token_ids.size() != B * cfg_.max_tokens) {
      throw DimensionError("expected " + std::to_string(B * cfg_.max_tokens) + " token ids, got " +
                           std::to_string(input.token_ids.size()));
    }
  }

  Var fmap = backbone_forward(tape, tape.constant(images), ctx.mode);
  Var features = ops::reduce_mean(fmap, {1, 2});
  if (kind_ == ModelKind::kMultimodal) {
    const Shape& fs = fmap.shape();
    const std::size_t D = fs[3];
    EmbeddedText text = embedding_->embed_and_pool(tape, input.token_ids, B, cfg_.max_tokens);
    Var queries = ops::reshape(fmap, {B, fs[1] * fs[2], D});
    AttentionOutput attended = attention_->forward(tape, queries, text.sequence);
    const Var parts[] = {features, text.pooled, ops::flatten(attended.output)};
    features = ops::concat(parts);
  }

  Var h = features;
  for (const auto& dense : head_.hidden) {
    h = head_.dropout.forward(tape, ops::relu(dense.forward(tape, h)), ctx);
  }
  Var raw = head_.output->forward(tape, h);
  return ops::add_scalar(ops::scale(raw, target_scale_), target_offset_);
}

Tensor CalorieModel::predict(const Tensor& images, std::span<const std::size_t> token_ids) const {
  Tape tape;
  ModelInput input{&images, token_ids, !token_ids.empty()};
  return forward(tape, input, ForwardContext{Mode::kEval, nullptr}).value();
}

std::vector<Parameter*> CalorieModel::parameters() {
  std::vector<Parameter*> out;
  auto& bb = backbone_;
  bb.stem->collect(out);
  bb.stem_bn->collect(out);
  for (auto& block : bb.blocks) block.collect(out);
  if (bb.head) {
    bb.head->collect(out);
    bb.head_bn->collect(out);
  }
  if (embedding_) embedding_->collect(out);
  if (attention_) attention_->collect(out);
  for (auto& dense : head_.hidden) dense.collect(out);
  head_.output->collect(out);
  return out;
}

std::vector<const Parameter*> CalorieModel::parameters() const {
  auto mutable_params = const_cast<CalorieModel*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

std::vector<BatchNormLayer*> CalorieModel::batch_norms() {
  std::vector<BatchNormLayer*> out;
  auto& bb = backbone_;
  out.push_back(&*bb.stem_bn);
  for (auto& block : bb.blocks) block.collect_norms(out);
  if (bb.head_bn) out.push_back(&*bb.head_bn);
  return out;
}

std::vector<const BatchNormLayer*> CalorieModel::batch_norms() const {
  auto norms = const_cast<CalorieModel*>(this)->batch_norms();
  return {norms.begin(), norms.end()};
}

std::size_t CalorieModel::param_count() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.size();
  return n;
}

std::vector<std::string> CalorieModel::layer_signatures() const {
  std::vector<std::string> out;
  const auto& bb = backbone_;
  out.push_back(bb.stem->signature());
  out.push_back("batchnorm[" + std::to_string(bb.stem_bn->channels()) + "]");
  out.push_back("relu6");
  for (const auto& block : bb.blocks) block.signatures(out);
  if (bb.head) {
    out.push_back(bb.head->signature());
    out.push_back("batchnorm[" + std::to_string(bb.head_bn->channels()) + "]");
    out.push_back("relu6");
  }
  out.push_back("global_avg_pool");
  if (kind_ == ModelKind::kMultimodal) {
    out.push_back("text_vectorizer[" + std::to_string(cfg_.max_tokens) + "]");
    out.push_back("embedding[" + std::to_string(cfg_.vocab_size) + "x" + std::to_string(cfg_.embed_dim) + "]");
    out.push_back("text_avg_pool");
    out.push_back(attention_->signature());
    out.push_back("flatten");
    out.push_back("concat");
  }
  for (const auto& dense : head_.hidden) {
    out.push_back(dense.signature());
    out.push_back("relu");
    out.push_back("dropout(" + std::to_string(head_.dropout.rate()) + ")");
  }
  out.push_back(head_.output->signature());
  return out;
}

void CalorieModel::set_target_normalization(double offset, double scale) {
  if (!std::isfinite(offset) || !std::isfinite(scale) || scale <= 0.0) {
    throw ArgumentError("target normalization needs a finite offset and a positive scale");
  }
  target_offset_ = offset;
  target_scale_ = scale;
}

}  // namespace kcalnet
