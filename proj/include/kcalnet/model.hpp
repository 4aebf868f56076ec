#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kcalnet/layers.hpp"

namespace kcalnet {

enum class ModelKind { kUnimodal, kMultimodal };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& text);

/// Architecture of both regressors. The backbone is a stem convolution (3x3,
/// stride 2) followed by stages of inverted-residual blocks; only the first block
/// of a stage applies the stage stride.
struct ArchConfig {
  std::size_t image_size = 64;
  std::size_t stem_channels = 8;
  std::vector<std::size_t> backbone_widths{8, 32};
  std::vector<std::size_t> backbone_blocks{1, 1};
  std::vector<std::size_t> backbone_strides{1, 2};
  std::vector<std::size_t> backbone_expansions{2, 2};
  /// Optional final 1x1 convolution width; 0 disables it.
  std::size_t head_channels = 0;
  std::vector<std::size_t> dense_units{32, 16};
  double dropout_rate = 0.1;
  std::size_t vocab_size = 64;
  std::size_t max_tokens = 8;
  std::size_t embed_dim = 32;
  std::size_t attention_heads = 2;
  std::size_t key_dim = 8;

  /// Desk-scale default (64 x 64 input).
  static ArchConfig micro();
  /// MobileNetV2 (width 1.0, 224 x 224) backbone with a 1280-wide feature map.
  static ArchConfig full_scale();

  /// Channel width D of the backbone output.
  std::size_t feature_dim() const;
  /// Side length of the backbone output grid.
  std::size_t feature_grid() const;

  /// Throws ConfigError on an inconsistent configuration.
  void validate(ModelKind kind) const;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// A single batch of model inputs. `token_ids` is batch x max_tokens, row-major,
/// and must be present exactly when the model is multimodal.
struct ModelInput {
  const Tensor* images = nullptr;
  std::span<const std::size_t> token_ids{};
  bool has_text = false;
};

/// Image-only or image+text calorie regressor.
///
/// Both kinds share the same backbone and dense head so that the only
/// difference between them is the text branch and its fusion. Predictions are
/// `target_offset + target_scale * head_output`, in kcal.
class CalorieModel {
 public:
  static CalorieModel build(ModelKind kind, const ArchConfig& cfg, std::uint64_t seed);

  CalorieModel(CalorieModel&&) = default;
  CalorieModel& operator=(CalorieModel&&) = default;

  /// Records the forward pass on `tape`; result is [B x 1] kcal.
  Var forward(Tape& tape, const ModelInput& input, const ForwardContext& ctx) const;
  /// Eval-mode prediction without gradient bookkeeping.
  Tensor predict(const Tensor& images, std::span<const std::size_t> token_ids = {}) const;

  ModelKind kind() const { return kind_; }
  const ArchConfig& config() const { return cfg_; }

  /// Trainable parameters in a fixed order.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::vector<BatchNormLayer*> batch_norms();
  std::vector<const BatchNormLayer*> batch_norms() const;
  std::size_t param_count() const;

  /// Ordered layer descriptions (type and parameter shape).
  std::vector<std::string> layer_signatures() const;

  double target_offset() const { return target_offset_; }
  double target_scale() const { return target_scale_; }
  void set_target_normalization(double offset, double scale);

 private:
  CalorieModel(ModelKind kind, ArchConfig cfg) : kind_(kind), cfg_(std::move(cfg)) {}

  struct Backbone {
    std::optional<ConvLayer> stem;
    std::optional<BatchNormLayer> stem_bn;
    std::vector<InvertedResidualBlock> blocks;
    std::optional<ConvLayer> head;
    std::optional<BatchNormLayer> head_bn;
  };
  struct Head {
    std::vector<DenseLayer> hidden;
    DropoutLayer dropout{0.0};
    std::optional<DenseLayer> output;
  };

  Var backbone_forward(Tape& tape, Var x, Mode mode) const;

  ModelKind kind_;
  ArchConfig cfg_;
  Backbone backbone_;
  std::optional<EmbeddingTable> embedding_;
  std::optional<MultiHeadAttention> attention_;
  Head head_;
  double target_offset_ = 0.0;
  double target_scale_ = 1.0;
};

CalorieModel build_unimodal(const ArchConfig& cfg, std::uint64_t seed);
CalorieModel build_multimodal(const ArchConfig& cfg, std::uint64_t seed);

}  // namespace kcalnet
