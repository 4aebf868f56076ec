#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kcalnet/autodiff.hpp"
#include "kcalnet/ops.hpp"

namespace kcalnet {

enum class Mode { kTrain, kEval };

/// Per-forward-pass settings. Train-mode dropout draws from `rng`.
struct ForwardContext {
  Mode mode = Mode::kEval;
  Rng* rng = nullptr;
};

/// x W + b over the last axis of x. A bias-free layer computes x W.
class DenseLayer {
 public:
  DenseLayer(std::string name, std::size_t in, std::size_t out, Rng& init, bool use_bias = true);

  Var forward(Tape& tape, Var x) const;

  std::size_t in() const { return weights_.value.dim(0); }
  std::size_t out() const { return weights_.value.dim(1); }
  Parameter& weights() { return weights_; }
  Parameter& bias() { return bias_; }
  bool has_bias() const { return use_bias_; }
  void collect(std::vector<Parameter*>& out);
  std::string signature() const;

 private:
  Parameter weights_;
  Parameter bias_;
  bool use_bias_;
};

/// Inverted dropout: survivors are scaled by 1 / (1 - rate), so eval mode is the identity.
class DropoutLayer {
 public:
  explicit DropoutLayer(double rate);

  Var forward(Tape& tape, Var x, const ForwardContext& ctx) const;
  double rate() const { return rate_; }

 private:
  double rate_;
};

/// Normalizes over every axis except the last (channel) axis.
class BatchNormLayer {
 public:
  static constexpr double kMomentum = 0.99;
  static constexpr double kEpsilon = 1e-3;

  BatchNormLayer(std::string name, std::size_t channels);

  /// Train mode normalizes with batch statistics and folds them into the running
  /// statistics; eval mode uses the running statistics and mutates nothing.
  Var forward(Tape& tape, Var x, Mode mode) const;

  std::size_t channels() const { return gamma_.value.size(); }
  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }
  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }
  const std::string& name() const { return name_; }
  void collect(std::vector<Parameter*>& out);

 private:
  std::string name_;
  Parameter gamma_;
  Parameter beta_;
  // Training-step state; see the model's concurrency notes.
  mutable Tensor running_mean_;
  mutable Tensor running_var_;
};

/// Bias-free convolution (a following batch norm supplies the shift).
class ConvLayer {
 public:
  ConvLayer(std::string name, std::size_t kernel, std::size_t in, std::size_t out, std::size_t stride, Rng& init);

  Var forward(Tape& tape, Var x) const;
  Parameter& kernel() { return kernel_; }
  std::size_t stride() const { return stride_; }
  void collect(std::vector<Parameter*>& out) { out.push_back(&kernel_); }
  std::string signature() const;

 private:
  Parameter kernel_;
  std::size_t stride_;
};

class DepthwiseConvLayer {
 public:
  DepthwiseConvLayer(std::string name, std::size_t kernel, std::size_t channels, std::size_t stride, Rng& init);

  Var forward(Tape& tape, Var x) const;
  Parameter& kernel() { return kernel_; }
  std::size_t stride() const { return stride_; }
  void collect(std::vector<Parameter*>& out) { out.push_back(&kernel_); }
  std::string signature() const;

 private:
  Parameter kernel_;
  std::size_t stride_;
};

/// MobileNetV2 bottleneck: 1x1 expand -> BN -> relu6 -> 3x3 depthwise -> BN -> relu6
/// -> 1x1 linear projection -> BN, with an identity skip when stride is 1 and the
/// channel count is preserved. An expansion factor of 1 omits the expand stage.
class InvertedResidualBlock {
 public:
  InvertedResidualBlock(std::string name, std::size_t in, std::size_t out, std::size_t expansion,
                        std::size_t stride, Rng& init);

  Var forward(Tape& tape, Var x, Mode mode) const;

  bool has_skip() const { return stride_ == 1 && in_ == out_; }
  bool has_expand() const { return expand_.has_value(); }
  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  std::size_t stride() const { return stride_; }

  ConvLayer* expand() { return expand_ ? &*expand_ : nullptr; }
  BatchNormLayer* expand_bn() { return expand_bn_ ? &*expand_bn_ : nullptr; }
  DepthwiseConvLayer& depthwise() { return depthwise_; }
  BatchNormLayer& depthwise_bn() { return depthwise_bn_; }
  ConvLayer& project() { return project_; }
  BatchNormLayer& project_bn() { return project_bn_; }

  void collect(std::vector<Parameter*>& out);
  void collect_norms(std::vector<BatchNormLayer*>& out);
  void signatures(std::vector<std::string>& out) const;

 private:
  std::size_t in_, out_, stride_;
  std::optional<ConvLayer> expand_;
  std::optional<BatchNormLayer> expand_bn_;
  DepthwiseConvLayer depthwise_;
  BatchNormLayer depthwise_bn_;
  ConvLayer project_;
  BatchNormLayer project_bn_;
};

struct EmbeddedText {
  Var sequence;  // [B x L x E]
  Var pooled;    // [B x E], mean over all L positions including padding
};

class EmbeddingTable {
 public:
  EmbeddingTable(std::string name, std::size_t vocab_size, std::size_t embed_dim, Rng& init);

  /// `ids` holds batch x length token ids in row-major order.
  EmbeddedText embed_and_pool(Tape& tape, std::span<const std::size_t> ids, std::size_t batch,
                              std::size_t length) const;

  std::size_t vocab_size() const { return table_.value.dim(0); }
  std::size_t embed_dim() const { return table_.value.dim(1); }
  Parameter& table() { return table_; }
  void collect(std::vector<Parameter*>& out) { out.push_back(&table_); }

 private:
  Parameter table_;
};

struct AttentionOutput {
  Var output;   // [B x Nq x D]
  Var weights;  // [B x heads x Nq x Nk]
};

/// Multi-head scaled dot-product attention with queries from one sequence and
/// keys/values from another. The query, value and output projections carry
/// biases; a key bias would only add a per-query constant to the logits, which
/// softmax cancels, so the key projection has none.
class MultiHeadAttention {
 public:
  MultiHeadAttention(std::string name, std::size_t model_dim, std::size_t heads, std::size_t key_dim, Rng& init);

  AttentionOutput forward(Tape& tape, Var queries, Var keys_values) const;

  std::size_t heads() const { return heads_; }
  std::size_t key_dim() const { return key_dim_; }
  std::size_t model_dim() const { return query_.in(); }
  DenseLayer& query() { return query_; }
  DenseLayer& key() { return key_; }
  DenseLayer& value() { return value_; }
  DenseLayer& output() { return output_; }
  void collect(std::vector<Parameter*>& out);
  std::string signature() const;

 private:
  std::size_t heads_, key_dim_;
  DenseLayer query_, key_, value_, output_;
};

/// Uniform(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
Tensor fan_in_uniform(const Shape& shape, std::size_t fan_in, Rng& rng);

}  // namespace kcalnet
