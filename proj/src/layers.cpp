#include "kcalnet/layers.hpp"

#include <cmath>

#include "kcalnet/errors.hpp"

namespace kcalnet {

Tensor fan_in_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  return random_uniform(shape, -limit, limit, rng);
}

// ---- Dense ----------------------------------------------------------------

DenseLayer::DenseLayer(std::string name, std::size_t in, std::size_t out, Rng& init, bool use_bias)
    : weights_{name + ".weights", fan_in_uniform({in, out}, in, init)},
      bias_{name + ".bias", Tensor({out}, 0.0)},
      use_bias_(use_bias) {}

Var DenseLayer::forward(Tape& tape, Var x) const {
  const Shape& s = x.shape();
  if (s.empty() || s.back() != in()) {
    throw DimensionError("dense '" + weights_.name + "': expected trailing dim " + std::to_string(in()) + ", got " +
                         shape_string(s));
  }
  const std::size_t rows = shape_size(s) / in();
  Var flat = s.size() == 2 ? x : ops::reshape(x, {rows, in()});
  Var y = ops::matmul(flat, tape.watch(weights_));
  if (use_bias_) y = ops::add(y, tape.watch(bias_));
  if (s.size() == 2) return y;
  Shape out_shape = s;
  out_shape.back() = out();
  return ops::reshape(y, out_shape);
}

void DenseLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&weights_);
  if (use_bias_) out.push_back(&bias_);
}

std::string DenseLayer::signature() const { return "dense->" + std::to_string(out()); }

// ---- Dropout --------------------------------------------------------------

DropoutLayer::DropoutLayer(double rate) : rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
}

Var DropoutLayer::forward(Tape& tape, Var x, const ForwardContext& ctx) const {
  if (ctx.mode == Mode::kEval || rate_ == 0.0) return x;
  if (!ctx.rng) throw ArgumentError("train-mode dropout requires a random stream");
  Tensor mask(x.shape());
  const double keep_scale = 1.0 / (1.0 - rate_);
  for (auto& m : mask.data()) m = ctx.rng->uniform() < rate_ ? 0.0 : keep_scale;
  return ops::mul(x, tape.constant(std::move(mask)));
}

// ---- BatchNorm ------------------------------------------------------------

BatchNormLayer::BatchNormLayer(std::string name, std::size_t channels)
    : name_(name),
      gamma_{name + ".gamma", Tensor({channels}, 1.0)},
      beta_{name + ".beta", Tensor({channels}, 0.0)},
      running_mean_({channels}, 0.0),
      running_var_({channels}, 1.0) {}

Var BatchNormLayer::forward(Tape& tape, Var x, Mode mode) const {
  const Shape& s = x.shape();
  if (s.empty() || s.back() != channels()) {
    throw DimensionError("batch norm '" + name_ + "': expected " + std::to_string(channels()) +
                         " channels, got " + shape_string(s));
  }
  Var gamma = tape.watch(gamma_);
  Var beta = tape.watch(beta_);
  if (mode == Mode::kEval) return ops::batch_norm_eval(x, gamma, beta, running_mean_, running_var_, kEpsilon);
  Tensor m, v;
  Var y = ops::batch_norm_train(x, gamma, beta, kEpsilon, &m, &v);
  for (std::size_t c = 0; c < channels(); ++c) {
    running_mean_[c] = kMomentum * running_mean_[c] + (1.0 - kMomentum) * m[c];
    running_var_[c] = kMomentum * running_var_[c] + (1.0 - kMomentum) * v[c];
  }
  return y;
}

void BatchNormLayer::collect(std::vector<Parameter*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

// ---- Convolutions -----------------------------------------------------------

ConvLayer::ConvLayer(std::string name, std::size_t kernel, std::size_t in, std::size_t out, std::size_t stride,
                     Rng& init)
    : kernel_{name + ".kernel", fan_in_uniform({kernel, kernel, in, out}, kernel * kernel * in, init)},
      stride_(stride) {}

Var ConvLayer::forward(Tape& tape, Var x) const {
  return ops::conv2d(x, tape.watch(kernel_), stride_, ops::Padding::kSame);
}

std::string ConvLayer::signature() const {
  return "conv2d" + shape_string(kernel_.value.shape()) + "/s" + std::to_string(stride_);
}

DepthwiseConvLayer::DepthwiseConvLayer(std::string name, std::size_t kernel, std::size_t channels,
                                       std::size_t stride, Rng& init)
    : kernel_{name + ".kernel", fan_in_uniform({kernel, kernel, channels}, kernel * kernel, init)}, stride_(stride) {}

Var DepthwiseConvLayer::forward(Tape& tape, Var x) const {
  return ops::depthwise_conv2d(x, tape.watch(kernel_), stride_, ops::Padding::kSame);
}

std::string DepthwiseConvLayer::signature() const {
  return "depthwise" + shape_string(kernel_.value.shape()) + "/s" + std::to_string(stride_);
}

// ---- Inverted residual -------------------------------------------------------

namespace {

std::size_t checked_stride(std::size_t stride) {
  if (stride != 1 && stride != 2) {
    throw ArgumentError("inverted residual stride must be 1 or 2, got " + std::to_string(stride));
  }
  return stride;
}

}  // namespace

InvertedResidualBlock::InvertedResidualBlock(std::string name, std::size_t in, std::size_t out,
                                             std::size_t expansion, std::size_t stride, Rng& init)
    : in_(in),
      out_(out),
      stride_(checked_stride(stride)),
      expand_(expansion > 1 ? std::optional<ConvLayer>(std::in_place, name + ".expand", 1, in, in * expansion, 1, init)
                            : std::nullopt),
      expand_bn_(expansion > 1 ? std::optional<BatchNormLayer>(std::in_place, name + ".expand_bn", in * expansion)
                               : std::nullopt),
      depthwise_(name + ".depthwise", 3, in * std::max<std::size_t>(expansion, 1), stride_, init),
      depthwise_bn_(name + ".depthwise_bn", in * std::max<std::size_t>(expansion, 1)),
      project_(name + ".project", 1, in * std::max<std::size_t>(expansion, 1), out, 1, init),
      project_bn_(name + ".project_bn", out) {
  if (expansion == 0) throw ArgumentError("expansion factor must be positive");
}

Var InvertedResidualBlock::forward(Tape& tape, Var x, Mode mode) const {
  if (x.shape().size() != 4 || x.shape()[3] != in_) {
    throw DimensionError("inverted residual expects " + std::to_string(in_) + " input channels, got " +
                         shape_string(x.shape()));
  }
  Var h = x;
  if (expand_) h = ops::relu6(expand_bn_->forward(tape, expand_->forward(tape, h), mode));
  h = ops::relu6(depthwise_bn_.forward(tape, depthwise_.forward(tape, h), mode));
  h = project_bn_.forward(tape, project_.forward(tape, h), mode);
  if (has_skip()) h = ops::add(h, x);
  return h;
}

void InvertedResidualBlock::collect(std::vector<Parameter*>& out) {
  if (expand_) {
    expand_->collect(out);
    expand_bn_->collect(out);
  }
  depthwise_.collect(out);
  depthwise_bn_.collect(out);
  project_.collect(out);
  project_bn_.collect(out);
}

void InvertedResidualBlock::collect_norms(std::vector<BatchNormLayer*>& out) {
  if (expand_bn_) out.push_back(&*expand_bn_);
  out.push_back(&depthwise_bn_);
  out.push_back(&project_bn_);
}

void InvertedResidualBlock::signatures(std::vector<std::string>& out) const {
  if (expand_) {
    out.push_back(expand_->signature());
    out.push_back("batchnorm[" + std::to_string(expand_bn_->channels()) + "]");
  }
  out.push_back(depthwise_.signature());
  out.push_back("batchnorm[" + std::to_string(depthwise_bn_.channels()) + "]");
  out.push_back(project_.signature());
  out.push_back("batchnorm[" + std::to_string(project_bn_.channels()) + "]");
  if (has_skip()) out.push_back("residual_add");
}

// ---- Embedding --------------------------------------------------------------

EmbeddingTable::EmbeddingTable(std::string name, std::size_t vocab_size, std::size_t embed_dim, Rng& init)
    : table_{name + ".table", random_normal({vocab_size, embed_dim}, 0.0, 0.05, init)} {}

EmbeddedText EmbeddingTable::embed_and_pool(Tape& tape, std::span<const std::size_t> ids, std::size_t batch,
                                            std::size_t length) const {
  if (ids.size() != batch * length) {
    throw DimensionError("embedding: expected " + std::to_string(batch * length) + " ids, got " +
                         std::to_string(ids.size()));
  }
  Var sequence = ops::gather_rows(tape.watch(table_), ids, {batch, length});
  return {sequence, ops::reduce_mean(sequence, {1})};
}

// ---- Attention ----------------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(std::string name, std::size_t model_dim, std::size_t heads,
                                       std::size_t key_dim, Rng& init)
    : heads_(heads),
      key_dim_(key_dim),
      query_(name + ".query", model_dim, heads * key_dim, init),
      key_(name + ".key", model_dim, heads * key_dim, init, /*use_bias=*/false),
      value_(name + ".value", model_dim, heads * key_dim, init),
      output_(name + ".output", heads * key_dim, model_dim, init) {
  if (heads == 0 || key_dim == 0) throw ArgumentError("attention heads and key_dim must be positive");
}

AttentionOutput MultiHeadAttention::forward(Tape& tape, Var queries, Var keys_values) const {
  const Shape& qs = queries.shape();
  const Shape& ks = keys_values.shape();
  const std::size_t D = model_dim();
  if (qs.size() != 3 || ks.size() != 3 || qs[2] != D || ks[2] != D || qs[0] != ks[0]) {
    throw DimensionError("attention: expected [B x N x " + std::to_string(D) + "] operands, got " +
                         shape_string(qs) + " and " + shape_string(ks));
  }
  if (ks[1] == 0) throw ArgumentError("attention requires at least one key");
  const std::size_t B = qs[0], Nq = qs[1], Nk = ks[1];

  const auto split_heads = [&](Var projected, std::size_t n) {
    return ops::permute(ops::reshape(projected, {B, n, heads_, key_dim_}), {0, 2, 1, 3});
  };
  Var q = split_heads(query_.forward(tape, queries), Nq);
  Var k = split_heads(key_.forward(tape, keys_values), Nk);
  Var v = split_heads(value_.forward(tape, keys_values), Nk);

  Var scores = ops::scale(ops::batch_matmul(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(key_dim_)));
  Var weights = ops::softmax(scores, 3);
  Var context = ops::batch_matmul(weights, v);
  Var merged = ops::reshape(ops::permute(context, {0, 2, 1, 3}), {B, Nq, heads_ * key_dim_});
  return {output_.forward(tape, merged), weights};
}

void MultiHeadAttention::collect(std::vector<Parameter*>& out) {
  query_.collect(out);
  key_.collect(out);
  value_.collect(out);
  output_.collect(out);
}

std::string MultiHeadAttention::signature() const {
  return "attention[heads=" + std::to_string(heads_) + ",key_dim=" + std::to_string(key_dim_) +
         ",dim=" + std::to_string(model_dim()) + "]";
}

}  // namespace kcalnet
