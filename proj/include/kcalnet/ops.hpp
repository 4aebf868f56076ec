#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kcalnet/autodiff.hpp"

/// Differentiable primitives. Every function records one node on the tape of
/// its operands and returns the handle of the result.
///
/// Binary elementwise ops accept identical shapes or a trailing-suffix operand
/// (bias-style broadcast: [B x N x C] with [C] or [N x C]).
namespace kcalnet::ops {

enum class Padding { kSame, kValid };

Var matmul(Var a, Var b);
/// a: [... x m x k], b: [... x k x n] (or [... x n x k] when transpose_b).
/// Leading dimensions must agree.
Var batch_matmul(Var a, Var b, bool transpose_b = false);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double c);

/// Subgradient at the kink is 0.
Var relu(Var x);
/// min(max(x, 0), 6); subgradient 0 at both kinks.
Var relu6(Var x);
Var rsqrt(Var x);

/// Max-subtracted softmax along `axis`.
Var softmax(Var x, std::size_t axis);

/// Mean over the listed (distinct) axes, which are removed from the shape.
Var reduce_mean(Var x, std::vector<std::size_t> axes);
Var sum(Var x);
Var mean(Var x);

/// Batch normalization over every axis but the last, with the batch's own
/// (biased) statistics, which are copied to `batch_mean` / `batch_var` if given.
Var batch_norm_train(Var x, Var gamma, Var beta, double epsilon, Tensor* batch_mean = nullptr,
                     Tensor* batch_var = nullptr);
/// Batch normalization with fixed per-channel statistics.
Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double epsilon);

/// Cross-correlation. input [B x H x W x Cin], kernel [kh x kw x Cin x Cout].
/// Same padding yields ceil(H / stride) rows with the extra pad on the bottom/right.
Var conv2d(Var input, Var kernel, std::size_t stride, Padding padding);
/// Per-channel cross-correlation. input [B x H x W x C], kernel [kh x kw x C].
Var depthwise_conv2d(Var input, Var kernel, std::size_t stride, Padding padding);

Var reshape(Var x, Shape shape);
Var permute(Var x, std::vector<std::size_t> axes);
/// [B x ...] -> [B x prod(...)]; rank must be at least 2.
Var flatten(Var x);
/// Joins along the last axis; all leading dimensions must agree.
Var concat(std::span<const Var> xs);

/// Row lookup: table [V x E], `ids` laid out with shape `index_shape`.
/// Result has shape index_shape + [E].
Var gather_rows(Var table, std::span<const std::size_t> ids, const Shape& index_shape);

/// Output spatial size of a strided window with the given padding.
std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, Padding padding);

}  // namespace kcalnet::ops
