#include "kcalnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "kcalnet/errors.hpp"

namespace kcalnet::ops {

namespace {

Tape& tape_of(Var v) {
  if (!v.valid()) throw ArgumentError("operation on an unbound Var");
  return *v.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ArgumentError("operands recorded on different tapes");
  return t;
}

std::string pair_shapes(const Shape& a, const Shape& b) { return shape_string(a) + " and " + shape_string(b); }

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

/// Output shape and per-operand period of a bias-style broadcast.
struct Broadcast {
  Shape shape;
  std::size_t size;
  std::size_t period_a;
  std::size_t period_b;
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return {a.shape(), a.size(), a.size(), b.size()};
  if (is_suffix(b.shape(), a.shape())) return {a.shape(), a.size(), a.size(), b.size()};
  if (is_suffix(a.shape(), b.shape())) return {b.shape(), b.size(), a.size(), b.size()};
  throw DimensionError(std::string(op) + ": incompatible shapes " + pair_shapes(a.shape(), b.shape()));
}

/// Row-major strides.
std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

/// Advances a multi-index in row-major order; returns false after the last index.
bool advance(std::vector<std::size_t>& idx, const Shape& shape) {
  for (std::size_t i = shape.size(); i-- > 0;) {
    if (++idx[i] < shape[i]) return true;
    idx[i] = 0;
  }
  return false;
}

struct ConvGeometry {
  std::size_t out_h, out_w, pad_top, pad_left;
};

ConvGeometry conv_geometry(const Shape& in, std::size_t kh, std::size_t kw, std::size_t stride, Padding padding,
                           const Shape& kernel_shape) {
  const std::size_t h = in[1], w = in[2];
  if (padding == Padding::kValid && (kh > h || kw > w)) {
    throw DimensionError("kernel " + shape_string(kernel_shape) + " larger than input " + shape_string(in));
  }
  ConvGeometry g{};
  g.out_h = conv_output_size(h, kh, stride, padding);
  g.out_w = conv_output_size(w, kw, stride, padding);
  if (padding == Padding::kSame) {
    const std::size_t need_h = (g.out_h - 1) * stride + kh;
    const std::size_t need_w = (g.out_w - 1) * stride + kw;
    g.pad_top = need_h > h ? (need_h - h) / 2 : 0;
    g.pad_left = need_w > w ? (need_w - w) / 2 : 0;
  }
  return g;
}

}  // namespace

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, Padding padding) {
  if (stride == 0) throw ArgumentError("stride must be positive");
  if (padding == Padding::kSame) return (input + stride - 1) / stride;
  if (kernel > input) throw DimensionError("kernel size " + std::to_string(kernel) + " exceeds input size " +
                                           std::to_string(input));
  return (input - kernel) / stride + 1;
}

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + pair_shapes(A.shape(), B.shape()));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C({m, n});
  const double* pa = A.data().data();
  const double* pb = B.data().data();
  double* pc = C.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return tape.record(std::move(C), {a, b}, [a, b, m, k, n](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    const double* pg = g.data().data();
    if (Tensor* da = slots[0]) {
      const double* pb = b.value().data().data();
      double* pda = da->data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += pg[i * n + j] * pb[p * n + j];
          pda[i * k + p] += acc;
        }
      }
    }
    if (Tensor* db = slots[1]) {
      const double* pa = a.value().data().data();
      double* pdb = db->data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) pdb[p * n + j] += av * pg[i * n + j];
        }
      }
    }
  });
}

Var batch_matmul(Var a, Var b, bool transpose_b) {
  Tape& tape = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto fail = [&] {
    throw DimensionError("batch_matmul: incompatible shapes " + pair_shapes(A.shape(), B.shape()));
  };
  if (A.rank() < 2 || A.rank() != B.rank()) fail();
  const std::size_t r = A.rank();
  if (!std::equal(A.shape().begin(), A.shape().end() - 2, B.shape().begin())) fail();
  const std::size_t m = A.dim(r - 2), k = A.dim(r - 1);
  const std::size_t bk = transpose_b ? B.dim(r - 1) : B.dim(r - 2);
  const std::size_t n = transpose_b ? B.dim(r - 2) : B.dim(r - 1);
  if (bk != k) fail();
  const std::size_t batches = A.size() / (m * k);

  Shape out_shape(A.shape().begin(), A.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor C(out_shape);
  // b element (p, j) of batch l.
  const auto b_index = [=](std::size_t l, std::size_t p, std::size_t j) {
    return transpose_b ? l * n * k + j * k + p : l * k * n + p * n + j;
  };
  for (std::size_t l = 0; l < batches; ++l) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += A[l * m * k + i * k + p] * B[b_index(l, p, j)];
        C[l * m * n + i * n + j] = acc;
      }
    }
  }
  return tape.record(std::move(C), {a, b}, [a, b, b_index, batches, m, k, n](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    for (std::size_t l = 0; l < batches; ++l) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g[l * m * n + i * n + j];
          if (gv == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) {
            if (slots[0]) (*slots[0])[l * m * k + i * k + p] += gv * B[b_index(l, p, j)];
            if (slots[1]) (*slots[1])[b_index(l, p, j)] += gv * A[l * m * k + i * k + p];
          }
        }
      }
    }
  });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Broadcast bc = broadcast(a.value(), b.value(), "add");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out(bc.shape);
  for (std::size_t i = 0; i < bc.size; ++i) out[i] = A[i % bc.period_a] + B[i % bc.period_b];
  return tape.record(std::move(out), {a, b}, [bc](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    for (std::size_t i = 0; i < bc.size; ++i) {
      if (slots[0]) (*slots[0])[i % bc.period_a] += g[i];
      if (slots[1]) (*slots[1])[i % bc.period_b] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Broadcast bc = broadcast(a.value(), b.value(), "sub");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out(bc.shape);
  for (std::size_t i = 0; i < bc.size; ++i) out[i] = A[i % bc.period_a] - B[i % bc.period_b];
  return tape.record(std::move(out), {a, b}, [bc](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    for (std::size_t i = 0; i < bc.size; ++i) {
      if (slots[0]) (*slots[0])[i % bc.period_a] += g[i];
      if (slots[1]) (*slots[1])[i % bc.period_b] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Broadcast bc = broadcast(a.value(), b.value(), "mul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out(bc.shape);
  for (std::size_t i = 0; i < bc.size; ++i) out[i] = A[i % bc.period_a] * B[i % bc.period_b];
  return tape.record(std::move(out), {a, b}, [a, b, bc](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    for (std::size_t i = 0; i < bc.size; ++i) {
      if (slots[0]) (*slots[0])[i % bc.period_a] += g[i] * B[i % bc.period_b];
      if (slots[1]) (*slots[1])[i % bc.period_b] += g[i] * A[i % bc.period_a];
    }
  });
}

Var scale(Var a, double factor) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  return tape.record(std::move(out), {a}, [factor](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    for (std::size_t i = 0; i < g.size(); ++i) (*slots[0])[i] += factor * g[i];
  });
}

Var add_scalar(Var a, double c) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.data()) v += c;
  return tape.record(std::move(out), {a}, [](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    for (std::size_t i = 0; i < g.size(); ++i) (*slots[0])[i] += g[i];
  });
}

/// FNV-1a over the piece index of every element.
class PieceDigest {
 public:
  void add(unsigned piece) { h_ = (h_ ^ piece) * 0x100000001b3ULL; }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

Var relu(Var x) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  PieceDigest digest;
  for (auto& v : out.data()) {
    digest.add(v > 0.0);
    v = v > 0.0 ? v : 0.0;
  }
  tape.note_branches(digest.value());
  return tape.record(std::move(out), {x}, [x](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    const Tensor& X = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (X[i] > 0.0) (*slots[0])[i] += g[i];
    }
  });
}

Var relu6(Var x) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  PieceDigest digest;
  for (auto& v : out.data()) {
    digest.add(v <= 0.0 ? 0 : v < 6.0 ? 1 : 2);
    v = std::clamp(v, 0.0, 6.0);
  }
  tape.note_branches(digest.value());
  return tape.record(std::move(out), {x}, [x](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    const Tensor& X = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (X[i] > 0.0 && X[i] < 6.0) (*slots[0])[i] += g[i];
    }
  });
}

Var rsqrt(Var x) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  for (auto& v : out.data()) {
    if (!(v > 0.0)) throw ArgumentError("rsqrt of non-positive value");
    v = 1.0 / std::sqrt(v);
  }
  return tape.record(std::move(out), {x}, [](const Tensor& g, const Tensor& y, std::span<Tensor* const> slots) {
    for (std::size_t i = 0; i < g.size(); ++i) (*slots[0])[i] += -0.5 * y[i] * y[i] * y[i] * g[i];
  });
}

Var softmax(Var x, std::size_t axis) {
  Tape& tape = tape_of(x);
  const Tensor& X = x.value();
  if (axis >= X.rank()) throw ArgumentError("softmax axis " + std::to_string(axis) + " out of range for " +
                                            shape_string(X.shape()));
  const Shape& s = X.shape();
  const std::size_t n = s[axis];
  const std::size_t inner = std::accumulate(s.begin() + axis + 1, s.end(), std::size_t{1}, std::multiplies<>());
  const std::size_t outer = X.size() / (n * inner);
  Tensor Y(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, X[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(X[base + k * inner] - mx);
        Y[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < n; ++k) Y[base + k * inner] /= total;
    }
  }
  return tape.record(std::move(Y), {x}, [outer, inner, n](const Tensor& g, const Tensor& Y, std::span<Tensor* const> slots) {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * Y[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t i = base + k * inner;
          (*slots[0])[i] += Y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Var reduce_mean(Var x, std::vector<std::size_t> axes) {
  Tape& tape = tape_of(x);
  const Tensor& X = x.value();
  const Shape& s = X.shape();
  std::vector<bool> reduced(s.size(), false);
  for (auto ax : axes) {
    if (ax >= s.size()) throw ArgumentError("reduce_mean axis " + std::to_string(ax) + " out of range for " +
                                            shape_string(s));
    if (reduced[ax]) throw ArgumentError("reduce_mean axis " + std::to_string(ax) + " repeated");
    reduced[ax] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (reduced[i]) count *= s[i];
    else out_shape.push_back(s[i]);
  }
  const double inv = 1.0 / static_cast<double>(count);

  // Contiguous axes: view the input as [outer x count x inner].
  const auto first = std::find(reduced.begin(), reduced.end(), true) - reduced.begin();
  const auto past = std::find(reduced.begin() + first, reduced.end(), false) - reduced.begin();
  if (std::find(reduced.begin() + past, reduced.end(), true) == reduced.end()) {
    std::size_t inner = 1;
    for (std::size_t i = static_cast<std::size_t>(past); i < s.size(); ++i) inner *= s[i];
    const std::size_t outer = X.size() / (count * inner);
    Tensor out(out_shape);
    const double* px = X.data().data();
    double* po = out.data().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t m = 0; m < count; ++m) {
        const double* row = px + (o * count + m) * inner;
        double* dst = po + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i];
      }
    for (auto& v : out.data()) v *= inv;
    return tape.record(std::move(out), {x}, [outer, count, inner, inv](const Tensor& g, const Tensor&,
                                                                        std::span<Tensor* const> slots) {
      double* pd = slots[0]->data().data();
      const double* pg = g.data().data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < count; ++m) {
          double* row = pd + (o * count + m) * inner;
          for (std::size_t i = 0; i < inner; ++i) row[i] += pg[o * inner + i] * inv;
        }
    });
  }

  // Stride of each input axis inside the output; 0 for reduced axes.
  std::vector<std::size_t> out_strides(s.size(), 0);
  {
    std::size_t stride = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
      if (!reduced[i]) {
        out_strides[i] = stride;
        stride *= s[i];
      }
    }
  }
  auto out_index = std::make_shared<std::vector<std::size_t>>(X.size());
  {
    std::vector<std::size_t> idx(s.size(), 0);
    std::size_t flat = 0;
    do {
      std::size_t o = 0;
      for (std::size_t i = 0; i < s.size(); ++i) o += idx[i] * out_strides[i];
      (*out_index)[flat++] = o;
    } while (advance(idx, s));
  }
  Tensor out(out_shape);
  for (std::size_t i = 0; i < X.size(); ++i) out[(*out_index)[i]] += X[i];
  for (auto& v : out.data()) v *= inv;
  return tape.record(std::move(out), {x}, [out_index, inv](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    Tensor& dx = *slots[0];
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[(*out_index)[i]] * inv;
  });
}

namespace {

std::size_t check_norm_operands(const Tensor& x, const Tensor& gamma, const Tensor& beta, const char* op) {
  const std::size_t C = x.rank() == 0 ? 0 : x.shape().back();
  if (x.rank() < 2 || gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + pair_shapes(x.shape(), gamma.shape()));
  }
  return C;
}

}  // namespace

Var batch_norm_train(Var x, Var gamma, Var beta, double epsilon, Tensor* batch_mean, Tensor* batch_var) {
  Tape& tape = tape_of(x, gamma);
  tape_of(x, beta);
  const Tensor& X = x.value();
  const std::size_t C = check_norm_operands(X, gamma.value(), beta.value(), "batch_norm_train");
  const std::size_t N = X.size() / C;
  Tensor mu({C}), var({C});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) mu[c] += X[i * C + c];
  for (auto& v : mu.data()) v /= static_cast<double>(N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const double d = X[i * C + c] - mu[c];
      var[c] += d * d;
    }
  for (auto& v : var.data()) v /= static_cast<double>(N);
  auto inv_std = std::make_shared<std::vector<double>>(C);
  for (std::size_t c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + epsilon);
  auto xhat = std::make_shared<Tensor>(X.shape());
  Tensor Y(X.shape());
  const Tensor& G = gamma.value();
  const Tensor& Bt = beta.value();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const double h = (X[i * C + c] - mu[c]) * (*inv_std)[c];
      (*xhat)[i * C + c] = h;
      Y[i * C + c] = G[c] * h + Bt[c];
    }
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;
  return tape.record(std::move(Y), {x, gamma, beta},
                     [xhat, inv_std, gamma, N, C](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    std::vector<double> sum_g(C, 0.0), sum_gh(C, 0.0);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        sum_g[c] += g[i * C + c];
        sum_gh[c] += g[i * C + c] * (*xhat)[i * C + c];
      }
    if (slots[0]) {
      const Tensor& G = gamma.value();
      const double n = static_cast<double>(N);
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c) {
          const double k = G[c] * (*inv_std)[c] / n;
          (*slots[0])[i * C + c] += k * (n * g[i * C + c] - sum_g[c] - (*xhat)[i * C + c] * sum_gh[c]);
        }
    }
    if (slots[1])
      for (std::size_t c = 0; c < C; ++c) (*slots[1])[c] += sum_gh[c];
    if (slots[2])
      for (std::size_t c = 0; c < C; ++c) (*slots[2])[c] += sum_g[c];
  });
}

Var batch_norm_eval(Var x, Var gamma, Var beta, const Tensor& mean, const Tensor& var, double epsilon) {
  Tape& tape = tape_of(x, gamma);
  tape_of(x, beta);
  const Tensor& X = x.value();
  const std::size_t C = check_norm_operands(X, gamma.value(), beta.value(), "batch_norm_eval");
  if (mean.shape() != Shape{C} || var.shape() != Shape{C}) {
    throw DimensionError("batch_norm_eval: statistics shape " + shape_string(mean.shape()) + " for " +
                         shape_string(X.shape()));
  }
  const std::size_t N = X.size() / C;
  auto shift = std::make_shared<std::vector<double>>(mean.data().begin(), mean.data().end());
  auto inv_std = std::make_shared<std::vector<double>>(C);
  for (std::size_t c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + epsilon);
  Tensor Y(X.shape());
  const Tensor& G = gamma.value();
  const Tensor& Bt = beta.value();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) Y[i * C + c] = (X[i * C + c] - (*shift)[c]) * (*inv_std)[c] * G[c] + Bt[c];
  return tape.record(std::move(Y), {x, gamma, beta},
                     [x, gamma, shift, inv_std, N, C](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    const Tensor& X = x.value();
    const Tensor& G = gamma.value();
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const double gv = g[i * C + c];
        if (slots[0]) (*slots[0])[i * C + c] += gv * G[c] * (*inv_std)[c];
        if (slots[1]) (*slots[1])[c] += gv * (X[i * C + c] - (*shift)[c]) * (*inv_std)[c];
        if (slots[2]) (*slots[2])[c] += gv;
      }
  });
}

Var sum(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& X = x.value();
  const double total = std::accumulate(X.data().begin(), X.data().end(), 0.0);
  return tape.record(Tensor::scalar(total), {x}, [](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    for (auto& v : slots[0]->data()) v += g[0];
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var conv2d(Var input, Var kernel, std::size_t stride, Padding padding) {
  Tape& tape = tape_of(input, kernel);
  const Tensor& X = input.value();
  const Tensor& K = kernel.value();
  if (X.rank() != 4 || K.rank() != 4 || K.dim(2) != X.dim(3)) {
    throw DimensionError("conv2d: incompatible input/kernel shapes " + pair_shapes(X.shape(), K.shape()));
  }
  if (stride == 0) throw ArgumentError("conv2d: stride must be positive");
  const std::size_t B = X.dim(0), H = X.dim(1), W = X.dim(2), Ci = X.dim(3);
  const std::size_t kh = K.dim(0), kw = K.dim(1), Co = K.dim(3);
  const ConvGeometry geo = conv_geometry(X.shape(), kh, kw, stride, padding, K.shape());
  const std::size_t Ho = geo.out_h, Wo = geo.out_w;

  Tensor Y({B, Ho, Wo, Co});
  const double* px = X.data().data();
  const double* pk = K.data().data();
  double* py = Y.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double* yrow = py + ((b * Ho + oy) * Wo + ox) * Co;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(geo.pad_top);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(geo.pad_left);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            const double* xpix = px + ((b * H + iy) * W + ix) * Ci;
            const double* kslab = pk + (ky * kw + kx) * Ci * Co;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double xv = xpix[ci];
              if (xv == 0.0) continue;
              const double* krow = kslab + ci * Co;
              for (std::size_t co = 0; co < Co; ++co) yrow[co] += xv * krow[co];
            }
          }
        }
      }
    }
  }
  return tape.record(std::move(Y), {input, kernel},
                     [input, kernel, geo, stride, B, H, W, Ci, kh, kw, Co](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    const double* px = input.value().data().data();
    const double* pk = kernel.value().data().data();
    const double* pg = g.data().data();
    double* pdx = slots[0] ? slots[0]->data().data() : nullptr;
    double* pdk = slots[1] ? slots[1]->data().data() : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
        for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
          const double* grow = pg + ((b * geo.out_h + oy) * geo.out_w + ox) * Co;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(geo.pad_top);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(geo.pad_left);
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              const std::size_t xoff = ((b * H + iy) * W + ix) * Ci;
              const std::size_t koff = (ky * kw + kx) * Ci * Co;
              for (std::size_t ci = 0; ci < Ci; ++ci) {
                const double* krow = pk + koff + ci * Co;
                if (pdx) {
                  double acc = 0.0;
                  for (std::size_t co = 0; co < Co; ++co) acc += grow[co] * krow[co];
                  pdx[xoff + ci] += acc;
                }
                if (pdk) {
                  const double xv = px[xoff + ci];
                  if (xv == 0.0) continue;
                  double* dkrow = pdk + koff + ci * Co;
                  for (std::size_t co = 0; co < Co; ++co) dkrow[co] += xv * grow[co];
                }
              }
            }
          }
        }
      }
    }
  });
}

Var depthwise_conv2d(Var input, Var kernel, std::size_t stride, Padding padding) {
  Tape& tape = tape_of(input, kernel);
  const Tensor& X = input.value();
  const Tensor& K = kernel.value();
  if (X.rank() != 4 || K.rank() != 3 || K.dim(2) != X.dim(3)) {
    throw DimensionError("depthwise_conv2d: incompatible input/kernel shapes " + pair_shapes(X.shape(), K.shape()));
  }
  if (stride == 0) throw ArgumentError("depthwise_conv2d: stride must be positive");
  const std::size_t B = X.dim(0), H = X.dim(1), W = X.dim(2), C = X.dim(3);
  const std::size_t kh = K.dim(0), kw = K.dim(1);
  const ConvGeometry geo = conv_geometry(X.shape(), kh, kw, stride, padding, K.shape());

  Tensor Y({B, geo.out_h, geo.out_w, C});
  const double* px = X.data().data();
  const double* pk = K.data().data();
  double* py = Y.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
      for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
        double* yrow = py + ((b * geo.out_h + oy) * geo.out_w + ox) * C;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(geo.pad_top);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(geo.pad_left);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            const double* xpix = px + ((b * H + iy) * W + ix) * C;
            const double* krow = pk + (ky * kw + kx) * C;
            for (std::size_t c = 0; c < C; ++c) yrow[c] += xpix[c] * krow[c];
          }
        }
      }
    }
  }
  return tape.record(std::move(Y), {input, kernel},
                     [input, kernel, geo, stride, B, H, W, C, kh, kw](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    const double* px = input.value().data().data();
    const double* pk = kernel.value().data().data();
    const double* pg = g.data().data();
    double* pdx = slots[0] ? slots[0]->data().data() : nullptr;
    double* pdk = slots[1] ? slots[1]->data().data() : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
        for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
          const double* grow = pg + ((b * geo.out_h + oy) * geo.out_w + ox) * C;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(geo.pad_top);
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(geo.pad_left);
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              const std::size_t xoff = ((b * H + iy) * W + ix) * C;
              const std::size_t koff = (ky * kw + kx) * C;
              for (std::size_t c = 0; c < C; ++c) {
                if (pdx) pdx[xoff + c] += grow[c] * pk[koff + c];
                if (pdk) pdk[koff + c] += grow[c] * px[xoff + c];
              }
            }
          }
        }
      }
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  return tape.record(std::move(out), {x}, [](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    for (std::size_t i = 0; i < g.size(); ++i) (*slots[0])[i] += g[i];
  });
}

Var permute(Var x, std::vector<std::size_t> axes) {
  Tape& tape = tape_of(x);
  const Tensor& X = x.value();
  const Shape& s = X.shape();
  if (axes.size() != s.size()) throw ArgumentError("permute: axes length does not match rank");
  std::vector<bool> seen(s.size(), false);
  for (auto a : axes) {
    if (a >= s.size() || seen[a]) throw ArgumentError("permute: axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[axes[i]];
  const auto in_strides = strides_of(s);
  auto source = std::make_shared<std::vector<std::size_t>>(X.size());
  Tensor out(out_shape);
  std::vector<std::size_t> idx(s.size(), 0);
  std::size_t flat = 0;
  do {
    std::size_t src = 0;
    for (std::size_t i = 0; i < s.size(); ++i) src += idx[i] * in_strides[axes[i]];
    (*source)[flat] = src;
    out[flat++] = X[src];
  } while (advance(idx, out_shape));
  return tape.record(std::move(out), {x}, [source](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    for (std::size_t i = 0; i < g.size(); ++i) (*slots[0])[(*source)[i]] += g[i];
  });
}

Var flatten(Var x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw DimensionError("flatten requires rank >= 2, got " + shape_string(s));
  return reshape(x, {s[0], shape_size(s) / s[0]});
}

Var concat(std::span<const Var> xs) {
  if (xs.empty()) throw ArgumentError("concat of an empty list");
  Tape& tape = tape_of(xs[0]);
  const Shape& first = xs[0].shape();
  if (first.empty()) throw DimensionError("concat requires rank >= 1");
  const Shape lead(first.begin(), first.end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& v : xs) {
    if (v.tape() != &tape) throw ArgumentError("concat operands on different tapes");
    const Shape& s = v.shape();
    if (s.size() != first.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
      throw DimensionError("concat: leading dimensions differ, " + pair_shapes(first, s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  const std::size_t rows = shape_size(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    const Tensor& v = xs[t].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data().begin() + r * widths[t], widths[t], out.data().begin() + r * total + offset);
    }
    offset += widths[t];
  }
  return tape.record(std::move(out), std::vector<Var>(xs.begin(), xs.end()),
                     [widths, rows, total](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    std::size_t offset = 0;
    for (std::size_t t = 0; t < widths.size(); ++t) {
      if (Tensor* d = slots[t]) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < widths[t]; ++c) (*d)[r * widths[t] + c] += g[r * total + offset + c];
        }
      }
      offset += widths[t];
    }
  });
}

Var gather_rows(Var table, std::span<const std::size_t> ids, const Shape& index_shape) {
  Tape& tape = tape_of(table);
  const Tensor& T = table.value();
  if (T.rank() != 2) throw DimensionError("gather_rows: table must be rank 2, got " + shape_string(T.shape()));
  if (shape_size(index_shape) != ids.size()) throw DimensionError("gather_rows: index shape does not match id count");
  const std::size_t V = T.dim(0), E = T.dim(1);
  for (auto id : ids) {
    if (id >= V) throw ArgumentError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                                     std::to_string(V));
  }
  Shape out_shape = index_shape;
  out_shape.push_back(E);
  Tensor out(out_shape);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(T.data().begin() + ids[r] * E, E, out.data().begin() + r * E);
  }
  auto id_copy = std::make_shared<std::vector<std::size_t>>(ids.begin(), ids.end());
  return tape.record(std::move(out), {table}, [id_copy, E](const Tensor& g, const Tensor&, std::span<Tensor* const> slots) {
    Tensor& dt = *slots[0];
    for (std::size_t r = 0; r < id_copy->size(); ++r) {
      for (std::size_t e = 0; e < E; ++e) dt[(*id_copy)[r] * E + e] += g[r * E + e];
    }
  });
}

}  // namespace kcalnet::ops
