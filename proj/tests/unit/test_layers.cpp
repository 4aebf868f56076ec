#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "kcalnet/errors.hpp"
#include "kcalnet/gradcheck.hpp"
#include "kcalnet/layers.hpp"
#include "kcalnet/text.hpp"
#include "support/oracles.hpp"

using namespace kcalnet;

namespace {

void fill(Parameter& p, double v) {
  for (auto& e : p.value.data()) e = v;
}

Tensor channel_stat(const Tensor& y, bool variance) {
  const std::size_t C = y.shape().back(), n = y.size() / C;
  Tensor out({C});
  for (std::size_t c = 0; c < C; ++c) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += y[i * C + c];
    m /= static_cast<double>(n);
    if (!variance) {
      out[c] = m;
      continue;
    }
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) v += (y[i * C + c] - m) * (y[i * C + c] - m);
    out[c] = v / static_cast<double>(n);
  }
  return out;
}

/// Eval-mode batch norm written out with primitives.
Var eval_bn(Tape& t, Var x, const BatchNormLayer& bn, const Parameter& gamma, const Parameter& beta) {
  Tensor inv({bn.channels()});
  for (std::size_t c = 0; c < bn.channels(); ++c) inv[c] = 1.0 / std::sqrt(bn.running_var()[c] + BatchNormLayer::kEpsilon);
  Var centered = ops::sub(x, t.constant(bn.running_mean()));
  return ops::add(ops::mul(ops::mul(centered, t.constant(inv)), t.constant(gamma.value)), t.constant(beta.value));
}

void randomize_norm(BatchNormLayer& bn, Rng& rng) {
  bn.gamma().value = random_uniform({bn.channels()}, 0.5, 1.5, rng);
  bn.beta().value = random_uniform({bn.channels()}, -0.5, 0.5, rng);
  bn.running_mean() = random_uniform({bn.channels()}, -0.2, 0.2, rng);
  bn.running_var() = random_uniform({bn.channels()}, 0.5, 2.0, rng);
}

}  // namespace

TEST_CASE("dense layer") {
  Rng rng(1);
  Tape t;
  DenseLayer d("d", 3, 3, rng);
  SUBCASE("identity weights, zero bias") {
    d.weights().value = Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor x = random_uniform({4, 3}, -1, 1, rng);
    CHECK(d.forward(t, t.constant(x)).value() == x);
  }
  SUBCASE("zero weights give constant rows") {
    fill(d.weights(), 0.0);
    fill(d.bias(), 0.7);
    Tensor y = d.forward(t, t.constant(random_uniform({5, 3}, -1, 1, rng))).value();
    for (double v : y.data()) CHECK(v == 0.7);
  }
  SUBCASE("matches matmul plus bias oracle") {
    DenseLayer e("e", 6, 4, rng);
    e.bias().value = random_uniform({4}, -1, 1, rng);
    Tensor x = random_uniform({5, 6}, -1, 1, rng);
    Tensor expect = oracle::matmul(x, e.weights().value);
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += e.bias().value[i % 4];
    CHECK(max_abs_diff(e.forward(t, t.constant(x)).value(), expect) <= 1e-12);
  }
  SUBCASE("trailing dim mismatch") {
    CHECK_THROWS_AS(d.forward(t, t.constant(Tensor({2, 4}))), DimensionError);
  }
}

TEST_CASE("dropout") {
  CHECK_THROWS_AS(DropoutLayer(1.0), ArgumentError);
  CHECK_THROWS_AS(DropoutLayer(-0.1), ArgumentError);
  Rng rng(2);
  Tensor x = random_uniform({100000}, 0.5, 1.5, rng);
  Tape t;
  SUBCASE("eval is the bitwise identity") {
    DropoutLayer d(0.5);
    CHECK(d.forward(t, t.constant(x), {Mode::kEval, nullptr}).value() == x);
  }
  SUBCASE("rate zero is the identity in train mode") {
    DropoutLayer d(0.0);
    Rng r(3);
    CHECK(d.forward(t, t.constant(x), {Mode::kTrain, &r}).value() == x);
  }
  SUBCASE("rate 0.5 zeroes half and doubles survivors") {
    DropoutLayer d(0.5);
    Rng r(4);
    Tensor y = d.forward(t, t.constant(x), {Mode::kTrain, &r}).value();
    std::size_t zeros = 0;
    bool exact = true;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (y[i] == 0.0) ++zeros;
      else exact = exact && y[i] == 2.0 * x[i];
    }
    CHECK(std::abs(static_cast<double>(zeros) / x.size() - 0.5) <= 0.01);
    CHECK(exact);
  }
  SUBCASE("expectation over seeds matches the input") {
    DropoutLayer d(0.5);
    double total = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
      Rng r(1000 + trial);
      Tape tt;
      total += d.forward(tt, tt.constant(Tensor::scalar(3.0)), {Mode::kTrain, &r}).value().item();
    }
    CHECK(std::abs(total / 10000 / 3.0 - 1.0) <= 0.02);
  }
  SUBCASE("same stream, same mask") {
    DropoutLayer d(0.3);
    Rng r1(5), r2(5);
    CHECK(d.forward(t, t.constant(x), {Mode::kTrain, &r1}).value() ==
          d.forward(t, t.constant(x), {Mode::kTrain, &r2}).value());
  }
}

TEST_CASE("batch norm") {
  Rng rng(3);
  Tape t;
  SUBCASE("standardized input is a fixed point in train mode") {
    BatchNormLayer bn("bn", 2);
    // Two channels, four samples each, mean 0 and biased variance 1.
    Tensor x({4, 2}, {1, -1, -1, 1, 1, 1, -1, -1});
    Tensor y = bn.forward(t, t.constant(x), Mode::kTrain).value();
    // Epsilon shrinks the output by sqrt(1 / (1 + eps)).
    CHECK(max_abs_diff(y, x) <= 1e-3);
    const double shrink = 1.0 / std::sqrt(1.0 + BatchNormLayer::kEpsilon);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y[i] - x[i] * shrink) <= 1e-6);
  }
  SUBCASE("zero gamma outputs beta") {
    BatchNormLayer bn("bn", 3);
    fill(bn.gamma(), 0.0);
    bn.beta().value = Tensor::from({0.1, 0.2, 0.3});
    for (Mode mode : {Mode::kTrain, Mode::kEval}) {
      Tensor y = bn.forward(t, t.constant(random_uniform({2, 3, 3, 3}, -2, 2, rng)), mode).value();
      for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == bn.beta().value[i % 3]);
    }
  }
  SUBCASE("train-mode output is standardized per channel") {
    BatchNormLayer bn("bn", 4);
    // Input variance near 33 keeps the epsilon shrinkage (eps / var) below 1e-4.
    Tensor y = bn.forward(t, t.constant(random_uniform({3, 5, 5, 4}, -7, 13, rng)), Mode::kTrain).value();
    Tensor m = channel_stat(y, false), v = channel_stat(y, true);
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(std::abs(m[c]) <= 1e-6);
      CHECK(std::abs(v[c] - 1.0) <= 1e-4);
    }
  }
  SUBCASE("running statistics follow the momentum rule") {
    BatchNormLayer bn("bn", 2);
    Tensor x = random_uniform({6, 2}, 1, 3, rng);
    bn.forward(t, t.constant(x), Mode::kTrain);
    Tensor m = channel_stat(x, false), v = channel_stat(x, true);
    for (std::size_t c = 0; c < 2; ++c) {
      CHECK(std::abs(bn.running_mean()[c] - 0.01 * m[c]) <= 1e-15);
      CHECK(std::abs(bn.running_var()[c] - (0.99 + 0.01 * v[c])) <= 1e-15);
      CHECK(bn.running_var()[c] >= 0.0);
    }
  }
  SUBCASE("eval mode leaves running stats untouched") {
    BatchNormLayer bn("bn", 2);
    randomize_norm(bn, rng);
    Tensor rm = bn.running_mean(), rv = bn.running_var();
    bn.forward(t, t.constant(random_uniform({3, 2}, -1, 1, rng)), Mode::kEval);
    CHECK(bn.running_mean() == rm);
    CHECK(bn.running_var() == rv);
  }
  SUBCASE("single sample with zero variance is finite") {
    BatchNormLayer bn("bn", 3);
    Tensor y = bn.forward(t, t.constant(Tensor({1, 1, 1, 3}, 2.0)), Mode::kTrain).value();
    CHECK(y.all_finite());
  }
  SUBCASE("channel mismatch") {
    BatchNormLayer bn("bn", 3);
    CHECK_THROWS_AS(bn.forward(t, t.constant(Tensor({2, 4})), Mode::kEval), DimensionError);
  }
}

TEST_CASE("inverted residual block") {
  Rng rng(4);
  CHECK_THROWS_AS(InvertedResidualBlock("b", 4, 4, 2, 3, rng), ArgumentError);

  SUBCASE("zero projection with skip is the identity") {
    InvertedResidualBlock block("b", 4, 4, 3, 1, rng);
    REQUIRE(block.has_skip());
    fill(block.project().kernel(), 0.0);
    Tensor x = random_uniform({2, 5, 5, 4}, -1, 1, rng);
    for (Mode mode : {Mode::kTrain, Mode::kEval}) {
      Tape t;
      CHECK(block.forward(t, t.constant(x), mode).value() == x);
    }
  }
  SUBCASE("all weights zero with skip is the identity") {
    InvertedResidualBlock block("b", 3, 3, 2, 1, rng);
    fill(block.expand()->kernel(), 0.0);
    fill(block.depthwise().kernel(), 0.0);
    fill(block.project().kernel(), 0.0);
    Tensor x = random_uniform({1, 4, 4, 3}, -1, 1, rng);
    Tape t;
    CHECK(block.forward(t, t.constant(x), Mode::kEval).value() == x);
  }
  SUBCASE("stride 2 halves spatial dims with ceil") {
    InvertedResidualBlock block("b", 4, 6, 2, 2, rng);
    CHECK_FALSE(block.has_skip());
    Tape t;
    CHECK(block.forward(t, t.constant(Tensor({2, 7, 5, 4})), Mode::kEval).shape() == Shape{2, 4, 3, 6});
  }
  SUBCASE("skip only when stride 1 and channels match") {
    CHECK_FALSE(InvertedResidualBlock("b", 4, 6, 2, 1, rng).has_skip());
    CHECK_FALSE(InvertedResidualBlock("b", 4, 4, 2, 2, rng).has_skip());
    CHECK_FALSE(InvertedResidualBlock("b", 4, 4, 1, 1, rng).has_expand());
  }
  SUBCASE("matches a hand-composed primitive chain") {
    for (std::size_t stride : {1u, 2u}) {
      InvertedResidualBlock block("b", 4, 4, 2, stride, rng);
      for (BatchNormLayer* bn : {block.expand_bn(), &block.depthwise_bn(), &block.project_bn()}) randomize_norm(*bn, rng);
      Tensor x = random_uniform({2, 6, 6, 4}, -1, 1, rng);
      Tape t;
      Var in = t.constant(x);
      Var h = ops::conv2d(in, t.constant(block.expand()->kernel().value), 1, ops::Padding::kSame);
      h = ops::relu6(eval_bn(t, h, *block.expand_bn(), block.expand_bn()->gamma(), block.expand_bn()->beta()));
      h = ops::depthwise_conv2d(h, t.constant(block.depthwise().kernel().value), stride, ops::Padding::kSame);
      h = ops::relu6(eval_bn(t, h, block.depthwise_bn(), block.depthwise_bn().gamma(), block.depthwise_bn().beta()));
      h = ops::conv2d(h, t.constant(block.project().kernel().value), 1, ops::Padding::kSame);
      h = eval_bn(t, h, block.project_bn(), block.project_bn().gamma(), block.project_bn().beta());
      if (stride == 1) h = ops::add(h, in);
      Tape t2;
      CHECK(max_abs_diff(block.forward(t2, t2.constant(x), Mode::kEval).value(), h.value()) <= 1e-10);
    }
  }
}

TEST_CASE("vocabulary fitting") {
  SUBCASE("frequency then lexicographic ids") {
    const std::vector<std::string> corpus{"Beef Stew", "beef soup"};
    Vectorizer v = fit_vocab(corpus, 10, 4);
    CHECK(v.id_of("beef") == 2);
    CHECK(v.id_of("soup") == 3);
    CHECK(v.id_of("stew") == 4);
    CHECK(v.vocab_size() == 5);
  }
  SUBCASE("single token") {
    const std::vector<std::string> corpus{"a"};
    Vectorizer v = fit_vocab(corpus, 10, 4);
    CHECK(v.tokens() == std::vector<std::string>{"a"});
    CHECK(v.id_of("a") == 2);
  }
  SUBCASE("capacity keeps max_vocab - 2 tokens") {
    const std::vector<std::string> corpus{"e d c b a"};
    Vectorizer v = fit_vocab(corpus, 3, 4);
    CHECK(v.vocab_size() == 3);
    CHECK(v.tokens() == std::vector<std::string>{"a"});
  }
  SUBCASE("punctuation and case are normalized") {
    CHECK(tokenize("  Mac & Cheese, (Large)!  ") == std::vector<std::string>{"mac", "cheese", "large"});
  }
  SUBCASE("empty corpus") {
    CHECK_THROWS_AS(fit_vocab(std::vector<std::string>{}, 10, 4), ArgumentError);
  }
}

TEST_CASE("vectorize") {
  const std::vector<std::string> corpus{"beef", "beef"};
  Vectorizer v = fit_vocab(corpus, 10, 4);
  CHECK(v.vectorize("") == std::vector<std::size_t>{0, 0, 0, 0});
  CHECK(v.vectorize("beef beef") == std::vector<std::size_t>{2, 2, 0, 0});
  CHECK(v.vectorize("dragonfruit") == std::vector<std::size_t>{1, 0, 0, 0});
  CHECK(v.vectorize("beef beef beef beef beef beef").size() == 4);

  SUBCASE("kept corpus tokens never map to oov") {
    const std::vector<std::string> names{"chicken salad", "grilled chicken", "tomato soup", "pasta salad", "soup"};
    Vectorizer w = fit_vocab(names, 100, 6);
    for (const auto& name : names) {
      for (std::size_t id : w.vectorize(name)) CHECK(id != Vectorizer::kOovId);
    }
  }
}

TEST_CASE("embedding and pooling") {
  Rng rng(5);
  EmbeddingTable table("emb", 6, 4, rng);
  Tape t;
  SUBCASE("constant sequence pools to its row") {
    const std::vector<std::size_t> ids(2 * 5, 3);
    Tensor pooled = table.embed_and_pool(t, ids, 2, 5).pooled.value();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t e = 0; e < 4; ++e) CHECK(std::abs(pooled[b * 4 + e] - table.table().value[3 * 4 + e]) <= 1e-15);
  }
  SUBCASE("zero table pools to zero") {
    fill(table.table(), 0.0);
    const std::vector<std::size_t> ids{0, 1, 2, 5};
    for (double v : table.embed_and_pool(t, ids, 1, 4).pooled.value().data()) CHECK(v == 0.0);
  }
  SUBCASE("random ids match a per-row average, padding included") {
    std::vector<std::size_t> ids(3 * 7);
    for (auto& id : ids) id = rng.below(6);
    auto out = table.embed_and_pool(t, ids, 3, 7);
    CHECK(out.sequence.shape() == Shape{3, 7, 4});
    const Tensor& tab = table.table().value;
    double worst = 0.0;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t e = 0; e < 4; ++e) {
        double s = 0.0;
        for (std::size_t l = 0; l < 7; ++l) s += tab[ids[b * 7 + l] * 4 + e];
        worst = std::max(worst, std::abs(out.pooled.value()[b * 4 + e] - s / 7.0));
      }
    CHECK(worst <= 1e-12);
  }
  SUBCASE("out-of-range id") {
    const std::vector<std::size_t> ids{0, 6};
    CHECK_THROWS_AS(table.embed_and_pool(t, ids, 1, 2), ArgumentError);
  }
}

TEST_CASE("cross attention") {
  Rng rng(6);
  MultiHeadAttention mha("att", 8, 2, 4, rng);
  CHECK_FALSE(mha.key().has_bias());
  for (DenseLayer* d : {&mha.query(), &mha.value(), &mha.output()})
    d->bias().value = random_uniform(d->bias().value.shape(), -0.3, 0.3, rng);
  const auto weights = [&] {
    return oracle::AttentionWeights{mha.query().weights().value, mha.query().bias().value,
                                    mha.key().weights().value,   Tensor({8}, 0.0),
                                    mha.value().weights().value, mha.value().bias().value,
                                    mha.output().weights().value, mha.output().bias().value};
  };

  SUBCASE("single key ignores query content") {
    Tensor kv = random_uniform({1, 1, 8}, -1, 1, rng);
    Tape t;
    Tensor a = mha.forward(t, t.constant(random_uniform({1, 3, 8}, -1, 1, rng)), t.constant(kv)).output.value();
    Tensor b = mha.forward(t, t.constant(random_uniform({1, 3, 8}, -1, 1, rng)), t.constant(kv)).output.value();
    CHECK(max_abs_diff(a, b) <= 1e-12);
    // Wo(Wv v): every row equals the projected value.
    Tensor expect = oracle::attention(random_uniform({1, 1, 8}, -1, 1, rng), kv, weights(), 2, 4);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t d = 0; d < 8; ++d) CHECK(std::abs(a[i * 8 + d] - expect[d]) <= 1e-12);
  }
  SUBCASE("identical value rows give identical outputs") {
    Tensor row = random_uniform({8}, -1, 1, rng);
    Tensor kv({1, 4, 8});
    for (std::size_t i = 0; i < kv.size(); ++i) kv[i] = row[i % 8];
    Tape t;
    Tensor out = mha.forward(t, t.constant(random_uniform({1, 5, 8}, -1, 1, rng)), t.constant(kv)).output.value();
    for (std::size_t i = 1; i < 5; ++i)
      for (std::size_t d = 0; d < 8; ++d) CHECK(std::abs(out[i * 8 + d] - out[d]) <= 1e-12);
  }
  SUBCASE("matches the per-head loop oracle") {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      Tensor q = random_uniform({1, 3, 8}, -1, 1, rng), kv = random_uniform({1, 1 + rng.below(6), 8}, -1, 1, rng);
      Tape t;
      worst = std::max(worst, max_abs_diff(mha.forward(t, t.constant(q), t.constant(kv)).output.value(),
                                           oracle::attention(q, kv, weights(), 2, 4)));
    }
    CHECK(worst <= 1e-10);
  }
  SUBCASE("weights are distributions and key order does not matter") {
    Tensor q = random_uniform({2, 3, 8}, -1, 1, rng), kv = random_uniform({2, 5, 8}, -1, 1, rng);
    Tensor shuffled = kv;
    const std::size_t perm[] = {3, 0, 4, 1, 2};
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t d = 0; d < 8; ++d) shuffled[(b * 5 + r) * 8 + d] = kv[(b * 5 + perm[r]) * 8 + d];
    Tape t;
    auto a = mha.forward(t, t.constant(q), t.constant(kv));
    auto b = mha.forward(t, t.constant(q), t.constant(shuffled));
    CHECK(max_abs_diff(a.output.value(), b.output.value()) <= 1e-12);
    const Tensor& w = a.weights.value();
    CHECK(w.shape() == Shape{2, 2, 3, 5});
    for (std::size_t row = 0; row < w.size() / 5; ++row) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) {
        CHECK(w[row * 5 + k] >= 0.0);
        s += w[row * 5 + k];
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
  SUBCASE("model dim mismatch") {
    Tape t;
    CHECK_THROWS_AS(mha.forward(t, t.constant(Tensor({1, 2, 8})), t.constant(Tensor({1, 2, 6}))), DimensionError);
  }
}

TEST_CASE("flatten and concat") {
  Rng rng(7);
  Tape t;
  Tensor x = random_uniform({2, 3, 4}, -1, 1, rng);
  Var f = ops::flatten(t.constant(x));
  CHECK(f.shape() == Shape{2, 12});
  CHECK(f.value().values() == x.values());
  Tensor flat = random_uniform({5, 7}, -1, 1, rng);
  CHECK(ops::flatten(t.constant(flat)).value() == flat);
  CHECK(ops::reshape(f, {2, 3, 4}).value() == x);
  CHECK_THROWS_AS(ops::flatten(t.constant(Tensor({4}))), DimensionError);

  const Var single[] = {t.constant(flat)};
  CHECK(ops::concat(single).value() == flat);
  const Var parts[] = {t.constant(Tensor({2, 2}, 0.0)), t.constant(Tensor({2, 3}, 1.0))};
  CHECK(ops::concat(parts).value() == Tensor({2, 5}, {0, 0, 1, 1, 1, 0, 0, 1, 1, 1}));
  const Var bad[] = {t.constant(Tensor({2, 2})), t.constant(Tensor({3, 2}))};
  CHECK_THROWS_AS(ops::concat(bad), DimensionError);

  Var a = t.variable(random_uniform({2, 2}, -1, 1, rng)), b = t.variable(random_uniform({2, 3}, -1, 1, rng));
  const Var vars[] = {a, b};
  Gradients g = t.backward(ops::sum(ops::concat(vars)));
  CHECK(g.of(a) == Tensor({2, 2}, 1.0));
  CHECK(g.of(b) == Tensor({2, 3}, 1.0));
}

TEST_CASE("every layer passes gradcheck") {
  Rng rng(8);
  const double eps = 1e-5, tol = 1e-6;
  const auto weighted = [](Tape& t, Var y) {
    Rng r(99);
    return ops::sum(ops::mul(y, t.constant(random_uniform(y.shape(), 0.5, 1.5, r))));
  };

  SUBCASE("dense") {
    DenseLayer d("d", 4, 3, rng);
    d.bias().value = random_uniform({3}, -0.5, 0.5, rng);
    Tensor x = random_uniform({2, 4}, -1, 1, rng);
    CHECK(gradcheck([&](Tape& t, std::span<const Var> in) { return weighted(t, d.forward(t, in[0])); }, {x}, eps)
              .max_rel_error <= tol);
    std::vector<Parameter*> ps;
    d.collect(ps);
    CHECK(gradcheck_parameters([&](Tape& t) { return weighted(t, d.forward(t, t.constant(x))); }, ps, eps)
              .max_rel_error <= tol);
  }
  SUBCASE("dropout with a fixed mask") {
    DropoutLayer d(0.4);
    auto fn = [&](Tape& t, std::span<const Var> in) {
      Rng r(11);
      return weighted(t, d.forward(t, in[0], {Mode::kTrain, &r}));
    };
    CHECK(gradcheck(fn, {random_uniform({3, 4}, -1, 1, rng)}, eps).max_rel_error <= tol);
  }
  SUBCASE("batch norm in both modes") {
    BatchNormLayer bn("bn", 3);
    randomize_norm(bn, rng);
    Tensor x = random_uniform({2, 3, 3, 3}, -1, 1, rng);
    std::vector<Parameter*> ps;
    bn.collect(ps);
    for (Mode mode : {Mode::kTrain, Mode::kEval}) {
      CHECK(gradcheck([&](Tape& t, std::span<const Var> in) { return weighted(t, bn.forward(t, in[0], mode)); }, {x},
                      eps)
                .max_rel_error <= tol);
      CHECK(gradcheck_parameters([&](Tape& t) { return weighted(t, bn.forward(t, t.constant(x), mode)); }, ps, eps)
                .max_rel_error <= tol);
    }
  }
  SUBCASE("convolutions") {
    ConvLayer conv("c", 3, 2, 3, 2, rng);
    DepthwiseConvLayer dw("dw", 3, 2, 1, rng);
    Tensor x = random_uniform({1, 5, 5, 2}, -1, 1, rng);
    std::vector<Parameter*> ps{&conv.kernel(), &dw.kernel()};
    auto net = [&](Tape& t, Var in) { return conv.forward(t, dw.forward(t, in)); };
    CHECK(gradcheck([&](Tape& t, std::span<const Var> in) { return weighted(t, net(t, in[0])); }, {x}, eps)
              .max_rel_error <= tol);
    CHECK(gradcheck_parameters([&](Tape& t) { return weighted(t, net(t, t.constant(x))); }, ps, eps).max_rel_error <=
          tol);
  }
  SUBCASE("inverted residual block") {
    // Eval mode: a train-mode norm makes the loss invariant to rescaling the
    // preceding kernel, so those gradients are ~1e-6 and the check would only
    // measure rounding noise. Train-mode norms are checked on their own above.
    for (std::size_t stride : {1u, 2u}) {
      InvertedResidualBlock block("b", 3, 3, 2, stride, rng);
      for (BatchNormLayer* bn : {block.expand_bn(), &block.depthwise_bn(), &block.project_bn()}) randomize_norm(*bn, rng);
      Tensor x = random_uniform({2, 4, 4, 3}, -1, 1, rng);
      std::vector<Parameter*> ps;
      block.collect(ps);
      CHECK(gradcheck([&](Tape& t, std::span<const Var> in) { return weighted(t, block.forward(t, in[0], Mode::kEval)); },
                      {x}, eps)
                .max_rel_error <= tol);
      CHECK(gradcheck_parameters([&](Tape& t) { return weighted(t, block.forward(t, t.constant(x), Mode::kEval)); },
                                 ps, eps)
                .max_rel_error <= tol);
    }
  }
  SUBCASE("embedding") {
    EmbeddingTable table("emb", 5, 3, rng);
    const std::vector<std::size_t> ids{0, 2, 2, 4, 1, 0};
    std::vector<Parameter*> ps{&table.table()};
    CHECK(gradcheck_parameters(
              [&](Tape& t) {
                auto e = table.embed_and_pool(t, ids, 2, 3);
                return ops::add(weighted(t, e.sequence), weighted(t, e.pooled));
              },
              ps, eps)
              .max_rel_error <= tol);
  }
  SUBCASE("attention") {
    MultiHeadAttention mha("att", 4, 2, 3, rng);
    Tensor q = random_uniform({2, 3, 4}, -1, 1, rng), kv = random_uniform({2, 2, 4}, -1, 1, rng);
    std::vector<Parameter*> ps;
    mha.collect(ps);
    CHECK(gradcheck([&](Tape& t, std::span<const Var> in) { return weighted(t, mha.forward(t, in[0], in[1]).output); },
                    {q, kv}, eps)
              .max_rel_error <= tol);
    CHECK(gradcheck_parameters(
              [&](Tape& t) { return weighted(t, mha.forward(t, t.constant(q), t.constant(kv)).output); }, ps, eps)
              .max_rel_error <= tol);
  }
}
