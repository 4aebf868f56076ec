#include <algorithm>
#include <chrono>
#include <cmath>

#include "doctest.h"
#include "kcalnet/errors.hpp"
#include "kcalnet/gradcheck.hpp"
#include "kcalnet/model.hpp"
#include "support/param_oracle.hpp"

using namespace kcalnet;

namespace {

ArchConfig micro32() {
  ArchConfig cfg = ArchConfig::micro();
  cfg.image_size = 32;
  return cfg;
}

std::vector<std::size_t> random_ids(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<std::size_t> ids(n);
  for (auto& id : ids) id = rng.below(vocab);
  return ids;
}

bool is_subsequence(const std::vector<std::string>& small, const std::vector<std::string>& big) {
  auto it = big.begin();
  for (const auto& s : small) {
    it = std::find(it, big.end(), s);
    if (it == big.end()) return false;
    ++it;
  }
  return true;
}

}  // namespace

TEST_CASE("configuration validation") {
  ArchConfig cfg = micro32();
  CHECK_NOTHROW(cfg.validate(ModelKind::kMultimodal));
  cfg.embed_dim = 12;
  CHECK_NOTHROW(cfg.validate(ModelKind::kUnimodal));
  CHECK_THROWS_AS(build_multimodal(cfg, 1), ConfigError);
  cfg = micro32();
  cfg.dense_units = {16};
  CHECK_THROWS_AS(build_unimodal(cfg, 1), ConfigError);
  cfg = micro32();
  cfg.backbone_strides = {1, 3};
  CHECK_THROWS_AS(build_unimodal(cfg, 1), ConfigError);
  CHECK(parse_model_kind("multimodal") == ModelKind::kMultimodal);
  CHECK_THROWS_AS(parse_model_kind("bimodal"), ConfigError);
}

TEST_CASE("unimodal model") {
  const ArchConfig cfg = micro32();
  CalorieModel m = build_unimodal(cfg, 7);
  SUBCASE("zeros give a finite B x 1 output") {
    Tensor y = m.predict(Tensor({3, 32, 32, 3}, 0.0));
    CHECK(y.shape() == Shape{3, 1});
    CHECK(y.all_finite());
  }
  SUBCASE("same seed gives bitwise identical parameters") {
    CalorieModel other = build_unimodal(cfg, 7);
    auto a = m.parameters();
    auto b = other.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
    CalorieModel different = build_unimodal(cfg, 8);
    CHECK_FALSE(different.parameters()[0]->value == a[0]->value);
  }
  SUBCASE("parameter count matches the layer-by-layer oracle") {
    CHECK(m.param_count() == oracle::unimodal_params(cfg));
    CHECK(oracle::dense(4, 3) == 15);
  }
  SUBCASE("text is rejected") {
    Tensor img({1, 32, 32, 3});
    const std::vector<std::size_t> ids(cfg.max_tokens, 2);
    CHECK_THROWS_AS(m.predict(img, ids), ArgumentError);
    CHECK_THROWS_AS(m.predict(Tensor({1, 16, 16, 3})), DimensionError);
  }
}

TEST_CASE("multimodal model") {
  const ArchConfig cfg = micro32();
  CalorieModel m = build_multimodal(cfg, 7);
  CalorieModel u = build_unimodal(cfg, 7);
  Rng rng(3);
  SUBCASE("zero image and all-padding text") {
    const std::vector<std::size_t> ids(2 * cfg.max_tokens, 0);
    Tensor y = m.predict(Tensor({2, 32, 32, 3}, 0.0), ids);
    CHECK(y.shape() == Shape{2, 1});
    CHECK(y.all_finite());
  }
  SUBCASE("text is required") {
    CHECK_THROWS_AS(m.predict(Tensor({1, 32, 32, 3})), ArgumentError);
  }
  SUBCASE("changing only the text changes the output") {
    Tensor img = random_uniform({1, 32, 32, 3}, 0, 1, rng);
    const std::vector<std::size_t> a{2, 3, 0, 0, 0, 0, 0, 0}, b{5, 9, 4, 0, 0, 0, 0, 0};
    CHECK(std::abs(m.predict(img, a).item() - m.predict(img, b).item()) > 1e-9);
  }
  SUBCASE("parameter difference is text branch, attention and the wider first dense layer") {
    CHECK(m.param_count() - u.param_count() == oracle::multimodal_extra(cfg));
    CHECK(m.param_count() == oracle::unimodal_params(cfg) + oracle::multimodal_extra(cfg));
  }
  SUBCASE("unimodal layers are a subsequence of the multimodal layers") {
    CHECK(is_subsequence(u.layer_signatures(), m.layer_signatures()));
    const ArchConfig big = ArchConfig::full_scale();
    CHECK(is_subsequence(build_unimodal(big, 1).layer_signatures(), build_multimodal(big, 1).layer_signatures()));
  }
  SUBCASE("eval mode is deterministic, batch independent and ignores the dropout stream") {
    Tensor img = random_uniform({3, 32, 32, 3}, 0, 1, rng);
    const auto ids = random_ids(3 * cfg.max_tokens, cfg.vocab_size, rng);
    Tensor y = m.predict(img, ids);
    CHECK(m.predict(img, ids) == y);
    Tensor one({1, 32, 32, 3}, std::vector<double>(img.data().begin() + 32 * 32 * 3, img.data().begin() + 2 * 32 * 32 * 3));
    const std::vector<std::size_t> one_ids(ids.begin() + cfg.max_tokens, ids.begin() + 2 * cfg.max_tokens);
    CHECK(std::abs(m.predict(one, one_ids).item() - y[1]) <= 1e-6);
    Rng r1(1), r2(2);
    Tape t1, t2;
    ModelInput in{&img, ids, true};
    CHECK(m.forward(t1, in, {Mode::kEval, &r1}).value() == m.forward(t2, in, {Mode::kEval, &r2}).value());
  }
}

TEST_CASE("full-scale configuration exceeds three million parameters") {
  const ArchConfig cfg = ArchConfig::full_scale();
  CalorieModel m = build_multimodal(cfg, 1);
  CHECK(m.param_count() > 3000000);
  CHECK(m.param_count() == oracle::unimodal_params(cfg) + oracle::multimodal_extra(cfg));
  CHECK(cfg.feature_grid() == 7);
}

TEST_CASE("output is finite for random inputs and parameters") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    ArchConfig cfg = micro32();
    cfg.image_size = 16 + rng.below(17);
    CalorieModel m = build_multimodal(cfg, 100 + trial);
    for (Parameter* p : m.parameters()) p->value = random_uniform(p->value.shape(), -2, 2, rng);
    Tensor img = random_uniform({2, cfg.image_size, cfg.image_size, 3}, 0, 1, rng);
    CHECK(m.predict(img, random_ids(2 * cfg.max_tokens, cfg.vocab_size, rng)).all_finite());
  }
}

TEST_CASE("end-to-end gradcheck of both micro models") {
  // 16 x 16 input keeps the multimodal check (about 8k parameters, two
  // forwards each) within a few seconds.
  ArchConfig cfg = ArchConfig::micro();
  cfg.image_size = 16;
  Rng rng(5);
  Tensor img = random_uniform({2, 16, 16, 3}, 0, 1, rng);
  const auto ids = random_ids(2 * cfg.max_tokens, cfg.vocab_size, rng);
  for (ModelKind kind : {ModelKind::kUnimodal, ModelKind::kMultimodal}) {
    CalorieModel m = CalorieModel::build(kind, cfg, 21);
    const bool text = kind == ModelKind::kMultimodal;
    const ModelInput in{&img, text ? std::span<const std::size_t>(ids) : std::span<const std::size_t>{}, text};
    // Fresh running statistics (mean 0, var 1) leave whole channels dead and
    // exactly on a relu6 kink; train-mode passes move them to batch statistics.
    for (int pass = 0; pass < 400; ++pass) {
      Tape t;
      Rng dropout(pass);
      m.forward(t, in, {Mode::kTrain, &dropout});
    }
    // Eval mode: train-mode normalization cancels per-channel shifts, which
    // gives some biases an exactly zero gradient that differences cannot resolve.
    auto fn = [&](Tape& t) { return ops::mean(m.forward(t, in, {Mode::kEval, nullptr})); };
    auto params = m.parameters();
    // Head and attention gradients go down to 1e-9, so a small step drowns in
    // rounding; the larger step is safe because it shrinks near relu kinks.
    const auto start = std::chrono::steady_clock::now();
    GradcheckResult r = gradcheck_parameters(fn, params, 1e-4);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    INFO(to_string(kind) << " coordinates " << r.coordinates << " seconds " << seconds);
    CHECK(r.coordinates == m.param_count());
    CHECK(r.max_rel_error <= 1e-5);
  }
}
