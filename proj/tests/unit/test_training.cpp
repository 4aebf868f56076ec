#include <cmath>
#include <fstream>

#include "doctest.h"
#include "kcalnet/checkpoint.hpp"
#include "kcalnet/config.hpp"
#include "kcalnet/errors.hpp"
#include "kcalnet/format.hpp"
#include "kcalnet/gradcheck.hpp"
#include "kcalnet/synth.hpp"
#include "kcalnet/training.hpp"
#include "support/temp_dir.hpp"

using namespace kcalnet;
using testing_support::TempDir;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.arch.image_size = 16;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 4;
  return cfg;
}

struct TinyData {
  ImageCache cache{16};
  std::vector<DishRecord> records;
  Vectorizer vectorizer{{}, 1};

  explicit TinyData(std::size_t n = 20) {
    SynthOptions so;
    so.n = n;
    so.image_size = 16;
    so.seed = 2;
    records = prime_cache(synth_generate(so), "mem", cache);
    vectorizer = fit_vectorizer(records, tiny_config().arch);
  }
};

std::vector<Tensor> values_of(const CalorieModel& m) {
  std::vector<Tensor> out;
  for (const Parameter* p : m.parameters()) out.push_back(p->value);
  return out;
}

}  // namespace

TEST_CASE("mse loss") {
  Tape t;
  CHECK(mse_loss(t.constant(Tensor({2, 1}, {3, 4})), t.constant(Tensor({2, 1}, {3, 4}))).value().item() == 0.0);
  CHECK(mse_loss(t.constant(Tensor({1, 1}, {0})), t.constant(Tensor({1, 1}, {2}))).value().item() == 4.0);
  CHECK(mse_loss(t.constant(Tensor({2, 1}, {1, 2})), t.constant(Tensor({2, 1}, {3, 0}))).value().item() == 4.0);
  CHECK_THROWS_AS(mse_loss(t.constant(Tensor({2, 1})), t.constant(Tensor({1, 2}))), DimensionError);
  Rng rng(1);
  const Tensor target = random_uniform({4, 1}, -1, 1, rng);
  auto r = gradcheck([&](Tape& tp, std::span<const Var> in) { return mse_loss(in[0], tp.constant(target)); },
                     {random_uniform({4, 1}, -1, 1, rng)}, 1e-5);
  CHECK(r.max_rel_error <= 1e-8);
}

TEST_CASE("adam") {
  AdamConfig cfg;
  SUBCASE("zero gradients leave fresh parameters unchanged at every step") {
    Parameter p{"p", Tensor({3}, {1.0, -2.0, 0.5})};
    std::vector<Parameter*> ps{&p};
    AdamState st;
    for (int i = 0; i < 20; ++i) adam_step(ps, std::vector<Tensor>{Tensor({3})}, st, cfg);
    CHECK(p.value == Tensor({3}, {1.0, -2.0, 0.5}));
    CHECK(st.t == 20);
  }
  SUBCASE("first step moves by lr * |g| / (|g| + eps)") {
    for (double g : {3.0, -0.25, 1e-6}) {
      Parameter p{"p", Tensor::scalar(0.7)};
      std::vector<Parameter*> ps{&p};
      AdamState st;
      adam_step(ps, std::vector<Tensor>{Tensor::scalar(g)}, st, cfg);
      const double step = 0.7 - p.value.item();
      CHECK(std::abs(std::abs(step) - cfg.learning_rate * std::abs(g) / (std::abs(g) + cfg.epsilon)) <= 1e-15);
      CHECK(std::signbit(step) == std::signbit(g));
    }
  }
  SUBCASE("five steps on p^2 match a scalar reference iteration") {
    cfg.learning_rate = 0.1;
    Parameter p{"p", Tensor::scalar(1.0)};
    std::vector<Parameter*> ps{&p};
    AdamState st;
    double ref = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 5; ++t) {
      const double g = 2.0 * ref;
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      ref -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-7);
      adam_step(ps, std::vector<Tensor>{Tensor::scalar(2.0 * p.value.item())}, st, cfg);
      CHECK(std::abs(p.value.item() - ref) <= 1e-12);
      CHECK(st.v[0].item() >= 0.0);
    }
    CHECK(st.t == 5);
  }
  SUBCASE("one step decreases a convex quadratic below the stability bound") {
    // For f = a p^2 a fresh step moves p by about lr toward 0, which lowers f
    // whenever lr < 2 |p|.
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      const double a = rng.uniform(0.1, 10), p0 = rng.uniform(-3, 3);
      AdamConfig c;
      c.learning_rate = rng.uniform(0.01, 1.9) * std::abs(p0);
      Parameter p{"p", Tensor::scalar(p0)};
      std::vector<Parameter*> ps{&p};
      AdamState st;
      adam_step(ps, std::vector<Tensor>{Tensor::scalar(2 * a * p0)}, st, c);
      CHECK(a * p.value.item() * p.value.item() < a * p0 * p0);
    }
  }
  SUBCASE("mismatched keys and counts") {
    Parameter p{"p", Tensor({2})}, q{"q", Tensor({2})};
    std::vector<Parameter*> ps{&p};
    AdamState st;
    adam_step(ps, std::vector<Tensor>{Tensor({2})}, st, cfg);
    std::vector<Parameter*> other{&q};
    CHECK_THROWS_AS(adam_step(other, std::vector<Tensor>{Tensor({2})}, st, cfg), ArgumentError);
    CHECK_THROWS_AS(adam_step(ps, std::vector<Tensor>{}, st, cfg), ArgumentError);
    CHECK_THROWS_AS(adam_step(ps, std::vector<Tensor>{Tensor({3})}, st, cfg), ArgumentError);
  }
}

TEST_CASE("configuration") {
  SUBCASE("key-value round trip is exact") {
    TrainConfig cfg = tiny_config();
    cfg.adam.learning_rate = 0.1 + 0.2;
    cfg.augment = AugmentMode::kOnce;
    cfg.arch.backbone_widths = {4, 12};
    TrainConfig back;
    apply_key_values(back, to_key_values(cfg));
    CHECK(back.arch == cfg.arch);
    CHECK(back.adam.learning_rate == cfg.adam.learning_rate);
    CHECK(to_key_values(back) == to_key_values(cfg));
    CHECK(parse_key_values(to_config_text(cfg)) == to_key_values(cfg));
  }
  SUBCASE("flags beat file beats defaults") {
    TempDir dir;
    write_text_file(dir / "run.cfg", "# comment\nepochs = 7\nlearning_rate = 0.01\n\nseed=3\n");
    const auto file = dir / "run.cfg";
    TrainConfig cfg = resolve_config(&file, {{"seed", "9"}});
    CHECK(cfg.epochs == 7);
    CHECK(cfg.adam.learning_rate == 0.01);
    CHECK(cfg.seed == 9);
    CHECK(cfg.batch_size == 16);
    CHECK(resolve_config(nullptr, {}).epochs == 10);
    CHECK(resolve_config(nullptr, {{"preset", "full"}}).arch == ArchConfig::full_scale());
  }
  SUBCASE("defaults") {
    const TrainConfig cfg;
    CHECK(cfg.adam.learning_rate == 1e-3);
    CHECK(cfg.adam.beta1 == 0.9);
    CHECK(cfg.adam.beta2 == 0.999);
    CHECK(cfg.adam.epsilon == 1e-7);
    CHECK(cfg.epochs == 10);
    CHECK(cfg.batch_size == 16);
    CHECK(cfg.split_ratio == 0.8);
  }
  SUBCASE("bad input") {
    TrainConfig cfg;
    CHECK_THROWS_AS(apply_key_values(cfg, {{"epoch", "3"}}), ConfigError);
    CHECK_THROWS_AS(apply_key_values(cfg, {{"epochs", "three"}}), ConfigError);
    CHECK_THROWS_AS(apply_key_values(cfg, {{"learning_rate", "1e-3x"}}), ConfigError);
    CHECK_THROWS_AS(apply_key_values(cfg, {{"dense_units", ""}}), ConfigError);
    CHECK_THROWS_AS(apply_key_values(cfg, {{"augment", "sometimes"}}), ConfigError);
    CHECK_THROWS_AS(resolve_config(nullptr, {{"beta1", "1"}}), ConfigError);
    CHECK_THROWS_AS(resolve_config(nullptr, {{"epochs", "0"}}), ConfigError);
    CHECK_THROWS_AS(parse_key_values("a = 1\na = 2\n"), ConfigError);
    CHECK_THROWS_AS(parse_key_values("novalue\n"), ConfigError);
  }
}

TEST_CASE("training loop") {
  TinyData data;
  const TrainConfig cfg = tiny_config();
  SUBCASE("zero learning rate leaves parameters bitwise unchanged") {
    TrainConfig c = cfg;
    c.adam.learning_rate = 0.0;
    CalorieModel m = build_multimodal(c.arch, 1);
    const auto before = values_of(m);
    TrainState st;
    const TrainLog log = train(m, data.records, &data.vectorizer, data.cache, c, st);
    CHECK(values_of(m) == before);
    CHECK(log.epochs.size() == 3);
    CHECK(st.adam.t == 9);
  }
  SUBCASE("same seed, same log and parameters") {
    for (ModelKind kind : {ModelKind::kUnimodal, ModelKind::kMultimodal}) {
      const Vectorizer* v = kind == ModelKind::kMultimodal ? &data.vectorizer : nullptr;
      CalorieModel a = CalorieModel::build(kind, cfg.arch, cfg.seed), b = CalorieModel::build(kind, cfg.arch, cfg.seed);
      TrainState sa, sb;
      const TrainLog la = train(a, data.records, v, data.cache, cfg, sa);
      const TrainLog lb = train(b, data.records, v, data.cache, cfg, sb);
      for (std::size_t e = 0; e < la.epochs.size(); ++e) CHECK(la.epochs[e].loss == lb.epochs[e].loss);
      CHECK(values_of(a) == values_of(b));
      CHECK(sa.adam == sb.adam);
      CHECK(a.predict(data.cache.get(data.records[0]).reshaped({1, 16, 16, 3}),
                      v ? v->vectorize(data.records[0].dish_name) : std::vector<std::size_t>{}) ==
            b.predict(data.cache.get(data.records[0]).reshaped({1, 16, 16, 3}),
                      v ? v->vectorize(data.records[0].dish_name) : std::vector<std::size_t>{}));
    }
  }
  SUBCASE("target normalization comes from the training labels") {
    CalorieModel m = build_unimodal(cfg.arch, 1);
    TrainState st;
    train(m, data.records, nullptr, data.cache, cfg, st, 1);
    double mean = 0;
    for (const auto& r : data.records) mean += r.calories / data.records.size();
    CHECK(std::abs(m.target_offset() - mean) <= 1e-9);
    CHECK(st.epochs_done == 1);
  }
  SUBCASE("loss log is csv") {
    CalorieModel m = build_unimodal(cfg.arch, 1);
    TrainState st;
    const TrainLog log = train(m, data.records, nullptr, data.cache, cfg, st);
    const auto rows = parse_csv(log.to_csv());
    CHECK(rows[0] == std::vector<std::string>{"epoch", "loss"});
    CHECK(rows.size() == 4);
    CHECK(std::stod(rows[1][1]) == log.epochs[0].loss);
  }
  SUBCASE("a non-finite loss aborts with the epoch and batch") {
    CalorieModel m = build_unimodal(cfg.arch, 1);
    m.parameters().back()->value[0] = std::nan("");
    TrainState st;
    try {
      train(m, data.records, nullptr, data.cache, cfg, st);
      FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
      CHECK(std::string(e.what()).find("epoch 1, batch 1") != std::string::npos);
    }
  }
  SUBCASE("argument checks") {
    CalorieModel m = build_multimodal(cfg.arch, 1);
    TrainState st;
    CHECK_THROWS_AS(train(m, data.records, nullptr, data.cache, cfg, st), ArgumentError);
    CHECK_THROWS_AS(train(m, {}, &data.vectorizer, data.cache, cfg, st), ArgumentError);
  }
}

TEST_CASE("checkpoints") {
  TinyData data;
  TempDir dir;
  const TrainConfig cfg = tiny_config();
  CalorieModel m = build_multimodal(cfg.arch, cfg.seed);
  TrainState st;
  train(m, data.records, &data.vectorizer, data.cache, cfg, st, 2);
  const auto path = dir / "model.ckpt";
  save_checkpoint(path, m, cfg, &data.vectorizer, st, "fp123");

  SUBCASE("round trip restores everything bitwise") {
    const Checkpoint ck = load_checkpoint(path);
    CHECK(values_of(ck.model) == values_of(m));
    CHECK(ck.state.adam == st.adam);
    CHECK(ck.state.epochs_done == 2);
    CHECK(ck.vectorizer == data.vectorizer);
    CHECK(to_key_values(ck.config) == to_key_values(cfg));
    CHECK(ck.dataset_fingerprint == "fp123");
    CHECK(ck.model.target_offset() == m.target_offset());
    for (std::size_t i = 0; i < m.batch_norms().size(); ++i) {
      CHECK(ck.model.batch_norms()[i]->running_mean() == m.batch_norms()[i]->running_mean());
      CHECK(ck.model.batch_norms()[i]->running_var() == m.batch_norms()[i]->running_var());
    }
    Batch b;
    BatchStream s(data.records, &data.vectorizer, data.cache, {});
    s.next(b);
    CHECK(ck.model.predict(b.images, b.token_ids) == m.predict(b.images, b.token_ids));
  }
  SUBCASE("truncation, corruption and version changes are rejected") {
    const std::string bytes = read_text_file(path);
    for (std::size_t keep : {std::size_t{0}, std::size_t{5}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
      write_text_file(dir / "cut.ckpt", bytes.substr(0, keep));
      CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), CheckpointError);
    }
    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    write_text_file(dir / "flip.ckpt", flipped);
    CHECK_THROWS_AS(load_checkpoint(dir / "flip.ckpt"), CheckpointError);
    std::string versioned = bytes;
    versioned[8] = 2;
    write_text_file(dir / "v2.ckpt", versioned);
    CHECK_THROWS_AS(load_checkpoint(dir / "v2.ckpt"), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), IoError);
  }
  SUBCASE("saving leaves no temporary file behind") {
    for (const auto& entry : std::filesystem::directory_iterator(dir.path()))
      CHECK(entry.path().extension() != ".tmp");
  }
  SUBCASE("resuming equals an uninterrupted run") {
    TrainConfig full_cfg = cfg;
    full_cfg.epochs = 4;
    CalorieModel full = build_multimodal(cfg.arch, cfg.seed);
    TrainState full_state;
    const TrainLog full_log = train(full, data.records, &data.vectorizer, data.cache, full_cfg, full_state);

    Checkpoint ck = load_checkpoint(path);
    const TrainLog rest = train(ck.model, data.records, &*ck.vectorizer, data.cache, full_cfg, ck.state);
    REQUIRE(rest.epochs.size() == 2);
    CHECK(rest.epochs[0].epoch == 3);
    CHECK(rest.epochs[1].loss == full_log.epochs[3].loss);
    CHECK(values_of(ck.model) == values_of(full));
    CHECK(ck.state.adam == full_state.adam);
  }
}
