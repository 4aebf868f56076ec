#include "kcalnet/verify.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "json.hpp"
#include "kcalnet/data.hpp"
#include "kcalnet/errors.hpp"
#include "kcalnet/format.hpp"
#include "kcalnet/gradcheck.hpp"
#include "kcalnet/model.hpp"
#include "kcalnet/stats.hpp"
#include "kcalnet/synth.hpp"

#ifndef KCALNET_FIXTURES_DIR
#define KCALNET_FIXTURES_DIR "tests/fixtures"
#endif

namespace kcalnet {

std::filesystem::path default_fixtures_path() {
  return std::filesystem::path(KCALNET_FIXTURES_DIR) / "stats_fixtures.json";
}

namespace {

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

CheckResult gradcheck_result(const std::string& name, const GradcheckResult& r, double tol) {
  return {name, r.max_rel_error <= tol,
          "max rel error " + sci(r.max_rel_error) + " over " + std::to_string(r.coordinates) + " coordinates"};
}

void randomize_norm(BatchNormLayer& bn, Rng& rng) {
  const Shape s = bn.gamma().value.shape();
  bn.gamma().value = random_uniform(s, 0.5, 1.5, rng);
  bn.beta().value = random_uniform(s, -0.5, 0.5, rng);
  bn.running_mean() = random_uniform(s, -0.5, 0.5, rng);
  bn.running_var() = random_uniform(s, 0.5, 2.0, rng);
}

Var weighted(Tape& t, Var y) {
  Rng r(99);
  return ops::sum(ops::mul(y, t.constant(random_uniform(y.value().shape(), 0.5, 1.5, r))));
}

std::vector<CheckResult> gradcheck_suite(const VerifyOptions& opt) {
  std::vector<CheckResult> out;
  const double eps = 1e-5, tol = opt.layer_tolerance;
  Rng rng(8);
  auto both = [&](const std::string& name, const TapeFunction& fn, const std::vector<Tensor>& inputs,
                  const std::function<Var(Tape&)>& pfn, std::vector<Parameter*> ps) {
    if (!inputs.empty()) out.push_back(gradcheck_result(name + " inputs", gradcheck(fn, inputs, eps), tol));
    if (!ps.empty()) out.push_back(gradcheck_result(name + " parameters", gradcheck_parameters(pfn, ps, eps), tol));
  };

  {
    DenseLayer d("d", 4, 3, rng);
    d.bias().value = random_uniform({3}, -0.5, 0.5, rng);
    Tensor x = random_uniform({2, 4}, -1, 1, rng);
    std::vector<Parameter*> ps;
    d.collect(ps);
    both("dense", [&](Tape& t, std::span<const Var> in) { return weighted(t, d.forward(t, in[0])); }, {x},
         [&](Tape& t) { return weighted(t, d.forward(t, t.constant(x))); }, ps);
  }
  {
    DropoutLayer d(0.4);
    both("dropout (fixed mask)",
         [&](Tape& t, std::span<const Var> in) {
           Rng r(11);
           return weighted(t, d.forward(t, in[0], {Mode::kTrain, &r}));
         },
         {random_uniform({3, 4}, -1, 1, rng)}, {}, {});
  }
  for (Mode mode : {Mode::kTrain, Mode::kEval}) {
    BatchNormLayer bn("bn", 3);
    randomize_norm(bn, rng);
    Tensor x = random_uniform({2, 3, 3, 3}, -1, 1, rng);
    std::vector<Parameter*> ps;
    bn.collect(ps);
    both(std::string("batch norm ") + (mode == Mode::kTrain ? "train" : "eval"),
         [&](Tape& t, std::span<const Var> in) { return weighted(t, bn.forward(t, in[0], mode)); }, {x},
         [&](Tape& t) { return weighted(t, bn.forward(t, t.constant(x), mode)); }, ps);
  }
  {
    ConvLayer conv("c", 3, 2, 3, 2, rng);
    DepthwiseConvLayer dw("dw", 3, 2, 1, rng);
    Tensor x = random_uniform({1, 5, 5, 2}, -1, 1, rng);
    auto net = [&](Tape& t, Var in) { return conv.forward(t, dw.forward(t, in)); };
    both("depthwise + conv", [&](Tape& t, std::span<const Var> in) { return weighted(t, net(t, in[0])); }, {x},
         [&](Tape& t) { return weighted(t, net(t, t.constant(x))); }, {&conv.kernel(), &dw.kernel()});
  }
  for (std::size_t stride : {1u, 2u}) {
    InvertedResidualBlock block("b", 3, 3, 2, stride, rng);
    for (BatchNormLayer* bn : {block.expand_bn(), &block.depthwise_bn(), &block.project_bn()}) randomize_norm(*bn, rng);
    Tensor x = random_uniform({2, 4, 4, 3}, -1, 1, rng);
    std::vector<Parameter*> ps;
    block.collect(ps);
    both("inverted residual stride " + std::to_string(stride),
         [&](Tape& t, std::span<const Var> in) { return weighted(t, block.forward(t, in[0], Mode::kEval)); }, {x},
         [&](Tape& t) { return weighted(t, block.forward(t, t.constant(x), Mode::kEval)); }, ps);
  }
  {
    EmbeddingTable table("emb", 5, 3, rng);
    const std::vector<std::size_t> ids{0, 2, 2, 4, 1, 0};
    both("embedding + pooling", {}, {},
         [&](Tape& t) {
           auto e = table.embed_and_pool(t, ids, 2, 3);
           return ops::add(weighted(t, e.sequence), weighted(t, e.pooled));
         },
         {&table.table()});
  }
  {
    MultiHeadAttention mha("att", 4, 2, 3, rng);
    Tensor q = random_uniform({2, 3, 4}, -1, 1, rng), kv = random_uniform({2, 2, 4}, -1, 1, rng);
    std::vector<Parameter*> ps;
    mha.collect(ps);
    both("attention", [&](Tape& t, std::span<const Var> in) { return weighted(t, mha.forward(t, in[0], in[1]).output); },
         {q, kv}, [&](Tape& t) { return weighted(t, mha.forward(t, t.constant(q), t.constant(kv)).output); }, ps);
  }

  // Whole models at 16 x 16 in eval mode, after train-mode passes have moved
  // the running statistics off their initial values.
  ArchConfig cfg = ArchConfig::micro();
  cfg.image_size = 16;
  Rng data(5);
  Tensor img = random_uniform({2, 16, 16, 3}, 0, 1, data);
  std::vector<std::size_t> ids(2 * cfg.max_tokens);
  for (auto& id : ids) id = data.below(cfg.vocab_size);
  for (ModelKind kind : {ModelKind::kUnimodal, ModelKind::kMultimodal}) {
    CalorieModel m = CalorieModel::build(kind, cfg, 21);
    const bool text = kind == ModelKind::kMultimodal;
    const ModelInput in{&img, text ? std::span<const std::size_t>(ids) : std::span<const std::size_t>{}, text};
    for (int pass = 0; pass < 400; ++pass) {
      Tape t;
      Rng dropout(pass);
      m.forward(t, in, {Mode::kTrain, &dropout});
    }
    auto params = m.parameters();
    const auto r = gradcheck_parameters([&](Tape& t) { return ops::mean(m.forward(t, in, {Mode::kEval, nullptr})); },
                                        params, 1e-4);
    out.push_back(gradcheck_result(to_string(kind) + " micro model end to end", r, opt.model_tolerance));
  }
  return out;
}

std::vector<CheckResult> stats_suite(const VerifyOptions& opt) {
  const auto path = opt.fixtures.value_or(default_fixtures_path());
  const auto doc = nlohmann::json::parse(read_text_file(path));
  std::vector<CheckResult> out;
  const double tol = 1e-9;
  auto close = [&](double got, double want) { return std::abs(got - want) <= tol * std::max(1.0, std::abs(want)); };

  std::size_t index = 0;
  for (const auto& c : doc.at("cases")) {
    PredictionSet a, b;
    a.y_true = b.y_true = c.at("y_true").get<std::vector<double>>();
    a.y_pred = c.at("y_pred_a").get<std::vector<double>>();
    b.y_pred = c.at("y_pred_b").get<std::vector<double>>();
    for (std::size_t i = 0; i < a.y_true.size(); ++i) a.dish_ids.push_back(std::to_string(i));
    b.dish_ids = a.dish_ids;
    const EvalReport ra = report(a), rb = report(b);
    const TTestResult t = paired_t_test(a.abs_errors(), b.abs_errors(), 0.1);
    double worst = 0.0;
    bool pass = true;
    auto check = [&](double got, double want) {
      worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
      pass = pass && close(got, want);
    };
    check(ra.mae, c.at("a").at("mae"));
    check(ra.abs_err_std, c.at("a").at("abs_err_std"));
    check(ra.r2, c.at("a").at("r2"));
    check(rb.mae, c.at("b").at("mae"));
    check(rb.abs_err_std, c.at("b").at("abs_err_std"));
    check(rb.r2, c.at("b").at("r2"));
    check(t.t_stat, c.at("t_stat"));
    check(t.p_value, c.at("p_value"));
    pass = pass && t.df == c.at("df").get<std::size_t>();
    out.push_back({"fixture case " + std::to_string(index++) + " (n " + std::to_string(a.y_true.size()) + ")", pass,
                   "worst scaled difference " + sci(worst)});
  }
  for (const auto& c : doc.at("tails")) {
    const double t = c.at("t"), df = c.at("df"), want = c.at("upper_tail");
    const double got = student_t_upper_tail(t, df);
    out.push_back({"upper tail t " + sci(t) + " df " + sci(df), std::abs(got - want) <= 1e-10,
                   "got " + format_double(got) + ", reference " + format_double(want)});
  }
  const double tail = student_t_upper_tail(0.6339, 652);
  out.push_back({"upper tail at t 0.6339, df 652 within [0.2603, 0.2643]", tail >= 0.2603 && tail <= 0.2643,
                 "p " + format_double(tail)});
  return out;
}

std::vector<CheckResult> pipeline_suite() {
  std::vector<CheckResult> out;
  SynthOptions so;
  so.n = 33;
  so.seed = 4;
  so.image_size = 24;
  const SynthDataset a = synth_generate(so), b = synth_generate(so);
  out.push_back({"synthesis is deterministic", a.records == b.records && a.images == b.images, ""});

  ImageCache cache(16);
  const auto records = prime_cache(a, "memory", cache);
  const SplitDataset s = split(records, 0.8, 9);
  std::set<std::string> train_ids, test_ids;
  for (const auto& r : s.train) train_ids.insert(r.dish_id);
  for (const auto& r : s.test) test_ids.insert(r.dish_id);
  bool disjoint = true;
  for (const auto& id : test_ids) disjoint = disjoint && !train_ids.count(id);
  out.push_back({"split is a partition with floor(0.8 N) training records",
                 disjoint && train_ids.size() + test_ids.size() == records.size() && s.train.size() == 26,
                 std::to_string(s.train.size()) + " train / " + std::to_string(s.test.size()) + " test"});
  const SplitDataset s2 = split(records, 0.8, 9);
  out.push_back({"split is deterministic", s2.train == s.train && s2.test == s.test, ""});

  BatchOptions opts;
  opts.shuffle_seed = 3;
  opts.augment = AugmentPolicy{};
  opts.augment_seed = 17;
  const Vectorizer vec = fit_vocab(std::vector<std::string>{"lean rice", "loaded soup"}, 16, 4);
  const auto first = make_batches(records, &vec, cache, opts);
  const auto second = make_batches(records, &vec, cache, opts);
  bool same = first.size() == second.size();
  for (std::size_t i = 0; same && i < first.size(); ++i) {
    same = first[i].images == second[i].images && first[i].token_ids == second[i].token_ids &&
           first[i].targets == second[i].targets && first[i].dish_ids == second[i].dish_ids;
  }
  out.push_back({"batches are bitwise reproducible", same, ""});
  std::string sizes;
  for (const auto& batch : first) sizes += (sizes.empty() ? "" : ",") + std::to_string(batch.size());
  out.push_back({"33 records in batches of 16 give 16,16,1", sizes == "16,16,1", sizes});

  bool bounded = true;
  Rng rng(1);
  const AugmentDraw extremes[] = {{true, 1.1, 1.1}, {false, 0.9, 0.9}, {true, 1.1, 0.9}, {false, 0.9, 1.1}};
  for (const auto& r : records) {
    for (const auto& d : extremes) {
      const Tensor y = apply_augmentation(cache.get(r), d);
      for (double v : y.data()) bounded = bounded && v >= 0.0 && v <= 1.0;
    }
  }
  out.push_back({"augmentation stays in [0, 1] at extreme draws", bounded, ""});
  const Tensor& img = cache.get(records[0]);
  out.push_back({"double flip is the identity", flip_horizontal(flip_horizontal(img)) == img, ""});
  return out;
}

}  // namespace

std::vector<CheckResult> run_verify_suite(const std::string& suite, const VerifyOptions& options) {
  if (suite == "gradcheck") return gradcheck_suite(options);
  if (suite == "stats") return stats_suite(options);
  if (suite == "pipeline") return pipeline_suite();
  throw ArgumentError("unknown verify suite '" + suite + "' (expected gradcheck, stats or pipeline)");
}

}  // namespace kcalnet
