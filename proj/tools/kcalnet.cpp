#include <iostream>

#include "CLI11.hpp"
#include "kcalnet/app.hpp"
#include "kcalnet/errors.hpp"
#include "kcalnet/format.hpp"

using namespace kcalnet;

int main(int argc, char** argv) {
  CLI::App app{"Image-only vs image+text calorie regression: synthesis, training, evaluation and comparison"};
  app.require_subcommand(1);
  std::vector<std::string> command_line(argv, argv + argc);

  SynthArgs synth;
  std::string synth_out;
  auto* s = app.add_subcommand("synth", "generate a synthetic dataset in the metadata.csv + images/ layout");
  s->add_option("--n", synth.n, "number of dishes (>= 10)")->capture_default_str();
  s->add_option("--seed", synth.seed)->capture_default_str();
  s->add_option("--text-signal", synth.text_signal, "share of calories carried by the name token")->capture_default_str();
  s->add_option("--image-size", synth.image_size)->capture_default_str();
  s->add_option("--out", synth_out, "output directory (default $KCALNET_OUTPUT_ROOT/synth)");
  s->add_flag("--force", synth.force, "overwrite a non-empty output directory");

  TrainArgs train;
  train.command_line = command_line;
  std::string model, train_config, train_out, resume;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size, image_size, stop_after;
  std::optional<double> lr;
  auto* t = app.add_subcommand("train", "train one model on the training split");
  t->add_option("--data", train.data, "dataset directory with metadata.csv")->required();
  t->add_option("--model", model)->required()->check(CLI::IsMember({"unimodal", "multimodal"}));
  t->add_option("--config", train_config, "key = value config file");
  t->add_option("--out", train_out, "output directory (default $KCALNET_OUTPUT_ROOT/train-<model>)");
  t->add_option("--seed", seed);
  t->add_option("--epochs", epochs);
  t->add_option("--batch-size", batch_size);
  t->add_option("--lr", lr);
  t->add_option("--image-size", image_size);
  t->add_option("--set", sets, "config override key=value (repeatable)");
  t->add_option("--resume", resume, "continue from a checkpoint");
  t->add_option("--stop-after", stop_after, "stop after this epoch");

  EvalArgs eval;
  eval.command_line = command_line;
  std::string eval_out;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on its test split");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--data", eval.data)->required();
  e->add_option("--out", eval_out, "output directory (default $KCALNET_OUTPUT_ROOT/eval-<model>)");
  e->add_option("--split", eval.split, "test, train or all")->capture_default_str();

  CompareArgs cmp;
  std::string cmp_out;
  auto* c = app.add_subcommand("compare", "paired one-tailed t-test on two evaluations (A minus B errors)");
  c->add_option("--eval-a", cmp.eval_a, "eval directory or predictions.csv")->required();
  c->add_option("--eval-b", cmp.eval_b, "eval directory or predictions.csv")->required();
  c->add_option("--alpha", cmp.alpha)->capture_default_str();
  c->add_option("--out", cmp_out, "output directory (default $KCALNET_OUTPUT_ROOT/compare)");
  c->add_option("--name-a", cmp.name_a)->capture_default_str();
  c->add_option("--name-b", cmp.name_b)->capture_default_str();

  std::string suite, fixtures;
  auto* v = app.add_subcommand("verify", "run an invariant suite");
  v->add_option("--suite", suite)->required()->check(CLI::IsMember({"gradcheck", "stats", "pipeline"}));
  v->add_option("--fixtures", fixtures, "stats fixture file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (s->parsed()) {
      if (!synth_out.empty()) synth.out = synth_out;
      cmd_synth(synth, std::cout);
    } else if (t->parsed()) {
      train.model = parse_model_kind(model);
      if (!train_config.empty()) train.config = train_config;
      if (!train_out.empty()) train.out = train_out;
      if (!resume.empty()) train.resume = resume;
      train.stop_after = stop_after;
      for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        train.overrides[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      if (seed) train.overrides["seed"] = std::to_string(*seed);
      if (epochs) train.overrides["epochs"] = std::to_string(*epochs);
      if (batch_size) train.overrides["batch_size"] = std::to_string(*batch_size);
      if (image_size) train.overrides["image_size"] = std::to_string(*image_size);
      if (lr) train.overrides["learning_rate"] = format_double(*lr);
      cmd_train(train, std::cout);
    } else if (e->parsed()) {
      if (!eval_out.empty()) eval.out = eval_out;
      cmd_eval(eval, std::cout);
    } else if (c->parsed()) {
      if (!cmp_out.empty()) cmp.out = cmp_out;
      cmd_compare(cmp, std::cout);
    } else if (v->parsed()) {
      std::optional<std::filesystem::path> f;
      if (!fixtures.empty()) f = fixtures;
      return cmd_verify(suite, f, std::cout) ? 0 : 1;
    }
  } catch (const Error& err) {
    std::cerr << "kcalnet: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "kcalnet: unexpected failure: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
