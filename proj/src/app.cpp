#include "kcalnet/app.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <set>
#include <unordered_map>

#include "json.hpp"
#include "kcalnet/checkpoint.hpp"
#include "kcalnet/config.hpp"
#include "kcalnet/data.hpp"
#include "kcalnet/errors.hpp"
#include "kcalnet/evaluate.hpp"
#include "kcalnet/format.hpp"
#include "kcalnet/synth.hpp"
#include "kcalnet/training.hpp"
#include "kcalnet/verify.hpp"

namespace kcalnet {

namespace fs = std::filesystem;

fs::path output_root() {
  const char* env = std::getenv("KCALNET_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string dataset_fingerprint(const fs::path& data_dir, std::uint64_t split_seed) {
  const std::string metadata = read_text_file(data_dir / "metadata.csv");
  return hex64(fnv1a64("split_seed=" + std::to_string(split_seed), fnv1a64(metadata)));
}

namespace {

std::string utc_now() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : " ") + p;
  return out;
}

void write_manifest(const fs::path& dir, const nlohmann::ordered_json& manifest) {
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

struct LoadedData {
  std::vector<DishRecord> records;
  LoadReport report;
  SplitDataset split;
  std::string fingerprint;
};

LoadedData load_dataset(const fs::path& data_dir, const TrainConfig& cfg, ModelKind kind) {
  LoadedData d;
  MetadataOptions mo;
  mo.min_kcal = cfg.min_kcal;
  mo.max_kcal = cfg.max_kcal;
  mo.require_names = kind == ModelKind::kMultimodal;
  d.records = load_metadata(data_dir / "metadata.csv", mo, &d.report);
  d.split = split(d.records, cfg.split_ratio, cfg.split_seed);
  d.fingerprint = dataset_fingerprint(data_dir, cfg.split_seed);
  return d;
}

nlohmann::ordered_json dataset_json(const fs::path& data, const LoadedData& d) {
  return {{"path", data.string()},
          {"fingerprint", d.fingerprint},
          {"split_seed", d.split.seed},
          {"records", d.records.size()},
          {"train", d.split.train.size()},
          {"test", d.split.test.size()},
          {"load_report", d.report.summary()}};
}

PredictionSet read_predictions(const fs::path& p) {
  const fs::path file = fs::is_directory(p) ? p / "predictions.csv" : p;
  return parse_predictions_csv(read_text_file(file));
}

}  // namespace

fs::path cmd_synth(const SynthArgs& args, std::ostream& log) {
  const fs::path out = args.out.value_or(output_root() / "synth");
  if (non_empty_dir(out) && !args.force) throw IoError(out.string() + " exists and is not empty (use --force)");
  SynthOptions so;
  so.n = args.n;
  so.seed = args.seed;
  so.text_signal = args.text_signal;
  so.image_size = args.image_size;
  const SynthDataset data = synth_generate(so);
  if (args.force && fs::exists(out)) {
    fs::remove(out / "metadata.csv");
    fs::remove(out / "generator.txt");
    fs::remove_all(out / "images");
  }
  write_synth(data, out);
  log << "wrote " << data.records.size() << " synthetic dishes to " << out.string() << "\n";
  return out;
}

fs::path cmd_train(const TrainArgs& args, std::ostream& log) {
  const std::string started = utc_now();
  const fs::path out = args.out.value_or(output_root() / ("train-" + to_string(args.model)));

  TrainConfig cfg;
  std::optional<Checkpoint> resumed;
  if (args.resume) {
    resumed.emplace(load_checkpoint(*args.resume));
    if (resumed->model.kind() != args.model) throw ArgumentError("--model differs from the checkpoint's model kind");
    cfg = resumed->config;
    // Only the epoch budget may change on resume.
    for (const auto& [k, v] : args.overrides) {
      if (k != "epochs") throw ConfigError("only 'epochs' can be overridden when resuming");
      apply_key_values(cfg, {{k, v}});
    }
    cfg.validate();
  } else {
    cfg = resolve_config(args.config ? &*args.config : nullptr, args.overrides);
  }
  cfg.arch.validate(args.model);

  const LoadedData data = load_dataset(args.data, cfg, args.model);
  log << "dataset: " << data.report.summary() << "\n";
  log << "split: " << data.split.train.size() << " train / " << data.split.test.size() << " test (seed "
      << cfg.split_seed << ")\n";
  if (resumed && resumed->dataset_fingerprint != data.fingerprint)
    throw DatasetError("resume data differs from the checkpoint's dataset");

  std::optional<Vectorizer> vectorizer;
  if (args.model == ModelKind::kMultimodal)
    vectorizer = resumed ? resumed->vectorizer : fit_vectorizer(data.split.train, cfg.arch);
  CalorieModel model = resumed ? std::move(resumed->model) : CalorieModel::build(args.model, cfg.arch, cfg.seed);
  TrainState state = resumed ? resumed->state : TrainState{};
  log << to_string(args.model) << " model, " << model.param_count() << " parameters\n";

  ensure_directory(out);
  const fs::path checkpoint = out / "checkpoint.bin";
  const Vectorizer* vec = vectorizer ? &*vectorizer : nullptr;
  ImageCache cache(cfg.arch.image_size);
  TrainLog train_log;
  if (resumed && fs::exists(out / "train_log.csv")) {
    const auto rows = parse_csv(read_text_file(out / "train_log.csv"));
    for (std::size_t i = 1; i < rows.size() && i <= state.epochs_done; ++i)
      train_log.epochs.push_back({std::stoul(rows[i][0]), std::stod(rows[i][1]), 0.0});
  }
  train_log.seed = cfg.seed;
  nlohmann::ordered_json epoch_seconds = nlohmann::ordered_json::object();
  auto on_epoch = [&](const EpochRecord& e, const TrainState& s) {
    epoch_seconds[std::to_string(e.epoch)] = e.seconds;
    log << "epoch " << e.epoch << "/" << cfg.epochs << "  loss " << format_double(e.loss) << "  ("
        << format_double(e.seconds) << " s)\n";
    train_log.epochs.push_back(e);
    save_checkpoint(checkpoint, model, cfg, vec, s, data.fingerprint);
    write_text_file(out / "train_log.csv", train_log.to_csv());
  };
  train(model, data.split.train, vec, cache, cfg, state, args.stop_after.value_or(SIZE_MAX), on_epoch);
  save_checkpoint(checkpoint, model, cfg, vec, state, data.fingerprint);
  write_text_file(out / "train_log.csv", train_log.to_csv());
  write_text_file(out / "config.txt", to_config_text(cfg));

  nlohmann::ordered_json manifest{
      {"command", "train"},
      {"command_line", join(args.command_line)},
      {"model", to_string(args.model)},
      {"parameters", model.param_count()},
      {"config", to_key_values(cfg)},
      {"dataset", dataset_json(args.data, data)},
      {"epochs_done", state.epochs_done},
      {"epoch_seconds", epoch_seconds},
      {"artifacts", {"checkpoint.bin", "train_log.csv", "config.txt"}},
      {"started_at", started},
      {"finished_at", utc_now()}};
  write_manifest(out, manifest);
  log << "wrote " << checkpoint.string() << "\n";
  return out;
}

fs::path cmd_eval(const EvalArgs& args, std::ostream& log) {
  const std::string started = utc_now();
  Checkpoint ck = load_checkpoint(args.checkpoint);
  const fs::path out = args.out.value_or(output_root() / ("eval-" + to_string(ck.model.kind())));
  const LoadedData data = load_dataset(args.data, ck.config, ck.model.kind());
  if (data.fingerprint != ck.dataset_fingerprint) {
    log << "warning: dataset fingerprint " << data.fingerprint << " differs from the training run's "
        << ck.dataset_fingerprint << "\n";
  }
  std::vector<DishRecord> records;
  if (args.split == "test") {
    records = data.split.test;
  } else if (args.split == "train") {
    records = data.split.train;
  } else if (args.split == "all") {
    records = data.records;
  } else {
    throw ArgumentError("--split must be test, train or all");
  }
  ImageCache cache(ck.config.arch.image_size);
  const Vectorizer* vec = ck.vectorizer ? &*ck.vectorizer : nullptr;
  const PredictionSet ps = evaluate(ck.model, records, vec, cache);
  const EvalReport r = report(ps);

  ensure_directory(out);
  write_text_file(out / "report.kv", report_key_values(r));
  write_text_file(out / "predictions.csv", predictions_csv(ps));
  write_text_file(out / "scatter.svg", scatter_svg(ps, to_string(ck.model.kind()) + ": predicted vs true"));
  nlohmann::ordered_json manifest{{"command", "eval"},
                                  {"command_line", join(args.command_line)},
                                  {"checkpoint", args.checkpoint.string()},
                                  {"model", to_string(ck.model.kind())},
                                  {"config", to_key_values(ck.config)},
                                  {"dataset", dataset_json(args.data, data)},
                                  {"checkpoint_fingerprint", ck.dataset_fingerprint},
                                  {"split", args.split},
                                  {"n", r.n},
                                  {"artifacts", {"report.kv", "predictions.csv", "scatter.svg"}},
                                  {"started_at", started},
                                  {"finished_at", utc_now()}};
  write_manifest(out, manifest);
  log << "n " << r.n << "  MAE " << format_double(r.mae) << "  std " << format_double(r.abs_err_std) << "  R2 "
      << format_double(r.r2) << "\n";
  return out;
}

void align_pairs(const PredictionSet& a, PredictionSet& b) {
  std::unordered_map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!where.emplace(b.dish_ids[i], i).second) throw PairingError("dish id " + b.dish_ids[i] + " repeats in B");
  }
  const std::set<std::string> ids_a(a.dish_ids.begin(), a.dish_ids.end());
  if (ids_a.size() != a.size()) throw PairingError("dish ids repeat in A");
  std::vector<std::string> offenders;
  for (const auto& id : a.dish_ids)
    if (!where.count(id)) offenders.push_back(id + " (only in A)");
  for (const auto& id : b.dish_ids)
    if (!ids_a.count(id)) offenders.push_back(id + " (only in B)");
  if (!offenders.empty()) {
    std::string msg = "evaluations cover different dishes (" + std::to_string(offenders.size()) + " unpaired): ";
    for (std::size_t i = 0; i < std::min<std::size_t>(5, offenders.size()); ++i) msg += (i ? ", " : "") + offenders[i];
    throw PairingError(msg);
  }
  PredictionSet aligned;
  for (const auto& id : a.dish_ids) {
    const std::size_t j = where.at(id);
    aligned.dish_ids.push_back(id);
    aligned.y_true.push_back(b.y_true[j]);
    aligned.y_pred.push_back(b.y_pred[j]);
  }
  b = std::move(aligned);
}

Comparison cmd_compare(const CompareArgs& args, std::ostream& log) {
  const PredictionSet a = read_predictions(args.eval_a);
  PredictionSet b = read_predictions(args.eval_b);
  align_pairs(a, b);
  const TTestResult t = paired_t_test(a.abs_errors(), b.abs_errors(), args.alpha);
  const Comparison c = compare(report(a), report(b), t);
  const fs::path out = args.out.value_or(output_root() / "compare");
  write_text_file(out / "comparison.txt", c.to_text(args.name_a, args.name_b));
  write_text_file(out / "comparison.kv", c.to_key_values());
  log << c.to_text(args.name_a, args.name_b);
  return c;
}

bool cmd_verify(const std::string& suite, const std::optional<fs::path>& fixtures, std::ostream& log) {
  VerifyOptions opt;
  opt.fixtures = fixtures;
  bool ok = true;
  for (const auto& r : run_verify_suite(suite, opt)) {
    log << (r.pass ? "PASS " : "FAIL ") << r.name;
    if (!r.detail.empty()) log << "  [" << r.detail << "]";
    log << "\n";
    ok = ok && r.pass;
  }
  log << suite << ": " << (ok ? "all checks passed" : "FAILED") << "\n";
  return ok;
}

}  // namespace kcalnet
