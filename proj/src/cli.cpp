// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include "grade/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "grade/capture.hpp"
#include "grade/error.hpp"
#include "grade/eval.hpp"
#include "grade/features.hpp"
#include "grade/gradcheck.hpp"
#include "grade/probe.hpp"
#include "grade/toy_model.hpp"

namespace grade {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

class ConfigFile {
 public:
  ConfigFile(const std::string& path, const std::set<std::string>& allowed) {
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) fail(ErrorKind::kIo, "cannot open config " + path);
    try {
      doc_ = json::parse(in);
    } catch (const json::exception& e) {
      fail(ErrorKind::kInvalidInput, "config " + path + ": " + e.what());
    }
    if (!doc_.is_object()) fail(ErrorKind::kInvalidInput, "config must be a JSON object");
    for (const auto& item : doc_.items()) {
      if (!allowed.contains(item.key())) {
        fail(ErrorKind::kInvalidInput, "unknown config key: " + item.key());
      }
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) const {
    if (!doc_.contains(key)) return;
    try {
      out = doc_.at(key).get<T>();
    } catch (const json::exception& e) {
      fail(ErrorKind::kInvalidInput, "config key " + key + ": " + e.what());
    }
  }

 private:
  json doc_ = json::object();
};

struct Flags {
  std::string config;
  std::uint64_t seed = 42;
  int jobs = 1;
  bool force = false;
  std::string objective;
  std::string exponent;
  int layer = -1;
  std::string threshold_baseline;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* jobs_opt = nullptr;
  CLI::Option* objective_opt = nullptr;
  CLI::Option* exponent_opt = nullptr;
  CLI::Option* layer_opt = nullptr;
};

std::shared_ptr<spdlog::logger> make_logger() {
  auto logger = std::make_shared<spdlog::logger>("grade", std::make_shared<spdlog::sinks::stderr_sink_st>());
  logger->set_pattern("[%l] %v");
  const char* env = std::getenv("GRADE_LOG");
  logger->set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
  return logger;
}

bool given(const CLI::Option* opt) { return opt != nullptr && opt->count() > 0; }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorKind::kIo, "failed writing " + path.string());
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

const std::set<std::string> kTrainKeys = {
    "epochs",        "batch_size", "learning_rate",      "weight_decay",      "lr_factor",
    "lr_patience",   "seed",       "decision_threshold", "plateau_threshold", "optimizer",
    "momentum",      "early_stop_patience", "test_fraction"};

struct TrainSetup {
  TrainConfig cfg;
  double test_fraction = 0.2;
};

TrainSetup train_setup(const ConfigFile& c, const Flags& f) {
  TrainSetup s;
  c.get("epochs", s.cfg.epochs);
  c.get("batch_size", s.cfg.batch_size);
  c.get("learning_rate", s.cfg.learning_rate);
  c.get("weight_decay", s.cfg.weight_decay);
  c.get("lr_factor", s.cfg.lr_factor);
  c.get("lr_patience", s.cfg.lr_patience);
  c.get("seed", s.cfg.seed);
  c.get("decision_threshold", s.cfg.decision_threshold);
  c.get("plateau_threshold", s.cfg.plateau_threshold);
  c.get("momentum", s.cfg.momentum);
  c.get("early_stop_patience", s.cfg.early_stop_patience);
  c.get("test_fraction", s.test_fraction);
  std::string optimizer = "sgd";
  c.get("optimizer", optimizer);
  if (optimizer == "sgd") {
    s.cfg.optimizer = OptimizerKind::kSgd;
  } else if (optimizer == "adamw") {
    s.cfg.optimizer = OptimizerKind::kAdamW;
  } else {
    fail(ErrorKind::kInvalidInput, "unknown optimizer: " + optimizer);
  }
  if (given(f.seed_opt)) s.cfg.seed = f.seed;
  s.cfg.validate();
  return s;
}

json train_setup_json(const TrainSetup& s) {
  return {{"epochs", s.cfg.epochs},
          {"batch_size", s.cfg.batch_size},
          {"learning_rate", s.cfg.learning_rate},
          {"weight_decay", s.cfg.weight_decay},
          {"lr_factor", s.cfg.lr_factor},
          {"lr_patience", s.cfg.lr_patience},
          {"seed", s.cfg.seed},
          {"decision_threshold", s.cfg.decision_threshold},
          {"plateau_threshold", s.cfg.plateau_threshold},
          {"optimizer", s.cfg.optimizer == OptimizerKind::kSgd ? "sgd" : "adamw"},
          {"momentum", s.cfg.momentum},
          {"early_stop_patience", s.cfg.early_stop_patience},
          {"test_fraction", s.test_fraction}};
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  int num_samples = 0;
  bool paraphrase = false;
  bool segment_steps = false;
  std::string dataset_name;
  CLI::Option* num_samples_opt = nullptr;
  CLI::Option* dataset_opt = nullptr;
};

int cmd_synth(const SynthArgs& a, const Flags& f, spdlog::logger& log) {
  const ConfigFile c(f.config, {"L", "d_model", "d_ff", "V", "seed", "num_samples", "fit_steps",
                                "learning_rate", "query_len", "response_len", "objective",
                                "segment_steps", "paraphrase", "dataset_name", "model_name"});
  SynthConfig sc;
  c.get("L", sc.model.num_layers);
  c.get("d_model", sc.model.d_model);
  c.get("d_ff", sc.model.d_ff);
  c.get("V", sc.model.vocab_size);
  c.get("seed", sc.seed);
  c.get("num_samples", sc.num_samples);
  c.get("fit_steps", sc.fit_steps);
  c.get("learning_rate", sc.learning_rate);
  c.get("query_len", sc.query_len);
  c.get("response_len", sc.response_len);
  c.get("segment_steps", sc.segment_steps);
  c.get("paraphrase", sc.paraphrase);
  c.get("dataset_name", sc.dataset_name);
  std::string objective = "pos";
  c.get("objective", objective);
  std::string model_name;
  c.get("model_name", model_name);

  if (given(f.seed_opt)) sc.seed = f.seed;
  if (given(a.num_samples_opt)) sc.num_samples = a.num_samples;
  if (given(f.objective_opt)) objective = f.objective;
  if (given(a.dataset_opt)) sc.dataset_name = a.dataset_name;
  if (a.paraphrase) sc.paraphrase = true;
  if (a.segment_steps) sc.segment_steps = true;
  sc.objective = parse_objective(objective);
  sc.model.seed = sc.seed;
  if (model_name.empty()) {
    model_name = "toy-mlp-L" + std::to_string(sc.model.num_layers) + "-d" +
                 std::to_string(sc.model.d_model) + "-f" + std::to_string(sc.model.d_ff) + "-v" +
                 std::to_string(sc.model.vocab_size);
  }

  log.info("resolved config: {}",
           json({{"L", sc.model.num_layers}, {"d_model", sc.model.d_model},
                 {"d_ff", sc.model.d_ff}, {"V", sc.model.vocab_size}, {"seed", sc.seed},
                 {"num_samples", sc.num_samples}, {"fit_steps", sc.fit_steps},
                 {"learning_rate", sc.learning_rate}, {"query_len", sc.query_len},
                 {"response_len", sc.response_len}, {"objective", objective},
                 {"segment_steps", sc.segment_steps}, {"paraphrase", sc.paraphrase},
                 {"dataset_name", sc.dataset_name}, {"model_name", model_name}})
               .dump());

  const fs::path out(a.out);
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!f.force) fail(ErrorKind::kInvalidInput, "output directory is not empty (use --force)");
    for (const auto& e : fs::directory_iterator(out)) {
      const auto ext = e.path().extension();
      if (e.is_regular_file() && (ext == ".grdc" || ext == ".json")) fs::remove(e.path());
    }
  }
  const SynthDataset ds = synth_dataset(sc);
  const DatasetManifest m = write_dataset(out, ds.records, model_name);
  scan_manifest(out);
  std::cout << "wrote " << m.records.size() << " records to " << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct FeaturesArgs {
  std::string captures;
  std::string out;
  std::string skip_log;
};

int cmd_features(const FeaturesArgs& a, const Flags& f, spdlog::logger& log) {
  const ConfigFile c(f.config, {"objective", "exponent", "jobs", "pinv_rel_tol"});
  FeatureOptions opts;
  std::string exponent = "matched";
  std::string objective;
  int jobs = 1;
  c.get("exponent", exponent);
  c.get("objective", objective);
  c.get("jobs", jobs);
  c.get("pinv_rel_tol", opts.pinv_rel_tol);
  if (given(f.exponent_opt)) exponent = f.exponent;
  if (given(f.objective_opt)) objective = f.objective;
  if (given(f.jobs_opt)) jobs = f.jobs;
  opts.pairing = parse_exponent_pairing(exponent);
  log.info("resolved config: {}", json({{"captures", a.captures}, {"exponent", exponent},
                                        {"objective", objective.empty() ? json() : json(objective)},
                                        {"jobs", jobs}, {"pinv_rel_tol", opts.pinv_rel_tol}})
                                      .dump());

  const std::vector<CaptureRecord> records = load_dataset(a.captures);
  if (!objective.empty()) {
    const Objective want = parse_objective(objective);
    for (const auto& r : records) {
      if (r.objective != want) {
        fail(ErrorKind::kInvalidInput,
             "record " + r.sample_id + " has objective " + std::string(to_string(r.objective)));
      }
    }
  }
  const FeatureBatch batch = compute_features(records, opts, jobs);
  std::ostringstream skipped;
  for (const auto& s : batch.skipped) {
    log.warn("skipped {}: {}", s.sample_id, s.reason);
    skipped << s.sample_id << '\t' << s.reason << '\n';
  }
  if (!a.skip_log.empty()) write_text(a.skip_log, skipped.str());
  if (batch.features.empty() && !batch.skipped.empty()) {
    fail(ErrorKind::kSampleDegenerate, "every record is degenerate");
  }
  write_features_file(a.out, batch.features);
  std::cout << "wrote " << batch.features.size() << " feature rows to " << a.out << " ("
            << batch.skipped.size() << " skipped)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string features;
  std::string out;
  std::string history;
  bool all = false;
};

int cmd_train(const TrainArgs& a, const Flags& f, spdlog::logger& log) {
  const TrainSetup s = train_setup(ConfigFile(f.config, kTrainKeys), f);
  log.info("resolved config: {}", train_setup_json(s).dump());
  const auto fs_all = read_features_file(a.features);
  const auto train = a.all ? labeled_only(fs_all) : stratified_split(fs_all, s.test_fraction, s.cfg.seed).train;
  const TrainResult r = train_probe(train, s.cfg);
  save_probe_file(a.out, r.params, s.cfg);
  if (!a.history.empty()) {
    write_text(a.history, dump({{"loss", r.loss_history}, {"lr", r.lr_history}}));
  }
  std::cout << "trained on " << train.size() << " samples, final loss "
            << r.loss_history.back() << ", checkpoint " << a.out << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string features;
  std::string checkpoint;
  std::string out;
  std::string csv;
  bool all = false;
};

int cmd_eval(const EvalArgs& a, const Flags& f, spdlog::logger& log) {
  const ConfigFile c(f.config, {"seed", "test_fraction", "decision_threshold"});
  std::uint64_t seed = 42;
  double test_fraction = 0.2;
  double threshold = 0.5;
  c.get("seed", seed);
  c.get("test_fraction", test_fraction);
  c.get("decision_threshold", threshold);
  if (given(f.seed_opt)) seed = f.seed;
  log.info("resolved config: {}",
           json({{"seed", seed}, {"test_fraction", test_fraction}, {"decision_threshold", threshold},
                 {"threshold_baseline", f.threshold_baseline}, {"all", a.all}})
               .dump());

  const auto fs_all = read_features_file(a.features);
  EvalReport report;
  if (!f.threshold_baseline.empty()) {
    if (a.all) fail(ErrorKind::kInvalidInput, "threshold baselines fit on the train split; drop --all");
    report = threshold_baseline(stratified_split(fs_all, test_fraction, seed),
                                parse_layer_select(f.threshold_baseline));
  } else {
    if (a.checkpoint.empty()) fail(ErrorKind::kInvalidInput, "--checkpoint is required");
    const ProbeParameters p = load_probe_file(a.checkpoint);
    const auto test = a.all ? labeled_only(fs_all) : stratified_split(fs_all, test_fraction, seed).test;
    report = evaluate_probe(p, test, threshold);
  }
  if (a.out.empty()) {
    std::cout << dump(report_json(report));
  } else {
    write_text(a.out, dump(report_json(report)));
    std::cout << report.method << ": accuracy " << report.accuracy << ", auroc " << report.auroc
              << " (" << report.n_pos << " answerable, " << report.n_neg << " unanswerable)\n";
  }
  if (!a.csv.empty()) {
    std::ostringstream os;
    write_report_csv(os, report);
    write_text(a.csv, os.str());
  }
  return kExitOk;
}

struct TransferArgs {
  std::vector<std::string> features;
  std::vector<std::string> names;
  std::string out;
};

int cmd_transfer(const TransferArgs& a, const Flags& f, spdlog::logger& log) {
  const TrainSetup s = train_setup(ConfigFile(f.config, kTrainKeys), f);
  log.info("resolved config: {}", train_setup_json(s).dump());
  if (!a.names.empty() && a.names.size() != a.features.size()) {
    fail(ErrorKind::kInvalidInput, "--name must be given once per --features");
  }
  std::vector<NamedFeatures> sets;
  for (std::size_t i = 0; i < a.features.size(); ++i) {
    const std::string name = a.names.empty() ? fs::path(a.features[i]).stem().string() : a.names[i];
    sets.push_back({name, read_features_file(a.features[i])});
  }
  const TransferMatrix m = transfer_matrix(sets, s.cfg, s.test_fraction, f.jobs);
  const fs::path out(a.out);
  write_text(out / "transfer.json", dump(transfer_json(m)));
  for (const char* metric : {"accuracy", "auroc"}) {
    std::ostringstream os;
    write_transfer_csv(os, m, metric);
    write_text(out / (std::string("transfer_") + metric + ".csv"), os.str());
  }
  std::cout << "wrote " << m.names.size() << "x" << m.names.size() << " transfer matrix to "
            << out.string() << "\n";
  return kExitOk;
}

struct RobustnessArgs {
  std::string original;
  std::string paraphrased;
  std::string out;
};

int cmd_robustness(const RobustnessArgs& a, const Flags& f, spdlog::logger& log) {
  const TrainSetup s = train_setup(ConfigFile(f.config, kTrainKeys), f);
  log.info("resolved config: {}", train_setup_json(s).dump());
  const RobustnessResult r = robustness(read_features_file(a.original),
                                        read_features_file(a.paraphrased), s.cfg, s.test_fraction);
  const json doc = {{"original", report_json(r.original)},
                    {"paraphrased", report_json(r.paraphrased)},
                    {"delta_acc",
                     {{"absolute", r.delta.absolute},
                      {"relative", r.delta.relative ? json(*r.delta.relative) : json()},
                      {"original_accuracy", r.delta.original_accuracy},
                      {"paraphrased_accuracy", r.delta.paraphrased_accuracy},
                      {"eligible_pairs", r.delta.eligible_pairs}}}};
  if (a.out.empty()) {
    std::cout << dump(doc);
  } else {
    write_text(a.out, dump(doc));
    std::cout << "delta accuracy " << r.delta.absolute << " over " << r.delta.eligible_pairs
              << " pairs\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct InterpretArgs {
  std::string captures;
  std::string out;
};

int cmd_interpret(const InterpretArgs& a, const Flags& f, spdlog::logger& log) {
  const ConfigFile c(f.config, {"layer", "clamp", "pinv_rel_tol"});
  int layer = -1;
  bool clamp = true;
  FeatureOptions opts;
  c.get("layer", layer);
  c.get("clamp", clamp);
  c.get("pinv_rel_tol", opts.pinv_rel_tol);
  if (given(f.layer_opt)) layer = f.layer;
  log.info("resolved config: {}",
           json({{"layer", layer}, {"clamp", clamp}, {"pinv_rel_tol", opts.pinv_rel_tol}}).dump());

  std::vector<TokenScoreMap> maps;
  for (const auto& r : load_dataset(a.captures)) {
    if (r.objective != Objective::kPos || r.tokens.empty()) {
      log.debug("skipping {}: needs a pos record with tokens", r.sample_id);
      continue;
    }
    maps.push_back(token_scores(r, layer, clamp, opts));
  }
  if (maps.empty()) {
    fail(ErrorKind::kUnsupportedObjective, "interpretation needs pos records with response tokens");
  }
  maps = normalize_corpus(std::move(maps));
  const fs::path out(a.out);
  for (const auto& m : maps) write_text(out / (file_stem_for(m.sample_id) + ".html"), render_heatmap_html(m));
  write_text(out / "token_scores.json", dump(token_scores_json(maps)));
  std::cout << "wrote " << maps.size() << " heatmaps to " << out.string() << "\n";
  return kExitOk;
}

struct GradcheckArgs {
  std::string out;
  bool inject_bug = false;
};

int cmd_gradcheck(const GradcheckArgs& a, const Flags& f, spdlog::logger& log) {
  const ConfigFile c(f.config, {"L", "d_model", "d_ff", "V", "seed", "coords", "sequence_len",
                                "epsilon", "tolerance", "silu_grad_scale"});
  GradCheckConfig g;
  c.get("L", g.model.num_layers);
  c.get("d_model", g.model.d_model);
  c.get("d_ff", g.model.d_ff);
  c.get("V", g.model.vocab_size);
  c.get("seed", g.seed);
  c.get("coords", g.coords_per_family);
  c.get("sequence_len", g.sequence_len);
  c.get("epsilon", g.epsilon);
  c.get("tolerance", g.tolerance);
  c.get("silu_grad_scale", g.silu_grad_scale);
  if (given(f.seed_opt)) g.seed = f.seed;
  if (a.inject_bug) g.silu_grad_scale = 1.05;
  g.model.seed = g.seed;
  log.info("resolved config: {}",
           json({{"L", g.model.num_layers}, {"d_model", g.model.d_model}, {"d_ff", g.model.d_ff},
                 {"V", g.model.vocab_size}, {"seed", g.seed}, {"coords", g.coords_per_family},
                 {"sequence_len", g.sequence_len}, {"epsilon", g.epsilon},
                 {"tolerance", g.tolerance}, {"silu_grad_scale", g.silu_grad_scale}})
               .dump());

  const GradCheckReport r = run_gradcheck(g);
  for (const auto& fam : r.families) {
    std::cout << (fam.passed ? "PASS " : "FAIL ") << fam.loss << ' ' << fam.family
              << " max_rel_err=" << fam.max_rel_err << " coords=" << fam.coordinates << "\n";
  }
  std::cout << (r.identity_holds ? "PASS " : "FAIL ") << "g == delta^T h\n";
  std::cout << (r.max_subspace_residual <= g.subspace_tolerance ? "PASS " : "FAIL ")
            << "row-space residual " << r.max_subspace_residual << "\n";
  if (!a.out.empty()) write_text(a.out, dump(r.to_json()));
  return r.passed ? kExitOk : kExitCheckFailed;
}

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::kZeroSpectrum:
    case ErrorKind::kSampleDegenerate:
    case ErrorKind::kDegenerateLabels:
    case ErrorKind::kUndefinedAuroc:
      return kExitDegenerate;
    case ErrorKind::kCheckFailed:
      return kExitCheckFailed;
    default:
      return kExitValidation;
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  auto log = make_logger();
  CLI::App app{"Gradient-rank knowledge-gap probe"};
  app.require_subcommand(1);
  Flags flags;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "Random seed (default 42)");
    sub->add_option("--jobs", flags.jobs, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--force", flags.force, "Overwrite existing outputs");
  };

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Generate a synthetic capture dataset from the toy model");
  common(s_synth);
  s_synth->add_option("--out", synth.out, "Output capture directory")->required();
  synth.num_samples_opt = s_synth->add_option("--num-samples", synth.num_samples);
  s_synth->add_option("--objective", flags.objective)->check(CLI::IsMember({"pre", "pos"}));
  s_synth->add_flag("--paraphrase", synth.paraphrase, "Reword every query prefix");
  s_synth->add_flag("--segment-steps", synth.segment_steps, "Capture per-step matrices");
  synth.dataset_opt = s_synth->add_option("--dataset-name", synth.dataset_name);

  FeaturesArgs feats;
  auto* s_feat = app.add_subcommand("features", "Compute per-layer rank-ratio features");
  common(s_feat);
  s_feat->add_option("--captures", feats.captures, "Capture directory")->required()->check(CLI::ExistingDirectory);
  s_feat->add_option("--out", feats.out, "Features file (.csv or .jsonl)")->required();
  s_feat->add_option("--skip-log", feats.skip_log, "Where to list degenerate samples");
  s_feat->add_option("--objective", flags.objective)->check(CLI::IsMember({"pre", "pos"}));
  s_feat->add_option("--exponent", flags.exponent)
      ->check(CLI::IsMember({"matched", "linear", "squared"}));

  TrainArgs train;
  auto* s_train = app.add_subcommand("train", "Train the probe");
  common(s_train);
  s_train->add_option("--features", train.features)->required()->check(CLI::ExistingFile);
  s_train->add_option("--out", train.out, "Checkpoint path")->required();
  s_train->add_option("--history", train.history, "Loss history JSON");
  s_train->add_flag("--all", train.all, "Train on every labeled row instead of the train split");

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Evaluate a probe or a threshold baseline");
  common(s_eval);
  s_eval->add_option("--features", ev.features)->required()->check(CLI::ExistingFile);
  s_eval->add_option("--checkpoint", ev.checkpoint)->check(CLI::ExistingFile);
  s_eval->add_option("--out", ev.out, "Report JSON (stdout when absent)");
  s_eval->add_option("--csv", ev.csv, "Per-sample CSV");
  s_eval->add_option("--threshold-baseline", flags.threshold_baseline)
      ->check(CLI::IsMember({"mean", "last", "mid"}));
  s_eval->add_flag("--all", ev.all, "Evaluate every labeled row instead of the test split");

  TransferArgs tr;
  auto* s_tr = app.add_subcommand("transfer", "Cross-dataset transfer matrix");
  common(s_tr);
  s_tr->add_option("--features", tr.features)->required()->check(CLI::ExistingFile);
  s_tr->add_option("--name", tr.names);
  s_tr->add_option("--out", tr.out, "Output directory")->required();

  RobustnessArgs rob;
  auto* s_rob = app.add_subcommand("robustness", "Accuracy change under paraphrased queries");
  common(s_rob);
  s_rob->add_option("--original", rob.original)->required()->check(CLI::ExistingFile);
  s_rob->add_option("--paraphrased", rob.paraphrased)->required()->check(CLI::ExistingFile);
  s_rob->add_option("--out", rob.out);

  InterpretArgs interp;
  auto* s_int = app.add_subcommand("interpret", "Token-level heatmaps from C_g row sums");
  common(s_int);
  s_int->add_option("--captures", interp.captures)->required()->check(CLI::ExistingDirectory);
  s_int->add_option("--out", interp.out, "Output directory")->required();
  s_int->add_option("--layer", flags.layer, "Layer index (-1 for the last)");

  GradcheckArgs gc;
  auto* s_gc = app.add_subcommand("gradcheck", "Finite-difference and subspace checks of the toy model");
  common(s_gc);
  s_gc->add_option("--out", gc.out, "Report JSON");
  s_gc->add_flag("--inject-bug", gc.inject_bug, "Perturb the activation derivative");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }
  CLI::App* chosen = app.get_subcommands().front();
  flags.seed_opt = chosen->get_option_no_throw("--seed");
  flags.jobs_opt = chosen->get_option_no_throw("--jobs");
  flags.objective_opt = chosen->get_option_no_throw("--objective");
  flags.exponent_opt = chosen->get_option_no_throw("--exponent");
  flags.layer_opt = chosen->get_option_no_throw("--layer");

  try {
    if (*s_synth) return cmd_synth(synth, flags, *log);
    if (*s_feat) return cmd_features(feats, flags, *log);
    if (*s_train) return cmd_train(train, flags, *log);
    if (*s_eval) return cmd_eval(ev, flags, *log);
    if (*s_tr) return cmd_transfer(tr, flags, *log);
    if (*s_rob) return cmd_robustness(rob, flags, *log);
    if (*s_int) return cmd_interpret(interp, flags, *log);
    if (*s_gc) return cmd_gradcheck(gc, flags, *log);
  } catch (const Error& e) {
    log->error("{}: {}", to_string(e.kind()), e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    log->error("{}", e.what());
    return kExitValidation;
  }
  return kExitValidation;
}

}  // namespace grade
