#pragma once

// Command-line front end: synth, train, finetune, eval, attend, energy and
// check-splits. Options come from flags, or from an INI file given with
// --config whose [subcommand] sections supply defaults that flags override.
// Exit codes: 0 success, 1 validation or usage error, 2 other failures.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tcv2/tcv2.hpp"

#ifndef TCV2_VERSION
#define TCV2_VERSION "unknown"
#endif

namespace tcv2::cli {

namespace fs = std::filesystem;

struct SynthOptions {
  std::string out;
  std::size_t slides = 600;
  std::size_t instances = 200;
  std::size_t width = 32;
  std::vector<std::string> task_names{"task_a", "task_b", "task_c"};
  int classes = 2;
  double signal_fraction = 0.1;
  double noise_sigma = 1.0;
  double concept_scale = 6.0;
  std::size_t concept_family = 0;
  double labeled_fraction = 1.0;
  std::size_t slides_per_patient = 2;
  std::uint64_t seed = 1;
  std::uint64_t concept_seed = 7;
};

struct ModelOptions {
  std::vector<std::size_t> hidden{64};
  std::size_t embed = 64;
  std::size_t heads = 8;
  std::size_t attention_width = 0;
  std::string activation = "relu";
  double dropout = 0.1;
};

struct BagOptions {
  std::size_t min = 64;
  std::size_t max = 128;
  std::size_t val = 128;
  double jitter = 0.0;
  double drop = 0.0;

  BagSizes sizes() const { return {min, max, val, BagSizes{}.val_seed}; }
  AugmentConfig augment() const { return {jitter > 0.0 || drop > 0.0, jitter, drop}; }
};

struct TrainOptions {
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t epochs = 200;
  double lr = 1e-4;
  double weight_decay = 0.01;
  std::size_t bags_per_task = 1;
  std::size_t patience = 0;
  std::vector<double> fractions{0.8, 0.2, 0.0};
  std::optional<std::uint64_t> split_seed;
  std::string splits;
  ModelOptions model;
  BagOptions bag;
};

struct FinetuneOptions {
  std::string checkpoint;
  std::string manifest;
  std::string task;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t repeats = 4;
  std::size_t epochs = 15;
  double lr = 1e-4;
  double weight_decay = 0.01;
  std::string init = "pretrained_agg";
  std::size_t patience = 0;
  std::vector<double> fractions{0.4, 0.1, 0.5};
  std::optional<std::uint64_t> split_seed;
  std::string splits;
  BagOptions bag;
};

struct EvalOptions {
  std::string predictions;
  std::string out;
};

struct AttendOptions {
  std::string checkpoint;
  std::string manifest;
  std::string task;
  std::vector<std::string> slides;
  std::string out;
  bool pgm = false;
};

struct EnergyOptions {
  double hours = 0.0;
  double watts = 0.0;
  std::optional<double> intensity;
  std::vector<double> intensity_range;
  std::string out;
};

struct CheckSplitsOptions {
  std::string splits;
  std::string manifest;
};

// The block written to <out>/run.txt by every subcommand that has an output
// directory: version, subcommand, seed and the effective configuration in
// the same INI form --config accepts.
inline std::string reproducibility_block(const CLI::App& sub, const std::string& seed) {
  std::ostringstream os;
  os << "# tcv2 run\n";
  os << "# version: " << TCV2_VERSION << "\n";
  os << "# command: " << sub.get_name() << "\n";
  os << "# seed: " << seed << "\n";
  os << "[" << sub.get_name() << "]\n";
  os << sub.config_to_str(true, false);
  return os.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw Error("cannot write " + path.string());
}

inline void write_run_block(const std::string& out, const CLI::App& sub, const std::string& seed) {
  if (out.empty()) return;
  fs::create_directories(out);
  write_text(fs::path(out) / "run.txt", reproducibility_block(sub, seed));
}

inline SplitFractions to_fractions(const std::vector<double>& v) {
  if (v.size() != 3) throw ConfigError("--fractions takes three values: train val test");
  return {v[0], v[1], v[2]};
}

inline int cmd_synth(const SynthOptions& o, const CLI::App& sub, std::ostream& out) {
  SynthConfig cfg;
  cfg.n_slides = o.slides;
  cfg.instances_per_slide = o.instances;
  cfg.input_width = o.width;
  cfg.signal_fraction = o.signal_fraction;
  cfg.noise_sigma = o.noise_sigma;
  cfg.slides_per_patient = o.slides_per_patient;
  cfg.seed = o.seed;
  cfg.concept_seed = o.concept_seed;
  cfg.tasks.clear();
  for (std::size_t i = 0; i < o.task_names.size(); ++i)
    cfg.tasks.push_back({o.task_names[i], o.classes, o.concept_scale, o.labeled_fraction, o.concept_family + i});
  const auto synth = synth_generate(cfg);
  const auto path = write_synth_cohort(synth, o.out);
  write_run_block(o.out, sub, std::to_string(o.seed));
  out << "wrote " << synth.cohort.manifest.records.size() << " slides to " << path.string() << "\n";
  return 0;
}

inline TaskSplits resolve_train_splits(const Manifest& m, const TrainOptions& o, std::ostream& err,
                                       SplitAssignment* global) {
  if (!o.splits.empty()) {
    auto parsed = read_splits_file(o.splits);
    if (parsed.per_task) return parsed.tasks;
    if (global) *global = parsed.global;
    return task_view(parsed.global, m);
  }
  auto res = make_patient_splits(m, to_fractions(o.fractions), o.split_seed.value_or(o.seed));
  for (const auto& w : res.warnings) err << "warning: " << w << "\n";
  if (global) *global = res.assignment;
  return task_view(res.assignment, m);
}

inline int cmd_train(const TrainOptions& o, const CLI::App& sub, std::ostream& out, std::ostream& err) {
  Cohort cohort = Cohort::load(parse_manifest(o.manifest));
  const TaskRegistry& reg = cohort.manifest.registry;
  SplitAssignment global;
  const TaskSplits splits = resolve_train_splits(cohort.manifest, o, err, &global);

  ModelConfig mc;
  mc.encoder.input_width = cohort.manifest.feature_width;
  mc.encoder.hidden_widths = o.model.hidden;
  mc.encoder.output_width = o.model.embed;
  mc.encoder.activation = parse_activation(o.model.activation);
  mc.heads = o.model.heads;
  mc.attention_width = o.model.attention_width;
  mc.head_dropout = o.model.dropout;
  MultiTaskModel model(mc, reg);
  Rng init(derive_seed(o.seed, 0x30de1));
  model.initialize(init);

  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.seed = o.seed;
  tc.adamw.lr = o.lr;
  tc.adamw.weight_decay = o.weight_decay;
  tc.bags_per_task = o.bags_per_task;
  tc.patience = o.patience;
  tc.bag = o.bag.sizes();
  tc.augment = o.bag.augment();

  Trainer trainer(model, reg, cohort, splits, tc);
  fs::create_directories(o.out);
  write_run_block(o.out, sub, std::to_string(o.seed));
  write_text(fs::path(o.out) / "splits.csv", global.empty() ? splits_to_csv(splits) : splits_to_csv(global));
  std::ofstream log(fs::path(o.out) / "training_log.csv");
  log << TrainingLog::header() << "\n";
  trainer.run(std::nullopt, &log);
  trainer.best().write_file((fs::path(o.out) / "best.ckpt").string());
  trainer.snapshot().current.write_file((fs::path(o.out) / "last.ckpt").string());

  out << "best epoch " << trainer.best_epoch() << " of " << trainer.epochs_completed() << "\n";
  for (const auto& e : trainer.log().entries)
    if (e.epoch == trainer.best_epoch() && e.split == "val")
      out << "  " << e.task_id << " val_loss " << format_double(e.loss) << " val_auc " << format_double(e.metric) << "\n";
  return 0;
}

inline std::string predictions_csv(const std::vector<Prediction>& preds, int num_classes) {
  std::ostringstream os;
  os << "slide_id,task_id,truth";
  for (int k = 0; k < num_classes; ++k) os << ",p" << k;
  os << "\n";
  for (const auto& p : preds) {
    os << p.slide_id << ',' << p.task_id << ',' << p.truth;
    for (double v : p.probs) os << ',' << format_g17(v);
    os << "\n";
  }
  return os.str();
}

inline int cmd_finetune(const FinetuneOptions& o, const CLI::App& sub, std::ostream& out, std::ostream& err) {
  const CheckpointBundle ckpt = CheckpointBundle::read_file(o.checkpoint);
  Cohort cohort = Cohort::load(parse_manifest(o.manifest));
  const TaskSpec& task = cohort.manifest.registry.at(o.task);
  SplitAssignment splits;
  if (!o.splits.empty()) {
    auto parsed = read_splits_file(o.splits);
    if (parsed.per_task) {
      auto it = parsed.tasks.find(o.task);
      if (it == parsed.tasks.end()) throw DataError("splits file " + o.splits + " has no rows for task " + o.task);
      splits = it->second;
    } else {
      splits = parsed.global;
    }
  } else {
    auto res = make_patient_splits(cohort.manifest, to_fractions(o.fractions), o.split_seed.value_or(o.seed));
    for (const auto& w : res.warnings) err << "warning: " << w << "\n";
    splits = res.assignment;
  }

  FinetuneConfig cfg;
  cfg.repeats = o.repeats;
  cfg.epochs = o.epochs;
  cfg.adamw.lr = o.lr;
  cfg.adamw.weight_decay = o.weight_decay;
  cfg.init = parse_agg_init(o.init);
  cfg.seed = o.seed;
  cfg.bag = o.bag.sizes();
  cfg.augment = o.bag.augment();
  cfg.patience = o.patience;
  const FinetuneResult res = finetune_protocol(ckpt, cohort, splits, task, cfg);

  fs::create_directories(o.out);
  write_run_block(o.out, sub, std::to_string(o.seed));
  write_text(fs::path(o.out) / "report.csv", format_report(res.report));
  write_text(fs::path(o.out) / "splits.csv", splits_to_csv(splits));
  for (const auto& r : res.repeats) {
    const std::string k = std::to_string(r.repeat);
    write_text(fs::path(o.out) / ("predictions_r" + k + ".csv"), predictions_csv(r.predictions, task.num_classes));
    write_text(fs::path(o.out) / ("training_log_r" + k + ".csv"), r.log.to_text());
  }
  out << o.task << " " << to_string(cfg.init);
  for (const auto& [name, s] : res.report.metrics) out << "  " << name << " " << format_mean_std(s);
  out << "\n";
  return 0;
}

// Predictions CSV: slide_id,task_id,truth followed by either one column per
// class probability, a single "score" column (binary positive score), or a
// single "pred" column of predicted classes.
struct TaskPredictions {
  std::vector<int> truth;
  std::vector<std::vector<double>> values;
};

inline int cmd_eval(const EvalOptions& o, const CLI::App& sub, std::ostream& out) {
  std::ifstream in(o.predictions);
  if (!in) throw DataError("cannot open predictions file " + o.predictions);
  std::string line;
  if (!std::getline(in, line)) throw DataError(o.predictions + ": empty file");
  auto header = split(trim(line), ',');
  for (auto& h : header) h = trim(h);
  if (header.size() < 4 || header[0] != "slide_id" || header[1] != "task_id" || header[2] != "truth")
    throw DataError(o.predictions + ":1: header must be slide_id,task_id,truth,<score or pred columns>");
  const std::size_t width = header.size() - 3;
  const bool is_pred = width == 1 && header[3] == "pred";
  std::map<std::string, TaskPredictions> tasks;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty() || line[0] == '#') continue;
    auto c = split(trim(line), ',');
    const std::string where = o.predictions + ":" + std::to_string(line_no) + ": ";
    if (c.size() != header.size()) throw DataError(where + "expected " + std::to_string(header.size()) + " cells");
    auto& t = tasks[trim(c[1])];
    try {
      t.truth.push_back(static_cast<int>(parse_int(c[2], "truth")));
      std::vector<double> v;
      for (std::size_t i = 3; i < c.size(); ++i) v.push_back(parse_double(c[i], header[i]));
      t.values.push_back(std::move(v));
    } catch (const ValidationError& e) {
      throw DataError(where + e.what());
    }
  }
  std::ostringstream report;
  report << "task_id,metric,value\n";
  auto emit = [&](const std::string& task, const std::string& metric, auto&& compute) {
    report << task << ',' << metric << ',';
    try {
      report << format_double(compute());
    } catch (const MetricUndefinedError&) {
      report << "undefined";
    }
    report << "\n";
  };
  for (const auto& [task, t] : tasks) {
    int classes = 2;
    for (int y : t.truth) classes = std::max(classes, y + 1);
    if (width > 1) classes = std::max(classes, static_cast<int>(width));
    std::vector<int> pred;
    if (is_pred) {
      for (const auto& v : t.values) pred.push_back(static_cast<int>(v[0]));
    } else if (width == 1) {
      for (const auto& v : t.values) pred.push_back(v[0] >= 0.5 ? 1 : 0);
    } else {
      for (const auto& v : t.values) pred.push_back(argmax(v));
    }
    if (!is_pred) {
      emit(task, "auc", [&] {
        if (width == 1) {
          std::vector<double> s;
          for (const auto& v : t.values) s.push_back(v[0]);
          return metric_auc(s, t.truth);
        }
        std::vector<double> flat;
        for (const auto& v : t.values) flat.insert(flat.end(), v.begin(), v.end());
        return metric_auc_ovr(flat, t.truth, classes);
      });
    }
    emit(task, "balanced_accuracy", [&] { return metric_balanced_accuracy(pred, t.truth, classes); });
    emit(task, "kappa", [&] { return metric_quadratic_kappa(pred, t.truth, classes); });
  }
  out << report.str();
  if (!o.out.empty()) {
    write_run_block(o.out, sub, "n/a");
    write_text(fs::path(o.out) / "metrics.csv", report.str());
  }
  return 0;
}

inline int cmd_attend(const AttendOptions& o, const CLI::App& sub, std::ostream& out) {
  const CheckpointBundle ckpt = CheckpointBundle::read_file(o.checkpoint);
  auto [mc, reg] = read_model_config(ckpt.metadata);
  MultiTaskModel model(mc, reg);
  load_checkpoint(ckpt, model, nullptr);
  model.head(o.task);
  const Manifest m = parse_manifest(o.manifest);
  const FeatureStore store = m.feature_store();
  std::vector<std::string> slides = o.slides;
  if (slides.empty())
    for (const auto& r : m.records) slides.push_back(r.slide_id);
  fs::create_directories(o.out);
  write_run_block(o.out, sub, "n/a");
  for (const auto& id : slides) {
    const SlideRecord* rec = nullptr;
    for (const auto& r : m.records)
      if (r.slide_id == id) rec = &r;
    if (!rec) throw DataError("manifest " + o.manifest + " has no slide '" + id + "'");
    const auto e = attention_export(model, whole_bag(*rec, store.read(id)), o.task);
    write_text(fs::path(o.out) / (id + ".attention.csv"), attention_to_csv(e));
    if (o.pgm) write_text(fs::path(o.out) / (id + ".pgm"), attention_to_pgm(e));
  }
  out << "exported attention for " << slides.size() << " slide(s) to " << o.out << "\n";
  return 0;
}

inline int cmd_energy(const EnergyOptions& o, const CLI::App& sub, std::ostream& out) {
  EnergyEstimate e;
  if (!o.intensity_range.empty()) {
    if (o.intensity_range.size() != 2) throw ConfigError("--intensity-range takes two values: low high");
    e = energy_estimate(o.hours, o.watts, o.intensity_range[0], o.intensity_range[1]);
  } else {
    e = energy_estimate(o.hours, o.watts, o.intensity.value_or(0.0));
  }
  out << "energy " << format_double(e.energy_kwh) << " kWh\n";
  if (o.intensity || !o.intensity_range.empty()) {
    out << "co2 " << format_double(e.co2_low_kg);
    if (e.is_range()) out << " to " << format_double(e.co2_high_kg);
    out << " kg\n";
  }
  write_run_block(o.out, sub, "n/a");
  return 0;
}

inline int cmd_check_splits(const CheckSplitsOptions& o, std::ostream& out) {
  auto parsed = read_splits_file(o.splits);
  TaskSplits tasks;
  if (parsed.per_task) {
    tasks = parsed.tasks;
  } else {
    if (o.manifest.empty()) throw ConfigError("a global splits file needs --manifest to map slides to tasks");
    tasks = task_view(parsed.global, parse_manifest(o.manifest, false));
  }
  const auto report = check_split_coherence(tasks);
  if (report.coherent()) {
    out << "coherent: " << tasks.size() << " task(s)\n";
    return 0;
  }
  out << report.violations.size() << " violation(s)\n" << report.to_string();
  if (!report.to_string().empty() && report.to_string().back() != '\n') out << "\n";
  return 1;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-task attention MIL training engine"};
  app.set_config("--config", "", "INI file; [subcommand] sections give defaults that flags override");
  app.set_version_flag("--version", TCV2_VERSION);
  app.require_subcommand(1);

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-task bag cohort");
  synth->add_option("--out", so.out, "Output directory")->required();
  synth->add_option("--slides", so.slides)->capture_default_str();
  synth->add_option("--instances", so.instances, "Instances per slide")->capture_default_str();
  synth->add_option("--width", so.width, "Feature width")->capture_default_str();
  synth->add_option("--tasks", so.task_names, "Task ids")->capture_default_str();
  synth->add_option("--classes", so.classes)->capture_default_str();
  synth->add_option("--signal-fraction", so.signal_fraction)->capture_default_str();
  synth->add_option("--noise-sigma", so.noise_sigma)->capture_default_str();
  synth->add_option("--concept-scale", so.concept_scale)->capture_default_str();
  synth->add_option("--concept-family", so.concept_family, "Concept family of the first task")->capture_default_str();
  synth->add_option("--labeled-fraction", so.labeled_fraction)->capture_default_str();
  synth->add_option("--slides-per-patient", so.slides_per_patient)->capture_default_str();
  synth->add_option("--seed", so.seed)->capture_default_str();
  synth->add_option("--concept-seed", so.concept_seed)->capture_default_str();

  auto add_bag = [](CLI::App* sub, BagOptions& b) {
    sub->add_option("--bag-min", b.min)->capture_default_str();
    sub->add_option("--bag-max", b.max)->capture_default_str();
    sub->add_option("--val-bag", b.val)->capture_default_str();
    sub->add_option("--jitter", b.jitter, "Feature jitter sigma (augmentation)")->capture_default_str();
    sub->add_option("--drop", b.drop, "Instance drop probability (augmentation)")->capture_default_str();
  };

  TrainOptions to;
  auto* train_cmd = app.add_subcommand("train", "Multi-task pretraining");
  train_cmd->add_option("--manifest", to.manifest)->required();
  train_cmd->add_option("--out", to.out)->required();
  train_cmd->add_option("--seed", to.seed)->required();
  train_cmd->add_option("--epochs", to.epochs)->capture_default_str();
  train_cmd->add_option("--lr", to.lr)->capture_default_str();
  train_cmd->add_option("--weight-decay", to.weight_decay)->capture_default_str();
  train_cmd->add_option("--bags-per-task", to.bags_per_task)->capture_default_str();
  train_cmd->add_option("--patience", to.patience, "Early stopping patience in epochs, 0 = off")->capture_default_str();
  train_cmd->add_option("--fractions", to.fractions, "train val test")->expected(3)->capture_default_str();
  train_cmd->add_option("--split-seed", to.split_seed, "Defaults to --seed");
  train_cmd->add_option("--splits", to.splits, "Splits CSV (global or per task) instead of generating one");
  train_cmd->add_option("--hidden", to.model.hidden, "Encoder hidden widths")->capture_default_str();
  train_cmd->add_option("--embed", to.model.embed, "Encoder output width")->capture_default_str();
  train_cmd->add_option("--heads", to.model.heads)->capture_default_str();
  train_cmd->add_option("--attention-width", to.model.attention_width, "0 = max(D/2, 16)")->capture_default_str();
  train_cmd->add_option("--activation", to.model.activation)->check(CLI::IsMember({"relu", "tanh"}))->capture_default_str();
  train_cmd->add_option("--dropout", to.model.dropout, "Head dropout")->capture_default_str();
  add_bag(train_cmd, to.bag);

  FinetuneOptions fo;
  auto* ft = app.add_subcommand("finetune", "Frozen-encoder fine-tuning protocol");
  ft->add_option("--checkpoint", fo.checkpoint)->required();
  ft->add_option("--manifest", fo.manifest)->required();
  ft->add_option("--task", fo.task)->required();
  ft->add_option("--out", fo.out)->required();
  ft->add_option("--seed", fo.seed)->required();
  ft->add_option("--repeats", fo.repeats)->capture_default_str();
  ft->add_option("--epochs", fo.epochs)->capture_default_str();
  ft->add_option("--lr", fo.lr)->capture_default_str();
  ft->add_option("--weight-decay", fo.weight_decay)->capture_default_str();
  ft->add_option("--init", fo.init)->check(CLI::IsMember({"pretrained_agg", "random_agg"}))->capture_default_str();
  ft->add_option("--patience", fo.patience)->capture_default_str();
  ft->add_option("--fractions", fo.fractions, "train val test")->expected(3)->capture_default_str();
  ft->add_option("--split-seed", fo.split_seed, "Defaults to --seed");
  ft->add_option("--splits", fo.splits);
  add_bag(ft, fo.bag);

  EvalOptions eo;
  auto* ev = app.add_subcommand("eval", "Metrics from a predictions CSV");
  ev->add_option("--predictions", eo.predictions)->required();
  ev->add_option("--out", eo.out);

  AttendOptions ao;
  auto* at = app.add_subcommand("attend", "Export attention maps");
  at->add_option("--checkpoint", ao.checkpoint)->required();
  at->add_option("--manifest", ao.manifest)->required();
  at->add_option("--task", ao.task)->required();
  at->add_option("--slide", ao.slides, "Slide ids (default: all)");
  at->add_option("--out", ao.out)->required();
  at->add_flag("--pgm", ao.pgm, "Also write a graymap raster");

  EnergyOptions eno;
  auto* en = app.add_subcommand("energy", "Energy and CO2 estimate");
  en->add_option("--hours", eno.hours)->required();
  en->add_option("--watts", eno.watts)->required();
  auto* single = en->add_option("--intensity", eno.intensity, "kg CO2 per kWh");
  en->add_option("--intensity-range", eno.intensity_range, "low high")->expected(2)->excludes(single);
  en->add_option("--out", eno.out);

  CheckSplitsOptions co;
  auto* cs = app.add_subcommand("check-splits", "Cross-task split coherence");
  cs->add_option("--splits", co.splits)->required();
  cs->add_option("--manifest", co.manifest, "Needed for a global splits file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(so, *synth, out);
    if (train_cmd->parsed()) return cmd_train(to, *train_cmd, out, err);
    if (ft->parsed()) return cmd_finetune(fo, *ft, out, err);
    if (ev->parsed()) return cmd_eval(eo, *ev, out);
    if (at->parsed()) return cmd_attend(ao, *at, out);
    if (en->parsed()) return cmd_energy(eno, *en, out);
    if (cs->parsed()) return cmd_check_splits(co, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace tcv2::cli
