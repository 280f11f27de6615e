#pragma once

// Frozen-encoder fine-tuning on a downstream task.
//
// Each repeat rebuilds the model from the checkpoint description, loads the
// pretrained encoder and freezes it, initializes the aggregation module either
// randomly or from the checkpoint, attaches a fresh head for the downstream
// task, trains on the task's train split while tracking validation loss, and
// scores the best-validation model on the test split.

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "tcv2/checkpoint.hpp"
#include "tcv2/errors.hpp"
#include "tcv2/metrics.hpp"
#include "tcv2/model.hpp"
#include "tcv2/splits.hpp"
#include "tcv2/trainer.hpp"

namespace tcv2 {

enum class AggInit { kRandom, kPretrained };

inline std::string to_string(AggInit a) { return a == AggInit::kRandom ? "random_agg" : "pretrained_agg"; }

inline AggInit parse_agg_init(const std::string& s) {
  if (s == "random_agg" || s == "random") return AggInit::kRandom;
  if (s == "pretrained_agg" || s == "pretrained") return AggInit::kPretrained;
  throw ConfigError("unknown aggregation init '" + s + "' (expected random_agg or pretrained_agg)");
}

struct FinetuneConfig {
  std::size_t repeats = 4;
  std::size_t epochs = 15;
  AdamWConfig adamw;
  AggInit init = AggInit::kPretrained;
  std::uint64_t seed = 0;
  BagSizes bag;
  AugmentConfig augment;
  std::size_t patience = 0;
};

struct Prediction {
  std::string slide_id;
  std::string task_id;
  int truth = 0;
  std::vector<double> probs;
};

struct RepeatResult {
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  double auc = 0.0;
  double balanced_accuracy = 0.0;
  double kappa = 0.0;  // NaN when undefined on the test set
  TrainingLog log;
  std::vector<Prediction> predictions;
};

struct FinetuneResult {
  MetricReport report;
  std::vector<RepeatResult> repeats;
  std::uint64_t encoder_hash = 0;
};

// FNV-1a over the raw bytes of every encoder parameter, in order.
inline std::uint64_t encoder_hash(const CheckpointBundle& bundle) {
  std::string bytes;
  for (const auto& p : bundle.parameters) {
    if (p.stable_id.rfind("encoder.", 0) != 0) continue;
    bytes += p.stable_id;
    bytes.append(reinterpret_cast<const char*>(p.values.data()), p.values.size() * sizeof(double));
  }
  return stable_hash(bytes);
}

inline std::uint64_t encoder_hash(const MultiTaskModel& model) {
  return encoder_hash(save_checkpoint(model, OptimizerState{}, {}));
}

// Class probabilities for each slide in `slides` on fixed validation bags.
inline std::vector<Prediction> predict_slides(MultiTaskModel& model, const Cohort& cohort, const std::string& task_id,
                                              const std::vector<std::size_t>& slides, const BagSizes& sizes) {
  std::vector<Prediction> out;
  Rng unused(0);
  for (std::size_t idx : slides) {
    const auto& rec = cohort.manifest.records[idx];
    Bag bag = sample_bag(rec, cohort.features[idx], sizes, SampleMode::kVal, unused);
    auto logits = predict_logits(model, task_id, bag.tensor());
    out.push_back({rec.slide_id, task_id, rec.label(task_id).value_or(-1), detail::softmax_row(logits)});
  }
  return out;
}

struct TestScores {
  double auc = std::nan("");
  double balanced_accuracy = std::nan("");
  double kappa = std::nan("");
};

inline TestScores score_predictions(const std::vector<Prediction>& preds, int num_classes) {
  std::vector<double> probs;
  std::vector<int> truth, pred;
  for (const auto& p : preds) {
    probs.insert(probs.end(), p.probs.begin(), p.probs.end());
    truth.push_back(p.truth);
    pred.push_back(argmax(p.probs));
  }
  TestScores s;
  try {
    s.auc = metric_auc_ovr(probs, truth, num_classes);
  } catch (const MetricUndefinedError&) {
  }
  try {
    s.balanced_accuracy = metric_balanced_accuracy(pred, truth, num_classes);
  } catch (const MetricUndefinedError&) {
  }
  try {
    s.kappa = metric_quadratic_kappa(pred, truth, num_classes);
  } catch (const MetricUndefinedError&) {
  }
  return s;
}

inline FinetuneResult finetune_protocol(const CheckpointBundle& checkpoint, const Cohort& downstream,
                                        const SplitAssignment& splits, const TaskSpec& task,
                                        const FinetuneConfig& cfg) {
  if (cfg.repeats == 0) throw ConfigError("fine-tuning needs at least one repeat");
  task.validate();
  auto [model_cfg, pre_registry] = read_model_config(checkpoint.metadata);
  if (model_cfg.encoder.input_width != downstream.manifest.feature_width && downstream.manifest.feature_width != 0)
    throw DimensionError("downstream features have width " + std::to_string(downstream.manifest.feature_width) +
                         " but the encoder expects " + std::to_string(model_cfg.encoder.input_width));

  TaskRegistry registry;
  registry.add(task);
  TaskSplits task_splits;
  std::vector<std::size_t> test_slides;
  for (std::size_t i = 0; i < downstream.manifest.records.size(); ++i) {
    const auto& r = downstream.manifest.records[i];
    if (!r.label(task.task_id)) continue;
    auto it = splits.find(r.slide_id);
    if (it == splits.end()) throw DataError("slide " + r.slide_id + " has no split assignment");
    task_splits[task.task_id][r.slide_id] = it->second;
    if (it->second == Split::kTest) test_slides.push_back(i);
  }
  if (test_slides.empty()) throw DataError("task " + task.task_id + " has no test slides");

  FinetuneResult result;
  result.encoder_hash = encoder_hash(checkpoint);
  for (std::size_t r = 0; r < cfg.repeats; ++r) {
    const std::uint64_t seed = cfg.seed + r;
    MultiTaskModel model(model_cfg, registry);
    Rng init_rng(derive_seed(seed, 0x1a17));
    model.initialize(init_rng);
    load_parameters_with_prefix(checkpoint, model, "encoder.");
    if (cfg.init == AggInit::kPretrained) load_parameters_with_prefix(checkpoint, model, "pool.");
    model.freeze(Scope::kEncoder);

    TrainConfig tc;
    tc.bag = cfg.bag;
    tc.epochs = cfg.epochs;
    tc.adamw = cfg.adamw;
    tc.seed = seed;
    tc.augment = cfg.augment;
    tc.patience = cfg.patience;
    Trainer trainer(model, registry, downstream, task_splits, tc);
    trainer.run();
    load_checkpoint(trainer.best(), model, nullptr);
    if (encoder_hash(model) != result.encoder_hash)
      throw Error("encoder parameters changed during fine-tuning of " + task.task_id);

    RepeatResult rep;
    rep.repeat = r;
    rep.seed = seed;
    rep.best_epoch = trainer.best_epoch();
    rep.log = trainer.log();
    rep.predictions = predict_slides(model, downstream, task.task_id, test_slides, cfg.bag);
    const TestScores s = score_predictions(rep.predictions, task.num_classes);
    rep.auc = s.auc;
    rep.balanced_accuracy = s.balanced_accuracy;
    rep.kappa = s.kappa;
    result.report.add("auc", s.auc);
    result.report.add("balanced_accuracy", s.balanced_accuracy);
    result.report.add("kappa", s.kappa);
    result.repeats.push_back(std::move(rep));
  }
  return result;
}

// "name,mean,std,n" rows followed by the raw per-repeat values.
inline std::string format_report(const MetricReport& report) {
  std::string out = "metric,mean,std,n_repeats,raw\n";
  for (const auto& [name, s] : report.metrics) {
    out += name + "," + format_g17(s.mean()) + "," + format_g17(s.std()) + "," + std::to_string(s.n_repeats()) + ",";
    for (std::size_t i = 0; i < s.raw.size(); ++i) out += (i ? ";" : "") + format_g17(s.raw[i]);
    out += "\n";
  }
  return out;
}

// Table-style one-liner, e.g. "auc 0.84±0.01".
inline std::string format_mean_std(const MetricSummary& s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f", s.mean(), s.std());
  return buf;
}

}  // namespace tcv2
