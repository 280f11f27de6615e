#pragma once

// End-to-end multi-task training.
//
// One step draws a bag for every task, runs forward/backward per task so that
// gradients accumulate in the shared parameters, and then applies a single
// AdamW update. An epoch walks each task's training slides once (shorter task
// lists cycle with a fresh shuffle); after each epoch every task is validated
// on fixed-size, unaugmented bags and the model with the lowest mean
// validation loss is kept.
//
// All randomness is derived from (seed, epoch, step, task), except the head
// dropout stream, which is carried in the checkpoint metadata.

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "tcv2/checkpoint.hpp"
#include "tcv2/errors.hpp"
#include "tcv2/manifest.hpp"
#include "tcv2/metrics.hpp"
#include "tcv2/model.hpp"
#include "tcv2/optimizer.hpp"
#include "tcv2/sampling.hpp"
#include "tcv2/splits.hpp"
#include "tcv2/text.hpp"

namespace tcv2 {

struct TrainConfig {
  BagSizes bag;
  std::size_t epochs = 200;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  std::size_t bags_per_task = 1;
  std::size_t patience = 0;  // stop after this many epochs without improvement; 0 never stops early
  bool validate = true;

  void validate_config() const {
    adamw.validate();
    augment.validate();
    if (bag.min == 0 || bag.min > bag.max) throw ConfigError("bag sizes must satisfy 1 <= min <= max");
    if (bag.val == 0) throw ConfigError("validation bag size must be >= 1");
    if (bags_per_task == 0) throw ConfigError("bags_per_task must be >= 1");
  }
};

struct TaskOutput {
  int label = 0;
  std::vector<double> probs;
};

struct StepReport {
  std::uint64_t step = 0;
  std::map<std::string, double> losses;  // mean cross-entropy per task, unweighted
  double grad_norm = 0.0;
  std::map<std::string, std::vector<TaskOutput>> outputs;
};

namespace detail {

inline std::vector<double> softmax_row(std::span<const double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : logits) mx = std::max(mx, x);
  std::vector<double> p(logits.size());
  double z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& x : p) x /= z;
  return p;
}

// Binary AUC or one-vs-rest macro AUC; NaN when undefined.
inline double outputs_auc(const std::vector<TaskOutput>& outs, int num_classes) {
  std::vector<double> probs;
  std::vector<int> truth;
  for (const auto& o : outs) {
    probs.insert(probs.end(), o.probs.begin(), o.probs.end());
    truth.push_back(o.label);
  }
  try {
    return metric_auc_ovr(probs, truth, num_classes);
  } catch (const MetricUndefinedError&) {
    return std::nan("");
  }
}

}  // namespace detail

// One combined update. Tasks are visited in registry order; each bag's loss
// (loss_weight * CE / bags) is backpropagated on its own tape, accumulating
// into the shared gradients, and exactly one AdamW step follows.
inline StepReport multitask_step(MultiTaskModel& model, const std::map<std::string, std::vector<Bag>>& batch,
                                 const TaskRegistry& registry, OptimizerState& optimizer, const AdamWConfig& adamw,
                                 Rng& dropout_rng) {
  for (const auto& [task, bags] : batch) registry.at(task);
  model.zero_grad();
  StepReport rep;
  rep.step = optimizer.step + 1;
  for (const auto& spec : registry) {
    auto it = batch.find(spec.task_id);
    if (it == batch.end() || it->second.empty()) continue;
    const auto& bags = it->second;
    double total = 0.0;
    for (const Bag& bag : bags) {
      auto label = bag.labels.find(spec.task_id);
      if (label == bag.labels.end())
        throw LabelError("bag from slide " + bag.slide_id + " has no label for task " + spec.task_id);
      Tape tape;
      auto fwd = model.forward_bag(spec.task_id, bag.tensor(), Mode::kTrain, dropout_rng, tape);
      const int target = label->second;
      Tensor ce = cross_entropy_logits(fwd.logits, std::span<const int>(&target, 1));
      if (!std::isfinite(ce.item()))
        throw DivergenceError("non-finite loss for task " + spec.task_id + " at step " + std::to_string(rep.step));
      total += ce.item();
      rep.outputs[spec.task_id].push_back({target, detail::softmax_row(fwd.logits.values())});
      if (ce.requires_grad()) tape.backward(scale(ce, spec.loss_weight / static_cast<double>(bags.size())));
    }
    rep.losses[spec.task_id] = total / static_cast<double>(bags.size());
  }
  double sq = 0.0;
  auto params = model.parameters();
  for (const Parameter* p : params)
    if (!p->frozen)
      for (double g : p->grad) sq += g * g;
  rep.grad_norm = std::sqrt(sq);
  adamw_step(params, optimizer, adamw);
  model.zero_grad();
  return rep;
}

struct LogEntry {
  std::size_t epoch = 0;
  std::string task_id;
  std::string split;
  double loss = 0.0;
  double metric = 0.0;

  friend bool operator==(const LogEntry& a, const LogEntry& b) {
    auto same = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
    return a.epoch == b.epoch && a.task_id == b.task_id && a.split == b.split && same(a.loss, b.loss) &&
           same(a.metric, b.metric);
  }
};

// One line per (epoch, task, split): "epoch,task_id,split,loss,metric".
// The metric is the ROC AUC (one-vs-rest macro for multiclass tasks).
struct TrainingLog {
  std::vector<LogEntry> entries;

  static std::string header() { return "epoch,task_id,split,loss,metric"; }

  static std::string line(const LogEntry& e) {
    return std::to_string(e.epoch) + "," + e.task_id + "," + e.split + "," + format_g17(e.loss) + "," +
           format_g17(e.metric);
  }

  std::string to_text() const {
    std::string out = header() + "\n";
    for (const auto& e : entries) out += line(e) + "\n";
    return out;
  }

  static TrainingLog parse(const std::string& text) {
    TrainingLog log;
    std::istringstream is(text);
    std::string l;
    bool first = true;
    while (std::getline(is, l)) {
      if (l.empty()) continue;
      if (first) {
        first = false;
        if (l == header()) continue;
      }
      auto c = split(l, ',');
      if (c.size() != 5) throw DataError("malformed training log line '" + l + "'");
      log.entries.push_back({static_cast<std::size_t>(parse_int(c[0], "epoch")), c[1], c[2],
                             c[3] == "nan" ? std::nan("") : parse_double(c[3], "loss"),
                             c[4] == "nan" ? std::nan("") : parse_double(c[4], "metric")});
    }
    return log;
  }

  friend bool operator==(const TrainingLog&, const TrainingLog&) = default;
};

// Mean of the per-task validation losses for one epoch, NaN if none.
inline double mean_val_loss(const TrainingLog& log, std::size_t epoch) {
  double s = 0;
  int n = 0;
  for (const auto& e : log.entries)
    if (e.epoch == epoch && e.split == "val" && std::isfinite(e.loss)) {
      s += e.loss;
      ++n;
    }
  return n ? s / n : std::nan("");
}

struct TrainerState {
  CheckpointBundle current;  // parameters, optimizer, and resume metadata
  CheckpointBundle best;
  TrainingLog log;
};

class Trainer {
 public:
  Trainer(MultiTaskModel& model, TaskRegistry registry, const Cohort& cohort, TaskSplits splits, TrainConfig cfg)
      : model_(model), registry_(std::move(registry)), cohort_(cohort), splits_(std::move(splits)), cfg_(cfg),
        dropout_rng_(derive_seed(cfg.seed, 0xd80)) {
    cfg_.validate_config();
    const CoherenceReport coherence = check_split_coherence(splits_);
    if (!coherence.coherent())
      throw CoherenceError("split assignment is not coherent across tasks:\n" + coherence.to_string());
    for (const auto& t : registry_) {
      model_.head(t.task_id);
      auto& train = train_slides_[t.task_id];
      auto& val = val_slides_[t.task_id];
      const auto sit = splits_.find(t.task_id);
      for (std::size_t i = 0; i < cohort_.manifest.records.size(); ++i) {
        const auto& r = cohort_.manifest.records[i];
        if (!r.label(t.task_id) || sit == splits_.end()) continue;
        auto s = sit->second.find(r.slide_id);
        if (s == sit->second.end()) continue;
        if (s->second == Split::kTrain) train.push_back(i);
        else if (s->second == Split::kVal) val.push_back(i);
      }
    }
    std::size_t longest = 0;
    for (const auto& [t, v] : train_slides_) longest = std::max(longest, v.size());
    steps_per_epoch_ = (longest + cfg_.bags_per_task - 1) / cfg_.bags_per_task;
    best_ = save_checkpoint(model_, optimizer_, state_metadata(0));
  }

  // Train until all epochs are done, early stopping triggers, or `max_steps`
  // more optimizer steps have been taken (whichever comes first).
  void run(std::optional<std::uint64_t> max_steps = std::nullopt, std::ostream* sink = nullptr) {
    std::uint64_t budget = max_steps.value_or(std::numeric_limits<std::uint64_t>::max());
    while (!finished()) {
      while (step_in_epoch_ < steps_per_epoch_) {
        if (budget == 0) return;
        run_step();
        --budget;
      }
      end_epoch(sink);
    }
  }

  bool finished() const {
    return epoch_ >= cfg_.epochs || (cfg_.patience > 0 && epoch_ - best_epoch_ >= cfg_.patience && epoch_ > 0);
  }

  const TrainingLog& log() const { return log_; }
  const CheckpointBundle& best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t epochs_completed() const { return epoch_; }
  std::size_t steps_per_epoch() const { return steps_per_epoch_; }
  const OptimizerState& optimizer() const { return optimizer_; }
  const std::vector<std::map<std::string, double>>& step_losses() const { return step_losses_; }

  TrainerState snapshot() const {
    return {save_checkpoint(model_, optimizer_, state_metadata(epoch_)), best_, log_};
  }

  void restore(const TrainerState& st) {
    const Metadata md = load_checkpoint(st.current, model_, &optimizer_);
    best_ = st.best;
    log_ = st.log;
    epoch_ = static_cast<std::size_t>(parse_int(metadata_at(md, "resume.epoch"), "epoch"));
    step_in_epoch_ = static_cast<std::size_t>(parse_int(metadata_at(md, "resume.step_in_epoch"), "step"));
    best_epoch_ = static_cast<std::size_t>(parse_int(metadata_at(md, "resume.best_epoch"), "best epoch"));
    best_score_ = parse_double(metadata_at(md, "resume.best_score"), "best score");
    dropout_rng_ = Rng::deserialize(metadata_at(md, "rng.dropout"));
    acc_.clear();
    for (const auto& t : registry_) {
      const std::string k = "resume.acc." + t.task_id + ".";
      auto it = md.find(k + "loss_sum");
      if (it == md.end()) continue;
      Accumulator a;
      a.loss_sum = parse_double(it->second, "loss sum");
      a.count = static_cast<std::size_t>(parse_int(metadata_at(md, k + "count"), "count"));
      const std::string& outs = metadata_at(md, k + "outputs");
      if (!outs.empty())
        for (const auto& item : split(outs, ' ')) {
          auto parts = split(item, ':');
          TaskOutput o;
          o.label = static_cast<int>(parse_int(parts.at(0), "label"));
          for (std::size_t i = 1; i < parts.size(); ++i) o.probs.push_back(parse_double(parts[i], "prob"));
          a.outputs.push_back(std::move(o));
        }
      acc_[t.task_id] = std::move(a);
    }
  }

 private:
  struct Accumulator {
    double loss_sum = 0.0;
    std::size_t count = 0;
    std::vector<TaskOutput> outputs;
  };

  Metadata state_metadata(std::size_t epoch) const {
    Metadata md;
    write_model_config(model_.config(), registry_, md);
    md["epoch"] = std::to_string(epoch);
    md["rng.dropout"] = dropout_rng_.serialize();
    md["train.seed"] = std::to_string(cfg_.seed);
    md["train.lr"] = format_double(cfg_.adamw.lr);
    md["resume.epoch"] = std::to_string(epoch_);
    md["resume.step_in_epoch"] = std::to_string(step_in_epoch_);
    md["resume.best_epoch"] = std::to_string(best_epoch_);
    md["resume.best_score"] = format_g17(best_score_);
    for (const auto& [task, a] : acc_) {
      const std::string k = "resume.acc." + task + ".";
      md[k + "loss_sum"] = format_g17(a.loss_sum);
      md[k + "count"] = std::to_string(a.count);
      std::string outs;
      for (const auto& o : a.outputs) {
        if (!outs.empty()) outs += ' ';
        outs += std::to_string(o.label);
        for (double p : o.probs) outs += ":" + format_g17(p);
      }
      md[k + "outputs"] = outs;
    }
    for (const auto& e : log_.entries)
      if (e.epoch == epoch && e.split == "val") {
        md["val_loss." + e.task_id] = format_g17(e.loss);
        md["val_metric." + e.task_id] = format_g17(e.metric);
      }
    return md;
  }

  std::size_t slide_at(const std::string& task, std::size_t task_index, std::size_t position) {
    const auto& list = train_slides_[task];
    const std::size_t m = list.size();
    const std::size_t cycle = position / m;
    auto& cache = order_cache_[task];
    if (cache.epoch != epoch_ || cache.cycle != cycle || cache.order.empty()) {
      cache.order = list;
      Rng rng(derive_seed(cfg_.seed, 0x5bf, epoch_, task_index, cycle));
      for (std::size_t i = m; i > 1; --i) std::swap(cache.order[i - 1], cache.order[rng.below(i)]);
      cache.epoch = epoch_;
      cache.cycle = cycle;
    }
    return cache.order[position % m];
  }

  void run_step() {
    std::map<std::string, std::vector<Bag>> batch;
    std::size_t ti = 0;
    for (const auto& t : registry_) {
      const std::size_t task_index = ti++;
      if (train_slides_[t.task_id].empty()) continue;
      for (std::size_t b = 0; b < cfg_.bags_per_task; ++b) {
        const std::size_t idx = slide_at(t.task_id, task_index, step_in_epoch_ * cfg_.bags_per_task + b);
        Rng rng(derive_seed(cfg_.seed, 0xba9, epoch_, step_in_epoch_, task_index, b));
        Bag bag = sample_bag(cohort_.manifest.records[idx], cohort_.features[idx], cfg_.bag, SampleMode::kTrain, rng);
        batch[t.task_id].push_back(augment_bag(bag, cfg_.augment, rng));
      }
    }
    StepReport rep = multitask_step(model_, batch, registry_, optimizer_, cfg_.adamw, dropout_rng_);
    for (auto& [task, loss] : rep.losses) {
      auto& a = acc_[task];
      a.loss_sum += loss;
      a.count += 1;
      auto& outs = rep.outputs[task];
      a.outputs.insert(a.outputs.end(), outs.begin(), outs.end());
    }
    step_losses_.push_back(rep.losses);
    ++step_in_epoch_;
  }

  void end_epoch(std::ostream* sink) {
    const std::size_t epoch = epoch_ + 1;
    const std::size_t first_new = log_.entries.size();
    for (const auto& t : registry_) {
      auto it = acc_.find(t.task_id);
      if (it != acc_.end() && it->second.count > 0)
        log_.entries.push_back({epoch, t.task_id, "train", it->second.loss_sum / static_cast<double>(it->second.count),
                                detail::outputs_auc(it->second.outputs, t.num_classes)});
      if (cfg_.validate) {
        auto [loss, metric] = validate_task(t);
        log_.entries.push_back({epoch, t.task_id, "val", loss, metric});
      }
    }
    acc_.clear();
    epoch_ = epoch;
    step_in_epoch_ = 0;
    const double score = cfg_.validate ? mean_val_loss(log_, epoch) : -static_cast<double>(epoch);
    if (std::isfinite(score) && score < best_score_) {
      best_score_ = score;
      best_epoch_ = epoch;
      best_ = save_checkpoint(model_, optimizer_, state_metadata(epoch));
    }
    if (sink) {
      for (std::size_t i = first_new; i < log_.entries.size(); ++i) *sink << TrainingLog::line(log_.entries[i]) << '\n';
      sink->flush();
    }
  }

  std::pair<double, double> validate_task(const TaskSpec& t) {
    const auto& val = val_slides_[t.task_id];
    if (val.empty()) return {std::nan(""), std::nan("")};
    std::vector<TaskOutput> outs;
    double loss = 0.0;
    Rng unused(0);
    for (std::size_t idx : val) {
      const auto& rec = cohort_.manifest.records[idx];
      Bag bag = sample_bag(rec, cohort_.features[idx], cfg_.bag, SampleMode::kVal, unused);
      Tape tape(false);
      auto fwd = model_.forward_bag(t.task_id, bag.tensor(), Mode::kEval, unused, tape);
      const int target = *rec.label(t.task_id);
      loss += cross_entropy_logits(fwd.logits, std::span<const int>(&target, 1)).item();
      outs.push_back({target, detail::softmax_row(fwd.logits.values())});
    }
    return {loss / static_cast<double>(val.size()), detail::outputs_auc(outs, t.num_classes)};
  }

  struct OrderCache {
    std::size_t epoch = 0;
    std::size_t cycle = 0;
    std::vector<std::size_t> order;
  };

  MultiTaskModel& model_;
  TaskRegistry registry_;
  const Cohort& cohort_;
  TaskSplits splits_;
  TrainConfig cfg_;
  OptimizerState optimizer_;
  Rng dropout_rng_;
  std::map<std::string, std::vector<std::size_t>> train_slides_, val_slides_;
  std::map<std::string, OrderCache> order_cache_;
  std::map<std::string, Accumulator> acc_;
  std::size_t steps_per_epoch_ = 0;
  std::size_t epoch_ = 0;
  std::size_t step_in_epoch_ = 0;
  std::size_t best_epoch_ = 0;
  double best_score_ = std::numeric_limits<double>::infinity();
  CheckpointBundle best_;
  TrainingLog log_;
  std::vector<std::map<std::string, double>> step_losses_;
};

struct TrainResult {
  TrainingLog log;
  CheckpointBundle best;
  std::size_t best_epoch = 0;
};

inline TrainResult train(MultiTaskModel& model, const TaskRegistry& registry, const Cohort& cohort,
                         const TaskSplits& splits, const TrainConfig& cfg, std::ostream* sink = nullptr) {
  Trainer trainer(model, registry, cohort, splits, cfg);
  trainer.run(std::nullopt, sink);
  return {trainer.log(), trainer.best(), trainer.best_epoch()};
}

}  // namespace tcv2
