// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Pass criterion names as arguments to run a subset.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include "cli.hpp"
#include "oracles.hpp"

using namespace tcv2;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---- gradients ------------------------------------------------------------

// Fourth-order central difference, used where the plain central difference
// is too noisy to resolve small components.
double five_point_derivative(const std::function<double()>& f, double& x, double h) {
  const double orig = x;
  auto at = [&](double v) {
    x = v;
    return f();
  };
  const double d = (at(orig - 2 * h) - 8 * at(orig - h) + 8 * at(orig + h) - at(orig + 2 * h)) / (12 * h);
  x = orig;
  return d;
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const std::size_t models = 20;
  double worst = 0;
  std::string worst_at;
  std::size_t checked = 0;
  for (std::size_t m = 0; m < models; ++m) {
    Rng rng(1000 + m);
    auto reg = oracle::binary_registry({"a"});
    // The first and last models use the largest widths and bags allowed.
    const std::size_t d = (m == 0 || m + 1 == models) ? 32 : 4 + rng.below(29);
    const std::size_t d_in = 2 + rng.below(15);
    const std::size_t n = (m == 0 || m + 1 == models) ? 16 : 1 + rng.below(16);
    auto model = oracle::random_model(rng, d_in, d, 8, reg);
    Tensor bag = oracle::random_bag(n, d_in, rng);
    const int y = static_cast<int>(rng.below(2));
    auto loss = [&](Tape& tape) {
      Rng drop(m);
      auto fwd = model.forward_bag("a", bag, Mode::kTrain, drop, tape);
      return cross_entropy_logits(fwd.logits, std::span(&y, 1));
    };
    model.zero_grad();
    {
      Tape tape;
      tape.backward(loss(tape));
    }
    auto loss_value = [&] {
      Tape t(false);
      return loss(t).item();
    };
    for (Parameter* p : model.parameters()) {
      auto g = p->grad;
      auto num = finite_diff_grad(loss_value, *p, 1e-5).storage();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double e = oracle::rel_error(g[i], num[i]);
        if (e >= 1e-6) {
          num[i] = five_point_derivative(loss_value, p->value[i], 1e-3);
          e = oracle::rel_error(g[i], num[i]);
        }
        ++checked;
        if (e > worst) {
          worst = e;
          worst_at = p->stable_id + "[" + std::to_string(i) + "] model " + std::to_string(m);
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-5 && secs < 60.0, std::to_string(models) + " models, " + std::to_string(checked) +
                                           " gradients, max rel err " + fmt(worst) + " at " + worst_at + ", " +
                                           fmt(secs, 3) + " s (limits 1e-5, 60 s)"};
}

// ---- pooling --------------------------------------------------------------

Outcome pooling_oracle() {
  double worst_oracle = 0, worst_perm = 0;
  for (std::uint64_t c = 0; c < 100; ++c) {
    Rng rng(2000 + c);
    const std::size_t heads = 1 + rng.below(8), d = 1 + rng.below(16), da = 1 + rng.below(12);
    const std::size_t n = 1 + rng.below(40);
    AttentionPoolParams p = AttentionPoolParams::zeros({heads, d, da});
    for (Parameter* q : p.parameters()) oracle::fill_uniform(*q, rng, -1.5, 1.5);
    Tensor bag = oracle::random_bag(n, d, rng, 2.0);
    Tape t(false);
    auto r = pool_attention(bag, p, t);
    auto o = oracle::pool_attention(oracle::to_matrix(bag.storage(), n, d), p);
    worst_oracle = std::max(worst_oracle, max_abs_diff(r.slide_vector.values(), o.slide));
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t k = 0; k < n; ++k) worst_oracle = std::max(worst_oracle, std::abs(r.map.at(h, k) - o.alpha[h][k]));
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
      std::vector<double> v;
      for (std::size_t k : perm)
        for (std::size_t j = 0; j < d; ++j) v.push_back(bag.at(k, j));
      auto q = pool_attention(Tensor(Shape{n, d}, v), p, t);
      worst_perm = std::max(worst_perm, max_abs_diff(q.slide_vector.values(), r.slide_vector.values()));
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t k = 0; k < n; ++k)
          worst_perm = std::max(worst_perm, std::abs(q.map.at(h, k) - r.map.at(h, perm[k])));
    }
  }
  return {worst_oracle < 1e-12 && worst_perm < 1e-9,
          "100 cases, max oracle diff " + fmt(worst_oracle) + " (limit 1e-12); 5000 permutations, max diff " +
              fmt(worst_perm) + " (limit 1e-9)"};
}

// ---- multi-task accumulation ----------------------------------------------

Bag random_labeled_bag(Rng& rng, std::size_t width, const std::string& task, int label) {
  Bag b;
  b.slide_id = "b";
  b.width = width;
  b.labels = {{task, label}};
  const std::size_t n = 1 + rng.below(12);
  for (std::size_t i = 0; i < n * width; ++i) b.values.push_back(rng.normal());
  for (std::size_t i = 0; i < n; ++i) b.instance_ids.push_back(i);
  return b;
}

// One tape over every bag's weighted loss, one backward, one AdamW step.
void summed_loss_step(MultiTaskModel& model, const std::map<std::string, std::vector<Bag>>& batch,
                      const TaskRegistry& reg, OptimizerState& opt, const AdamWConfig& cfg, Rng& dropout) {
  model.zero_grad();
  Tape tape;
  Tensor total = Tensor::scalar(0.0);
  for (const auto& spec : reg) {
    const auto& bags = batch.at(spec.task_id);
    for (const Bag& bag : bags) {
      auto fwd = model.forward_bag(spec.task_id, bag.tensor(), Mode::kTrain, dropout, tape);
      const int y = bag.labels.at(spec.task_id);
      Tensor ce = cross_entropy_logits(fwd.logits, std::span<const int>(&y, 1));
      total = add(total, scale(ce, spec.loss_weight / static_cast<double>(bags.size())));
    }
  }
  tape.backward(total);
  adamw_step(model.parameters(), opt, cfg);
}

Outcome mtl_accumulation() {
  double worst = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    Rng rng(3000 + trial);
    TaskRegistry reg;
    reg.add({"a", TaskKind::kBinary, 2, rng.uniform(0.2, 2.0), ""});
    reg.add({"b", TaskKind::kMulticlass, 4, rng.uniform(0.2, 2.0), ""});
    reg.add({"c", TaskKind::kBinary, 2, rng.uniform(0.2, 2.0), ""});
    const std::size_t width = 2 + rng.below(7);
    auto m1 = oracle::random_model(rng, width, 4 + rng.below(9), 1 + rng.below(8), reg);
    auto m2 = m1;
    std::map<std::string, std::vector<Bag>> batch;
    for (const auto& t : reg) {
      const std::size_t bags = 1 + rng.below(3);
      for (std::size_t b = 0; b < bags; ++b)
        batch[t.task_id].push_back(random_labeled_bag(rng, width, t.task_id,
                                                      static_cast<int>(rng.below(static_cast<std::uint64_t>(t.num_classes)))));
    }
    AdamWConfig cfg;
    cfg.lr = 1e-2;
    cfg.weight_decay = 0.05;
    OptimizerState o1, o2;
    Rng d1(trial), d2(trial);
    multitask_step(m1, batch, reg, o1, cfg, d1);
    summed_loss_step(m2, batch, reg, o2, cfg, d2);
    auto p1 = m1.parameters();
    auto p2 = m2.parameters();
    for (std::size_t i = 0; i < p1.size(); ++i) worst = std::max(worst, max_abs_diff(p1[i]->value, p2[i]->value));
  }
  return {worst < 1e-12, "20 trials x 3 tasks, max parameter diff " + fmt(worst) + " (limit 1e-12)"};
}

// ---- end-to-end pretraining ------------------------------------------------

struct Pretrained {
  SynthCohort synth;
  TaskSplits splits;
  SplitAssignment assignment;
  ModelConfig model_config;
  TrainResult result;
  double oracle_min_auc = 0;
  double seconds = 0;
};

std::optional<Pretrained> pretrained;

Pretrained& pretrain() {
  if (pretrained) return *pretrained;
  Pretrained p;
  SynthConfig sc;  // defaults: 600 slides, 200 instances, width 32, three tasks, signal fraction 0.1
  p.synth = synth_generate(sc);
  p.oracle_min_auc = 1.0;
  for (const auto& rule : sc.tasks)
    p.oracle_min_auc = std::min(p.oracle_min_auc, oracle::distance_count_auc(p.synth, rule.task_id, sc.noise_sigma));
  const auto& manifest = p.synth.cohort.manifest;
  p.assignment = make_patient_splits(manifest, {0.7, 0.15, 0.15}, 1).assignment;
  p.splits = task_view(p.assignment, manifest);
  MultiTaskModel model(p.model_config, manifest.registry);
  Rng init(derive_seed(1, 0x30de1));
  model.initialize(init);
  TrainConfig tc;
  tc.seed = 1;
  tc.epochs = 100;
  tc.patience = 5;
  tc.adamw.lr = 1e-3;
  tc.bags_per_task = 4;
  const auto t0 = Clock::now();
  p.result = train(model, manifest.registry, p.synth.cohort, p.splits, tc);
  p.seconds = seconds_since(t0);
  pretrained = std::move(p);
  return *pretrained;
}

Outcome end_to_end() {
  auto& p = pretrain();
  std::string detail = "oracle AUC min " + fmt(p.oracle_min_auc, 4) + " (>= 0.97); best epoch " +
                       std::to_string(p.result.best_epoch) + " of " +
                       std::to_string(p.result.log.entries.back().epoch) + ", val AUC";
  bool pass = p.oracle_min_auc >= 0.97 && p.seconds < 600.0 && p.result.best_epoch >= 1 &&
              p.result.log.entries.back().epoch <= 100;
  for (const auto& e : p.result.log.entries) {
    if (e.epoch != p.result.best_epoch || e.split != "val") continue;
    detail += " " + e.task_id + "=" + fmt(e.metric, 4);
    pass = pass && e.metric >= 0.90;
  }
  return {pass, detail + " (>= 0.90); " + fmt(p.seconds, 4) + " s (limit 600 s)"};
}

// ---- explainability --------------------------------------------------------

Outcome explainability() {
  auto& p = pretrain();
  const auto& manifest = p.synth.cohort.manifest;
  MultiTaskModel model(p.model_config, manifest.registry);
  load_checkpoint(p.result.best, model, nullptr);
  const double fraction = SynthConfig{}.signal_fraction;
  std::string detail;
  bool pass = true;
  for (const auto& spec : manifest.registry) {
    double mass = 0;
    std::size_t slides = 0;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
      const auto& rec = manifest.records[i];
      const auto& signal = p.synth.signal.at(spec.task_id)[i];
      if (p.assignment.at(rec.slide_id) != Split::kTest || signal.empty()) continue;
      auto e = attention_export(model, whole_bag(rec, p.synth.cohort.features[i]), spec.task_id);
      const auto mean = e.map.mean_over_heads();
      for (std::size_t k : signal) mass += mean[k];
      ++slides;
    }
    const double avg = mass / static_cast<double>(slides);
    detail += spec.task_id + "=" + fmt(avg, 4) + " ";
    pass = pass && avg >= 2.0 * fraction;
  }
  return {pass, "mean attention mass on signal instances of test slides: " + detail + "(>= " + fmt(2 * fraction) + ")"};
}

// ---- fine-tuning -----------------------------------------------------------

Outcome finetune_direction() {
  auto& p = pretrain();
  const auto t0 = Clock::now();
  int wins = 0, ties = 0;
  std::string detail;
  for (std::uint64_t seed = 101; seed <= 105; ++seed) {
    SynthConfig down;
    down.seed = seed;
    down.n_slides = 120;
    down.tasks = {{"downstream", 2, 6.0, 1.0, 0}};
    auto d = synth_generate(down);
    auto splits = make_patient_splits(d.cohort.manifest, {0.4, 0.1, 0.5}, seed).assignment;
    const auto& task = d.cohort.manifest.registry.at("downstream");
    FinetuneConfig fc;  // 4 repeats, 15 epochs, lr 1e-4
    fc.seed = seed * 100;
    fc.init = AggInit::kPretrained;
    const double pre = finetune_protocol(p.result.best, d.cohort, splits, task, fc).report.at("auc").mean();
    fc.init = AggInit::kRandom;
    const double rnd = finetune_protocol(p.result.best, d.cohort, splits, task, fc).report.at("auc").mean();
    wins += pre >= rnd;
    ties += pre == rnd;
    detail += " seed " + std::to_string(seed) + ": " + fmt(pre, 4) + " vs " + fmt(rnd, 4) + ";";
  }
  return {wins >= 4, "pretrained >= random in " + std::to_string(wins) + "/5 cohorts (need 4), " +
                         std::to_string(ties) + " exact ties;" + detail + " " + fmt(seconds_since(t0), 4) + " s"};
}

// ---- metrics ---------------------------------------------------------------

Outcome metric_oracles() {
  Rng rng(4000);
  std::size_t auc_mismatch = 0;
  double worst_kappa = 0;
  for (int c = 0; c < 1000; ++c) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    const bool coarse = rng.below(2) == 0;  // many ties
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse ? static_cast<double>(rng.below(5)) : rng.normal();
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0;
    y[1] = 1;
    auc_mismatch += metric_auc(s, y) != oracle::pairwise_auc(s, y);
  }
  for (int c = 0; c < 1000; ++c) {
    const int k = 2 + static_cast<int>(rng.below(5));
    const std::size_t n = 2 + rng.below(199);
    std::vector<int> pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
      pred[i] = rng.below(3) == 0 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(k))) : truth[i];
    }
    pred[0] = 0;
    pred[1] = k - 1;
    worst_kappa = std::max(worst_kappa, std::abs(metric_quadratic_kappa(pred, truth, k) - oracle::confusion_kappa(pred, truth, k)));
  }
  // Confusion matrix o_ij = r_i c_j is exactly the chance matrix.
  double worst_chance = 0;
  for (int c = 0; c < 100; ++c) {
    const int k = 2 + static_cast<int>(rng.below(4));
    std::vector<int> rows(static_cast<std::size_t>(k)), cols(static_cast<std::size_t>(k)), pred, truth;
    for (auto& r : rows) r = 1 + static_cast<int>(rng.below(4));
    for (auto& v : cols) v = 1 + static_cast<int>(rng.below(4));
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j)
        for (int m = 0; m < rows[static_cast<std::size_t>(i)] * cols[static_cast<std::size_t>(j)]; ++m) {
          truth.push_back(i);
          pred.push_back(j);
        }
    worst_chance = std::max(worst_chance, std::abs(metric_quadratic_kappa(pred, truth, k)));
  }
  return {auc_mismatch == 0 && worst_kappa < 1e-12 && worst_chance < 1e-12,
          "AUC mismatches " + std::to_string(auc_mismatch) + "/1000 (exact); kappa max diff " + fmt(worst_kappa) +
              " (limit 1e-12); chance kappa max |k| " + fmt(worst_chance) + " (limit 1e-12)"};
}

// ---- energy ----------------------------------------------------------------

Outcome energy_figures() {
  auto e = energy_estimate(500, 400, 0.35);
  return {e.energy_kwh == 200.0 && e.co2_low_kg == 70.0 && e.co2_high_kg == 70.0,
          "500 h x 400 W = " + fmt(e.energy_kwh, 17) + " kWh, at 0.35 kg/kWh " + fmt(e.co2_low_kg, 17) + " kg (exact)"};
}

// ---- coherence and determinism ---------------------------------------------

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "tcv2");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome coherence_and_determinism() {
  std::size_t mismatches = 0, violations = 0;
  for (std::uint64_t c = 0; c < 500; ++c) {
    Rng rng(5000 + c);
    TaskSplits splits;
    const std::size_t tasks = 1 + rng.below(5), slides = 1 + rng.below(30);
    for (std::size_t t = 0; t < tasks; ++t)
      for (std::size_t s = 0; s < slides; ++s)
        if (rng.below(4) != 0)
          splits["t" + std::to_string(t)]["s" + std::to_string(s)] = static_cast<Split>(rng.below(3));
    std::set<oracle::Violation> got;
    for (const auto& v : check_split_coherence(splits).violations) got.insert({v.held_out_task, v.training_task, v.slide_id});
    const auto want = oracle::coherence(splits);
    mismatches += got != want;
    violations += want.size();
  }

  const auto dir = fs::temp_directory_path() / "tcv2_acceptance_determinism";
  fs::remove_all(dir);
  bool ran = run_cli({"synth", "--out", (dir / "cohort").string(), "--slides", "60", "--instances", "40", "--width",
                      "8", "--signal-fraction", "0.2"}) == 0;
  for (const char* name : {"run1", "run2"})
    ran = ran && run_cli({"train", "--manifest", (dir / "cohort" / "manifest.csv").string(), "--out",
                          (dir / name).string(), "--seed", "3", "--epochs", "3", "--hidden", "8", "--embed", "8",
                          "--heads", "2", "--lr", "0.001", "--bag-min", "8", "--bag-max", "24", "--val-bag", "24"}) == 0;
  bool identical = ran;
  std::size_t bytes = 0;
  for (const char* file : {"training_log.csv", "best.ckpt", "last.ckpt"}) {
    const auto a = slurp(dir / "run1" / file), b = slurp(dir / "run2" / file);
    identical = identical && !a.empty() && a == b;
    bytes += a.size();
  }
  return {mismatches == 0 && identical,
          "500 random split fixtures (" + std::to_string(violations) + " violations), mismatches " +
              std::to_string(mismatches) + "; two train runs " + (identical ? "bit-identical" : "DIFFER") + " over " +
              std::to_string(bytes) + " bytes of log and checkpoints"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, Outcome (*)()>> criteria{
      {"gradient-suite", gradient_suite},
      {"pooling-oracle", pooling_oracle},
      {"mtl-accumulation", mtl_accumulation},
      {"end-to-end-pretraining", end_to_end},
      {"finetune-directionality", finetune_direction},
      {"metric-oracles", metric_oracles},
      {"explainability-signal", explainability},
      {"energy-figures", energy_figures},
      {"coherence-determinism", coherence_and_determinism},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    Outcome o{false, ""};
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
