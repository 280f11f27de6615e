#pragma once

// Synthetic multi-task bag cohorts with known signal instances.
//
// Every instance is background noise sigma * N(0, I). For each task t and
// each positive class k > 0 there is a concept vector c_tk. A slide of class
// k for task t has round(signal_fraction * N) of its instances shifted by
// c_tk; those instances are the ground-truth evidence for the label.
// Tasks share the background, and concept vectors come from a separate seed
// so that several cohorts can share the same concepts.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/features.hpp"
#include "tcv2/manifest.hpp"
#include "tcv2/rng.hpp"
#include "tcv2/tasks.hpp"

namespace tcv2 {

struct SynthTaskRule {
  std::string task_id;
  int num_classes = 2;
  double concept_scale = 6.0;   // |c_tk|
  double labeled_fraction = 1.0;
  std::size_t concept_index = 0;  // which concept family to draw from
};

struct SynthConfig {
  std::size_t n_slides = 600;
  std::size_t instances_per_slide = 200;
  std::size_t input_width = 32;
  std::vector<SynthTaskRule> tasks{{"task_a", 2, 6.0, 1.0, 0}, {"task_b", 2, 6.0, 1.0, 1}, {"task_c", 2, 6.0, 1.0, 2}};
  double signal_fraction = 0.1;
  double noise_sigma = 1.0;
  std::size_t slides_per_patient = 2;
  std::uint64_t seed = 1;
  std::uint64_t concept_seed = 7;
  std::uint32_t patch_size = 256;
};

struct SynthCohort {
  Cohort cohort;
  // concept[task_id][k-1] for classes k >= 1
  std::map<std::string, std::vector<std::vector<double>>> concepts;
  // signal[task_id][slide index] = instance indices carrying that task's concept
  std::map<std::string, std::vector<std::vector<std::size_t>>> signal;
  // the class each slide was generated with (also for unlabeled slides)
  std::map<std::string, std::vector<int>> generated_class;
};

// Concept vector k (>= 1) of concept family `family`: a random direction
// scaled to `scale`. Depends only on (concept_seed, family, k, width).
inline std::vector<double> synth_concept(std::uint64_t concept_seed, std::size_t family, int k, std::size_t width,
                                         double scale) {
  Rng rng(derive_seed(concept_seed, family, static_cast<std::uint64_t>(k), width));
  std::vector<double> v(width);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x *= scale / norm;
  return v;
}

inline SynthCohort synth_generate(const SynthConfig& cfg) {
  if (cfg.n_slides == 0 || cfg.instances_per_slide == 0 || cfg.input_width == 0)
    throw ConfigError("synthetic cohort needs slides, instances and a feature width");
  if (!(cfg.signal_fraction > 0.0 && cfg.signal_fraction <= 1.0)) throw ConfigError("signal_fraction must be in (0, 1]");
  if (!(cfg.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (cfg.slides_per_patient == 0) throw ConfigError("slides_per_patient must be >= 1");

  SynthCohort out;
  Manifest& m = out.cohort.manifest;
  m.feature_width = cfg.input_width;
  for (const auto& rule : cfg.tasks) {
    TaskSpec spec{rule.task_id, rule.num_classes == 2 ? TaskKind::kBinary : TaskKind::kMulticlass, rule.num_classes, 1.0,
                  "synthetic"};
    m.registry.add(spec);
  }

  const std::size_t n = cfg.n_slides;
  const std::size_t per_slide = cfg.instances_per_slide;
  const std::size_t n_signal = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.signal_fraction * per_slide)));

  Rng label_rng(derive_seed(cfg.seed, 0x1abe1));
  for (std::size_t s = 0; s < n; ++s) {
    SlideRecord r;
    char buf[32];
    std::snprintf(buf, sizeof buf, "S%05zu", s);
    r.slide_id = buf;
    std::snprintf(buf, sizeof buf, "P%05zu", s / cfg.slides_per_patient);
    r.patient_id = buf;
    r.feature_file = "features/" + r.slide_id + ".tcf";
    r.num_instances = per_slide;
    m.records.push_back(std::move(r));
  }

  // Balanced classes per task: shuffled slide order, class = rank mod C.
  for (const auto& rule : cfg.tasks) {
    const auto c = static_cast<std::size_t>(rule.num_classes);
    const auto labeled = static_cast<std::size_t>(std::lround(rule.labeled_fraction * static_cast<double>(n)));
    if (!(rule.labeled_fraction > 0.0 && rule.labeled_fraction <= 1.0))
      throw ConfigError("task " + rule.task_id + ": labeled_fraction must be in (0, 1]");
    if (c < 2 || labeled < 2 * c)
      throw ConfigError("task " + rule.task_id + ": infeasible class balance, need >= 2 labeled slides per class");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[label_rng.below(i)]);
    auto& cls = out.generated_class[rule.task_id];
    cls.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) cls[order[i]] = static_cast<int>(i % c);
    std::vector<std::size_t> label_order = order;
    for (std::size_t i = n; i > 1; --i) std::swap(label_order[i - 1], label_order[label_rng.below(i)]);
    std::vector<bool> is_labeled(n, false);
    // Take labeled slides class by class so every class keeps >= 2 labels.
    std::vector<std::size_t> per_class(c, 0);
    std::size_t taken = 0;
    for (std::size_t round = 0; taken < labeled; ++round) {
      for (std::size_t idx : label_order) {
        if (taken >= labeled) break;
        if (is_labeled[idx] || per_class[static_cast<std::size_t>(cls[idx])] > round) continue;
        is_labeled[idx] = true;
        ++per_class[static_cast<std::size_t>(cls[idx])];
        ++taken;
      }
    }
    for (std::size_t i = 0; i < n; ++i)
      if (is_labeled[i]) m.records[i].labels[rule.task_id] = cls[i];
    auto& concepts = out.concepts[rule.task_id];
    for (int k = 1; k < rule.num_classes; ++k)
      concepts.push_back(synth_concept(cfg.concept_seed, rule.concept_index, k, cfg.input_width, rule.concept_scale));
    out.signal[rule.task_id].assign(n, {});
  }

  const std::size_t grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(per_slide))));
  const std::size_t d = cfg.input_width;
  for (std::size_t s = 0; s < n; ++s) {
    Rng rng(derive_seed(cfg.seed, 0x511de, s));
    std::vector<double> x(per_slide * d);
    for (auto& v : x) v = cfg.noise_sigma * rng.normal();
    for (const auto& rule : cfg.tasks) {
      const int k = out.generated_class[rule.task_id][s];
      if (k == 0) continue;
      std::vector<std::size_t> idx(per_slide);
      for (std::size_t i = 0; i < per_slide; ++i) idx[i] = i;
      for (std::size_t i = 0; i < n_signal; ++i) std::swap(idx[i], idx[i + rng.below(per_slide - i)]);
      idx.resize(n_signal);
      std::sort(idx.begin(), idx.end());
      const auto& cvec = out.concepts[rule.task_id][static_cast<std::size_t>(k - 1)];
      for (std::size_t i : idx)
        for (std::size_t j = 0; j < d; ++j) x[i * d + j] += cvec[j];
      out.signal[rule.task_id][s] = std::move(idx);
    }
    FeatureMatrix fm;
    fm.rows = per_slide;
    fm.cols = d;
    fm.values.assign(x.begin(), x.end());
    fm.coords.resize(per_slide);
    for (std::size_t i = 0; i < per_slide; ++i)
      fm.coords[i] = {static_cast<std::uint32_t>((i % grid) * cfg.patch_size),
                      static_cast<std::uint32_t>((i / grid) * cfg.patch_size)};
    out.cohort.features.push_back(std::move(fm));
  }
  return out;
}

// Writes <dir>/manifest.csv, <dir>/manifest.tasks, <dir>/features/*.tcf and
// <dir>/signal.csv (ground-truth signal instances).
inline std::filesystem::path write_synth_cohort(const SynthCohort& synth, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "features");
  const Manifest& m = synth.cohort.manifest;
  FeatureStore store(dir);
  for (std::size_t i = 0; i < m.records.size(); ++i) store.write(m.records[i].slide_id, synth.cohort.features[i], m.records[i].feature_file);
  const auto manifest_path = dir / "manifest.csv";
  write_manifest(manifest_path, m);
  std::ofstream sig(dir / "signal.csv");
  sig << "task_id,slide_id,instance_index\n";
  for (const auto& [task, per_slide] : synth.signal)
    for (std::size_t s = 0; s < per_slide.size(); ++s)
      for (std::size_t i : per_slide[s]) sig << task << ',' << m.records[s].slide_id << ',' << i << '\n';
  if (!sig) throw DataError("cannot write signal.csv in " + dir.string());
  return manifest_path;
}

}  // namespace tcv2
