#pragma once

// Patient-level train/val/test splits and cross-task coherence checking.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/manifest.hpp"
#include "tcv2/rng.hpp"
#include "tcv2/text.hpp"

namespace tcv2 {

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw DataError("unknown split '" + s + "'");
}

using SplitAssignment = std::map<std::string, Split>;  // slide_id -> split
using TaskSplits = std::map<std::string, SplitAssignment>;  // task_id -> its slides

struct SplitFractions {
  double train = 0.8;
  double val = 0.2;
  double test = 0.0;

  std::array<double, 3> as_array() const { return {train, val, test}; }
};

struct SplitResult {
  SplitAssignment assignment;
  std::vector<std::string> warnings;
};

// Shuffle patients by seed, then give each patient (all of their slides) to
// the split with the largest remaining slide deficit. Ties go to the earlier
// split (train, val, test).
inline SplitResult make_patient_splits(const Manifest& manifest, const SplitFractions& fractions, std::uint64_t seed) {
  const auto f = fractions.as_array();
  for (double x : f)
    if (!(x >= 0.0)) throw ConfigError("split fractions must be non-negative");
  if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

  std::map<std::string, std::vector<std::string>> by_patient;
  std::vector<std::string> patients;
  for (const auto& r : manifest.records) {
    auto& slides = by_patient[r.patient_id];
    if (slides.empty()) patients.push_back(r.patient_id);
    slides.push_back(r.slide_id);
  }
  std::sort(patients.begin(), patients.end());
  Rng rng(seed);
  for (std::size_t i = patients.size(); i > 1; --i) std::swap(patients[i - 1], patients[rng.below(i)]);

  const double total = static_cast<double>(manifest.records.size());
  std::array<double, 3> assigned{0, 0, 0};
  SplitResult out;
  for (const auto& pid : patients) {
    if (patients.size() == 1) {
      for (const auto& sid : by_patient[pid]) out.assignment[sid] = Split::kTrain;
      break;
    }
    std::size_t best = 0;
    double best_deficit = -1e300;
    for (std::size_t s = 0; s < 3; ++s) {
      if (f[s] == 0.0) continue;
      const double deficit = f[s] * total - assigned[s];
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    for (const auto& sid : by_patient[pid]) out.assignment[sid] = static_cast<Split>(best);
    assigned[best] += static_cast<double>(by_patient[pid].size());
  }

  for (const auto& t : manifest.registry) {
    std::set<Split> used;
    for (const auto& r : manifest.records)
      if (r.label(t.task_id)) used.insert(out.assignment[r.slide_id]);
    if (used.size() == 1)
      out.warnings.push_back("task " + t.task_id + ": all labeled slides fall in the " + to_string(*used.begin()) +
                             " split");
  }
  return out;
}

// Per-task view of a global assignment: each task sees its labeled slides.
inline TaskSplits task_view(const SplitAssignment& global, const Manifest& manifest) {
  TaskSplits out;
  for (const auto& t : manifest.registry) {
    auto& view = out[t.task_id];
    for (const auto& r : manifest.records) {
      if (!r.label(t.task_id)) continue;
      auto it = global.find(r.slide_id);
      if (it == global.end()) throw DataError("slide " + r.slide_id + " has no split assignment");
      view[r.slide_id] = it->second;
    }
  }
  return out;
}

struct CoherenceViolation {
  std::string held_out_task;  // the slide is val/test here
  std::string training_task;  // ... and train here
  std::string slide_id;
  Split held_out_split = Split::kVal;

  friend bool operator==(const CoherenceViolation&, const CoherenceViolation&) = default;
  friend auto operator<=>(const CoherenceViolation& a, const CoherenceViolation& b) {
    return std::tie(a.held_out_task, a.training_task, a.slide_id) <=> std::tie(b.held_out_task, b.training_task, b.slide_id);
  }
};

struct CoherenceReport {
  std::vector<CoherenceViolation> violations;
  bool coherent() const { return violations.empty(); }

  std::string to_string() const {
    std::ostringstream os;
    for (const auto& v : violations)
      os << "slide " << v.slide_id << " is " << tcv2::to_string(v.held_out_split) << " for " << v.held_out_task
         << " but train for " << v.training_task << '\n';
    return os.str();
  }
};

// Every (A, B, slide) with slide in val/test of A and in train of B, A != B.
// Sorted by (A, B, slide).
inline CoherenceReport check_split_coherence(const TaskSplits& splits) {
  std::map<std::string, std::set<std::string>> train_of;
  for (const auto& [task, assign] : splits)
    for (const auto& [slide, s] : assign)
      if (s == Split::kTrain) train_of[task].insert(slide);
  CoherenceReport rep;
  for (const auto& [a, assign] : splits) {
    for (const auto& [slide, s] : assign) {
      if (s == Split::kTrain) continue;
      for (const auto& [b, train] : train_of)
        if (b != a && train.count(slide)) rep.violations.push_back({a, b, slide, s});
    }
  }
  std::sort(rep.violations.begin(), rep.violations.end());
  return rep;
}

// Splits file: either "slide_id,split" (global) or "task_id,slide_id,split".
inline std::string splits_to_csv(const SplitAssignment& a) {
  std::ostringstream os;
  os << "slide_id,split\n";
  for (const auto& [slide, s] : a) os << slide << ',' << to_string(s) << '\n';
  return os.str();
}

inline std::string splits_to_csv(const TaskSplits& t) {
  std::ostringstream os;
  os << "task_id,slide_id,split\n";
  for (const auto& [task, a] : t)
    for (const auto& [slide, s] : a) os << task << ',' << slide << ',' << to_string(s) << '\n';
  return os.str();
}

struct ParsedSplits {
  bool per_task = false;
  SplitAssignment global;
  TaskSplits tasks;
};

inline ParsedSplits parse_splits_csv(const std::string& text, const std::string& origin = "<splits>") {
  ParsedSplits out;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line[0] == '#') continue;
    auto cells = split(line, ',');
    for (auto& c : cells) c = trim(c);
    auto fail = [&](const std::string& msg) { throw DataError(origin + ":" + std::to_string(line_no) + ": " + msg); };
    if (!header) {
      if (cells == std::vector<std::string>{"slide_id", "split"}) out.per_task = false;
      else if (cells == std::vector<std::string>{"task_id", "slide_id", "split"}) out.per_task = true;
      else fail("header must be 'slide_id,split' or 'task_id,slide_id,split'");
      header = true;
      continue;
    }
    if (cells.size() != (out.per_task ? 3u : 2u)) fail("wrong number of cells");
    try {
      if (out.per_task) out.tasks[cells[0]][cells[1]] = parse_split(cells[2]);
      else out.global[cells[0]] = parse_split(cells[1]);
    } catch (const DataError& e) {
      fail(e.what());
    }
  }
  return out;
}

inline ParsedSplits read_splits_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open splits file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_splits_csv(ss.str(), path);
}

}  // namespace tcv2
