#pragma once

// Classification metrics: ROC AUC (Mann-Whitney form), one-vs-rest macro AUC,
// balanced accuracy, Cohen's quadratic kappa, and mean/std summaries.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tcv2/errors.hpp"

namespace tcv2 {

// P(score of a random positive > score of a random negative), ties count 1/2.
// Computed from average ranks, so it is exact for tied scores.
inline double metric_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("metric_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0;
  for (int l : labels) {
    if (l == 1) ++pos;
    else if (l == 0) ++neg;
    else throw LabelError("metric_auc: labels must be 0 or 1, got " + std::to_string(l));
  }
  if (pos == 0 || neg == 0) throw MetricUndefinedError("metric_auc: both classes must be present");
  // Twice the positive rank sum keeps tied average ranks integral, so every
  // intermediate below is an exact integer or half-integer in a double.
  double twice_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double twice_avg_rank = static_cast<double>(i + 1 + j);  // 2 * mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) twice_rank_sum += twice_avg_rank;
    i = j;
  }
  const double u = twice_rank_sum / 2 - pos * (pos + 1) / 2;
  return u / (pos * neg);
}

// Macro average of one-vs-rest AUCs over classes present in `truth` (and
// absent from at least one sample). `probs` is row-major [n x num_classes].
inline double metric_auc_ovr(std::span<const double> probs, std::span<const int> truth, int num_classes) {
  const auto c = static_cast<std::size_t>(num_classes);
  if (probs.size() != truth.size() * c) throw DimensionError("metric_auc_ovr: probs must be [n x C]");
  if (num_classes == 2) {
    std::vector<double> s(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) s[i] = probs[i * 2 + 1];
    return metric_auc(s, truth);
  }
  double total = 0;
  int counted = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::vector<double> s(truth.size());
    std::vector<int> y(truth.size());
    std::size_t pos = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      s[i] = probs[i * c + k];
      y[i] = truth[i] == static_cast<int>(k) ? 1 : 0;
      pos += static_cast<std::size_t>(y[i]);
    }
    if (pos == 0 || pos == truth.size()) continue;
    total += metric_auc(s, y);
    ++counted;
  }
  if (counted == 0) throw MetricUndefinedError("metric_auc_ovr: need at least two classes in truth");
  return total / counted;
}

// Mean per-class recall over classes that occur in `truth`.
inline double metric_balanced_accuracy(std::span<const int> pred, std::span<const int> truth, int num_classes) {
  if (pred.size() != truth.size()) throw DimensionError("balanced accuracy: pred and truth differ in length");
  if (truth.empty()) throw MetricUndefinedError("balanced accuracy: empty input");
  std::vector<double> hit(static_cast<std::size_t>(num_classes), 0), count(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes) throw LabelError("balanced accuracy: truth out of range");
    count[static_cast<std::size_t>(truth[i])] += 1;
    if (pred[i] == truth[i]) hit[static_cast<std::size_t>(truth[i])] += 1;
  }
  double sum = 0;
  int present = 0;
  for (std::size_t k = 0; k < count.size(); ++k) {
    if (count[k] == 0) continue;
    sum += hit[k] / count[k];
    ++present;
  }
  return sum / present;
}

// 1 - sum(w O) / sum(w E), w_ij = (i - j)^2 / (C - 1)^2, E = outer(row, col) / n.
inline double metric_quadratic_kappa(std::span<const int> pred, std::span<const int> truth, int num_classes) {
  if (pred.size() != truth.size()) throw DimensionError("quadratic kappa: pred and truth differ in length");
  if (truth.empty()) throw MetricUndefinedError("quadratic kappa: empty input");
  if (num_classes < 2) throw MetricUndefinedError("quadratic kappa: needs at least 2 classes");
  const auto c = static_cast<std::size_t>(num_classes);
  std::vector<double> observed(c * c, 0.0), rows(c, 0.0), cols(c, 0.0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes || pred[i] < 0 || pred[i] >= num_classes)
      throw LabelError("quadratic kappa: value out of range [0, " + std::to_string(num_classes) + ")");
    const auto t = static_cast<std::size_t>(truth[i]), p = static_cast<std::size_t>(pred[i]);
    observed[t * c + p] += 1;
    rows[t] += 1;
    cols[p] += 1;
  }
  const double n = static_cast<double>(truth.size());
  const double denom_w = static_cast<double>((c - 1) * (c - 1));
  double num = 0, den = 0;
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(i) - static_cast<double>(j);
      const double w = d * d / denom_w;
      num += w * observed[i * c + j];
      den += w * rows[i] * cols[j] / n;
    }
  if (den == 0.0) throw MetricUndefinedError("quadratic kappa: zero expected disagreement");
  return 1.0 - num / den;
}

inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Mean and population standard deviation over repeats; raw values kept.
struct MetricSummary {
  std::vector<double> raw;

  double mean() const {
    if (raw.empty()) return std::nan("");
    double s = 0;
    for (double x : raw) s += x;
    return s / static_cast<double>(raw.size());
  }
  double std() const {
    if (raw.size() < 2) return raw.empty() ? std::nan("") : 0.0;
    const double m = mean();
    double s = 0;
    for (double x : raw) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(raw.size()));
  }
  std::size_t n_repeats() const { return raw.size(); }
};

struct MetricReport {
  std::map<std::string, MetricSummary> metrics;

  void add(const std::string& name, double value) { metrics[name].raw.push_back(value); }
  const MetricSummary& at(const std::string& name) const {
    auto it = metrics.find(name);
    if (it == metrics.end()) throw MetricUndefinedError("no metric '" + name + "' in report");
    return it->second;
  }
};

}  // namespace tcv2
