#pragma once

// Bag sampling from slides and feature-space augmentation.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/features.hpp"
#include "tcv2/manifest.hpp"
#include "tcv2/rng.hpp"
#include "tcv2/tensor.hpp"

namespace tcv2 {

struct Bag {
  std::string slide_id;
  std::string patient_id;
  std::map<std::string, int> labels;
  std::size_t width = 0;
  std::vector<double> values;               // [size x width]
  std::vector<std::size_t> instance_ids;    // row index within the slide
  std::vector<PatchCoord> coords;           // empty or one per instance

  std::size_t size() const { return instance_ids.size(); }

  Tensor tensor() const {
    if (instance_ids.empty()) throw ContractError("empty bag for slide " + slide_id);
    return Tensor(Shape{instance_ids.size(), width}, values);
  }
};

enum class SampleMode { kTrain, kVal };

struct BagSizes {
  std::size_t min = 64;
  std::size_t max = 128;
  std::size_t val = 128;
  std::uint64_t val_seed = 0x7a1;  // epoch-independent
};

namespace detail {

inline Bag gather(const SlideRecord& rec, const FeatureMatrix& fm, const std::vector<std::size_t>& rows) {
  Bag b;
  b.slide_id = rec.slide_id;
  b.patient_id = rec.patient_id;
  b.labels = rec.labels;
  b.width = fm.cols;
  b.instance_ids = rows;
  b.values.reserve(rows.size() * fm.cols);
  for (std::size_t r : rows)
    for (std::size_t c = 0; c < fm.cols; ++c) b.values.push_back(fm.at(r, c));
  if (fm.has_coords())
    for (std::size_t r : rows) b.coords.push_back(fm.coords[r]);
  return b;
}

// `k` rows: without replacement (ascending order) if the slide has enough,
// otherwise with replacement in draw order.
inline std::vector<std::size_t> draw_rows(std::size_t available, std::size_t k, Rng& rng) {
  std::vector<std::size_t> rows;
  if (available >= k) {
    std::vector<std::size_t> idx(available);
    for (std::size_t i = 0; i < available; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(available - i)]);
    rows.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(rows.begin(), rows.end());
  } else {
    rows.reserve(k);
    for (std::size_t i = 0; i < k; ++i) rows.push_back(rng.below(available));
  }
  return rows;
}

}  // namespace detail

// Train: size uniform in [min, max]. Val: exactly sizes.val instances chosen by
// a stream seeded from (val_seed, slide_id) only, so repeated calls agree.
inline Bag sample_bag(const SlideRecord& rec, const FeatureMatrix& fm, const BagSizes& sizes, SampleMode mode, Rng& rng) {
  if (fm.rows == 0) throw DataError("slide " + rec.slide_id + " has no instances");
  if (sizes.min == 0 || sizes.min > sizes.max) throw ConfigError("bag size range must satisfy 1 <= min <= max");
  if (mode == SampleMode::kVal) {
    if (sizes.val == 0) throw ConfigError("validation bag size must be >= 1");
    Rng val_rng(derive_seed(sizes.val_seed, stable_hash(rec.slide_id)));
    return detail::gather(rec, fm, detail::draw_rows(fm.rows, sizes.val, val_rng));
  }
  const std::size_t k = sizes.min + rng.below(sizes.max - sizes.min + 1);
  return detail::gather(rec, fm, detail::draw_rows(fm.rows, k, rng));
}

// Every instance of the slide in stored order; used for attention export.
inline Bag whole_bag(const SlideRecord& rec, const FeatureMatrix& fm) {
  if (fm.rows == 0) throw DataError("slide " + rec.slide_id + " has no instances");
  std::vector<std::size_t> rows(fm.rows);
  for (std::size_t i = 0; i < fm.rows; ++i) rows[i] = i;
  return detail::gather(rec, fm, rows);
}

struct AugmentConfig {
  bool enabled = false;
  double feature_jitter_sigma = 0.0;
  double instance_drop_p = 0.0;

  void validate() const {
    if (!(feature_jitter_sigma >= 0.0)) throw ConfigError("feature_jitter_sigma must be >= 0");
    if (!(instance_drop_p >= 0.0 && instance_drop_p < 1.0)) throw ConfigError("instance_drop_p must be in [0, 1)");
  }
};

// Per instance: drop with probability instance_drop_p, then add N(0, sigma^2)
// to every feature. At least one instance always survives (the first one
// drawn for dropping is kept if all would go). Labels are untouched.
inline Bag augment_bag(const Bag& bag, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  if (!cfg.enabled) return bag;
  const std::size_t n = bag.size(), d = bag.width;
  std::vector<bool> keep(n, true);
  std::size_t kept = n;
  if (cfg.instance_drop_p > 0.0) {
    for (std::size_t i = 0; i < n; ++i)
      if (rng.uniform() < cfg.instance_drop_p) {
        keep[i] = false;
        --kept;
      }
    if (kept == 0 && n > 0) {
      keep[0] = true;
      kept = 1;
    }
  }
  Bag out;
  out.slide_id = bag.slide_id;
  out.patient_id = bag.patient_id;
  out.labels = bag.labels;
  out.width = d;
  out.values.reserve(kept * d);
  for (std::size_t i = 0; i < n; ++i) {
    if (!keep[i]) continue;
    out.instance_ids.push_back(bag.instance_ids[i]);
    if (!bag.coords.empty()) out.coords.push_back(bag.coords[i]);
    for (std::size_t j = 0; j < d; ++j) {
      double v = bag.values[i * d + j];
      if (cfg.feature_jitter_sigma > 0.0) v += cfg.feature_jitter_sigma * rng.normal();
      out.values.push_back(v);
    }
  }
  return out;
}

}  // namespace tcv2
