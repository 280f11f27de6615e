#pragma once

// Attention map export: CSV rows (head, instance_index, x, y, weight), one
// block per head followed by a "mean" block, and an optional plain PGM raster
// of the mean weights when the patch coordinates lie on a regular grid.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/model.hpp"
#include "tcv2/sampling.hpp"
#include "tcv2/text.hpp"

namespace tcv2 {

struct AttentionExport {
  std::string slide_id;
  AttentionMap map;               // instance_ids hold slide row indices
  std::vector<PatchCoord> coords;  // empty or one per instance

  bool has_coords() const { return !coords.empty(); }
};

inline AttentionExport attention_export(MultiTaskModel& model, const Bag& bag, const std::string& task_id) {
  Tape tape(false);
  Rng unused(0);
  auto fwd = model.forward_bag(task_id, bag.tensor(), Mode::kEval, unused, tape);
  AttentionExport e;
  e.slide_id = bag.slide_id;
  e.map = std::move(fwd.map);
  e.map.instance_ids = bag.instance_ids;
  e.coords = bag.coords;
  return e;
}

inline std::string attention_to_csv(const AttentionExport& e) {
  std::ostringstream os;
  os << "head,instance_index,x,y,weight\n";
  auto row = [&](const std::string& head, std::size_t k, double w) {
    os << head << ',' << e.map.instance_ids[k] << ',';
    if (e.has_coords()) os << e.coords[k].x << ',' << e.coords[k].y;
    else os << ',';
    os << ',' << format_g17(w) << '\n';
  };
  for (std::size_t h = 0; h < e.map.heads; ++h)
    for (std::size_t k = 0; k < e.map.instances; ++k) row(std::to_string(h), k, e.map.at(h, k));
  const auto mean = e.map.mean_over_heads();
  for (std::size_t k = 0; k < e.map.instances; ++k) row("mean", k, mean[k]);
  return os.str();
}

// Reads back the per-head rows; "mean" rows are checked for shape only.
inline AttentionExport parse_attention_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || trim(line) != "head,instance_index,x,y,weight")
    throw DataError("attention CSV must start with 'head,instance_index,x,y,weight'");
  std::map<std::size_t, std::vector<double>> by_head;
  std::vector<std::size_t> ids;
  std::vector<PatchCoord> coords;
  bool any_coords = false;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto c = split(line, ',');
    if (c.size() != 5) throw DataError("attention CSV line " + std::to_string(line_no) + ": expected 5 cells");
    if (c[0] == "mean") continue;
    const auto h = static_cast<std::size_t>(parse_int(c[0], "head"));
    if (h == 0) {
      ids.push_back(static_cast<std::size_t>(parse_int(c[1], "instance_index")));
      if (!c[2].empty()) {
        any_coords = true;
        coords.push_back({static_cast<std::uint32_t>(parse_int(c[2], "x")), static_cast<std::uint32_t>(parse_int(c[3], "y"))});
      }
    }
    by_head[h].push_back(parse_double(c[4], "weight"));
  }
  AttentionExport e;
  e.map.heads = by_head.size();
  e.map.instances = ids.size();
  e.map.instance_ids = ids;
  for (std::size_t h = 0; h < e.map.heads; ++h) {
    auto it = by_head.find(h);
    if (it == by_head.end() || it->second.size() != ids.size())
      throw DataError("attention CSV: head " + std::to_string(h) + " is missing or has the wrong number of rows");
    e.map.weights.insert(e.map.weights.end(), it->second.begin(), it->second.end());
  }
  if (any_coords) e.coords = coords;
  return e;
}

// Plain "P2" graymap of the mean-over-heads weights, one pixel per patch,
// scaled so that the largest weight maps to 255. Weights of repeated
// instances are summed.
inline std::string attention_to_pgm(const AttentionExport& e) {
  if (!e.has_coords()) throw ExportError("raster export needs patch coordinates for slide " + e.slide_id);
  std::set<std::uint32_t> xs, ys;
  for (const auto& p : e.coords) {
    xs.insert(p.x);
    ys.insert(p.y);
  }
  auto step_of = [](const std::set<std::uint32_t>& v) {
    std::uint32_t step = 0;
    for (auto it = std::next(v.begin()); it != v.end(); ++it) {
      const std::uint32_t d = *it - *std::prev(it);
      step = step == 0 ? d : std::min(step, d);
    }
    return step == 0 ? 1u : step;
  };
  const std::uint32_t sx = step_of(xs), sy = step_of(ys);
  const std::uint32_t x0 = *xs.begin(), y0 = *ys.begin();
  for (const auto& p : e.coords)
    if ((p.x - x0) % sx != 0 || (p.y - y0) % sy != 0)
      throw ExportError("patch coordinates of slide " + e.slide_id + " do not form a regular grid");
  const std::size_t w = (*xs.rbegin() - x0) / sx + 1;
  const std::size_t h = (*ys.rbegin() - y0) / sy + 1;
  std::vector<double> cells(w * h, 0.0);
  const auto mean = e.map.mean_over_heads();
  for (std::size_t k = 0; k < e.coords.size(); ++k)
    cells[((e.coords[k].y - y0) / sy) * w + (e.coords[k].x - x0) / sx] += mean[k];
  const double top = *std::max_element(cells.begin(), cells.end());
  std::ostringstream os;
  os << "P2\n" << w << ' ' << h << "\n255\n";
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const long v = top > 0 ? std::lround(255.0 * cells[r * w + c] / top) : 0;
      os << (c ? " " : "") << v;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace tcv2
