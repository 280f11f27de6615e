#pragma once

// Cohort manifest: CSV with header
//   slide_id,patient_id,feature_file,<task_1>,...,<task_k>
// Empty label cells mean "unlabeled for that task"; lines starting with '#'
// are comments. The task registry lives next to it as <stem>.tasks.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/features.hpp"
#include "tcv2/tasks.hpp"
#include "tcv2/text.hpp"

namespace tcv2 {

struct SlideRecord {
  std::string slide_id;
  std::string patient_id;
  std::string feature_file;
  std::map<std::string, int> labels;
  std::size_t num_instances = 0;  // filled when feature headers are checked

  std::optional<int> label(const std::string& task_id) const {
    auto it = labels.find(task_id);
    if (it == labels.end()) return std::nullopt;
    return it->second;
  }

  friend bool operator==(const SlideRecord& a, const SlideRecord& b) {
    return a.slide_id == b.slide_id && a.patient_id == b.patient_id && a.feature_file == b.feature_file &&
           a.labels == b.labels;
  }
};

struct Manifest {
  std::vector<SlideRecord> records;
  TaskRegistry registry;
  std::filesystem::path base_dir;  // feature_file paths are relative to this
  std::size_t feature_width = 0;

  const SlideRecord* find(const std::string& slide_id) const {
    for (const auto& r : records)
      if (r.slide_id == slide_id) return &r;
    return nullptr;
  }

  FeatureStore feature_store() const {
    FeatureStore store(base_dir);
    for (const auto& r : records) store.bind(r.slide_id, r.feature_file);
    return store;
  }

  friend bool operator==(const Manifest& a, const Manifest& b) {
    return a.records == b.records && a.registry == b.registry;
  }
};

inline std::filesystem::path registry_path_for(const std::filesystem::path& manifest_path) {
  auto p = manifest_path;
  p.replace_extension(".tasks");
  return p;
}

// Parse manifest text. When `check_features` is set every referenced feature
// file must exist with a valid header and a common width D.
inline Manifest parse_manifest_text(const std::string& text, TaskRegistry registry, std::filesystem::path base_dir,
                                    bool check_features, const std::string& origin = "<manifest>") {
  Manifest m;
  m.registry = std::move(registry);
  m.base_dir = std::move(base_dir);
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  std::vector<std::string> task_cols;
  bool have_header = false;
  std::map<std::string, int> seen_at;
  auto fail = [&](const std::string& msg) { throw DataError(origin + ":" + std::to_string(line_no) + ": " + msg); };
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line[0] == '#') continue;
    auto cells = split(line, ',');
    for (auto& c : cells) c = trim(c);
    if (!have_header) {
      if (cells.size() < 3 || cells[0] != "slide_id" || cells[1] != "patient_id" || cells[2] != "feature_file")
        fail("header must start with slide_id,patient_id,feature_file");
      for (std::size_t i = 3; i < cells.size(); ++i) {
        if (!m.registry.find(cells[i])) fail("unknown task column '" + cells[i] + "'");
        task_cols.push_back(cells[i]);
      }
      have_header = true;
      continue;
    }
    if (cells.size() != 3 + task_cols.size())
      fail("expected " + std::to_string(3 + task_cols.size()) + " cells, got " + std::to_string(cells.size()));
    SlideRecord r;
    r.slide_id = cells[0];
    r.patient_id = cells[1];
    r.feature_file = cells[2];
    if (r.slide_id.empty()) fail("empty slide_id");
    if (auto it = seen_at.find(r.slide_id); it != seen_at.end())
      fail("duplicate slide_id '" + r.slide_id + "' (lines " + std::to_string(it->second) + " and " +
           std::to_string(line_no) + ")");
    seen_at[r.slide_id] = line_no;
    for (std::size_t i = 0; i < task_cols.size(); ++i) {
      const std::string& cell = cells[3 + i];
      if (cell.empty()) continue;
      const TaskSpec& t = m.registry.at(task_cols[i]);
      long long v = 0;
      try {
        v = parse_int(cell, "label");
      } catch (const ValidationError&) {
        fail("label '" + cell + "' for task " + t.task_id + " is not an integer");
      }
      if (v < 0 || v >= t.num_classes)
        fail("label " + cell + " out of range [0, " + std::to_string(t.num_classes) + ") for task " + t.task_id);
      r.labels[t.task_id] = static_cast<int>(v);
    }
    if (check_features) {
      const auto path = std::filesystem::path(r.feature_file).is_absolute() ? std::filesystem::path(r.feature_file)
                                                                            : m.base_dir / r.feature_file;
      if (!std::filesystem::exists(path)) fail("missing feature file " + path.string());
      FeatureHeader h;
      try {
        h = read_feature_header(path.string());
      } catch (const DataError& e) {
        fail(e.what());
      }
      if (m.feature_width == 0) m.feature_width = h.cols;
      else if (h.cols != m.feature_width)
        fail("feature width " + std::to_string(h.cols) + " differs from " + std::to_string(m.feature_width));
      r.num_instances = h.rows;
    }
    m.records.push_back(std::move(r));
  }
  if (!have_header && !m.records.empty()) fail("missing header");
  return m;
}

inline Manifest parse_manifest(const std::filesystem::path& path, bool check_features = true) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const auto reg_path = registry_path_for(path);
  TaskRegistry reg = load_registry(reg_path.string());
  return parse_manifest_text(ss.str(), std::move(reg), path.parent_path(), check_features, path.string());
}

inline std::string serialize_manifest(const Manifest& m) {
  std::ostringstream os;
  os << "slide_id,patient_id,feature_file";
  for (const auto& t : m.registry) os << ',' << t.task_id;
  os << '\n';
  for (const auto& r : m.records) {
    os << r.slide_id << ',' << r.patient_id << ',' << r.feature_file;
    for (const auto& t : m.registry) {
      os << ',';
      if (auto l = r.label(t.task_id)) os << *l;
    }
    os << '\n';
  }
  return os.str();
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << serialize_manifest(m);
  std::ofstream reg(registry_path_for(path));
  reg << registry_to_text(m.registry);
  if (!out || !reg) throw DataError("short write for manifest " + path.string());
}

// Manifest records with their features loaded in memory.
struct Cohort {
  Manifest manifest;
  std::vector<FeatureMatrix> features;  // parallel to manifest.records

  const FeatureMatrix& features_of(const std::string& slide_id) const {
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
      if (manifest.records[i].slide_id == slide_id) return features[i];
    throw DataError("cohort has no slide '" + slide_id + "'");
  }

  static Cohort load(Manifest m) {
    Cohort c;
    const FeatureStore store = m.feature_store();
    for (const auto& r : m.records) c.features.push_back(store.read(r.slide_id));
    c.manifest = std::move(m);
    return c;
  }
};

}  // namespace tcv2
