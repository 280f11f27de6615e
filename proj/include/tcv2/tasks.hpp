#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/text.hpp"

namespace tcv2 {

enum class TaskKind { kBinary, kMulticlass, kOrdinalAsMulticlass, kSurvivalEventBinary };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kBinary: return "binary";
    case TaskKind::kMulticlass: return "multiclass";
    case TaskKind::kOrdinalAsMulticlass: return "ordinal_as_multiclass";
    case TaskKind::kSurvivalEventBinary: return "survival_event_binary";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "binary") return TaskKind::kBinary;
  if (s == "multiclass") return TaskKind::kMulticlass;
  if (s == "ordinal_as_multiclass") return TaskKind::kOrdinalAsMulticlass;
  if (s == "survival_event_binary") return TaskKind::kSurvivalEventBinary;
  throw RegistryError("unknown task kind '" + s + "'");
}

struct TaskSpec {
  std::string task_id;
  TaskKind kind = TaskKind::kBinary;
  int num_classes = 2;
  double loss_weight = 1.0;
  std::string cohort_tag;

  void validate() const {
    if (task_id.empty()) throw RegistryError("task id must not be empty");
    if (num_classes < 2) throw RegistryError("task " + task_id + ": needs at least 2 classes");
    if ((kind == TaskKind::kBinary || kind == TaskKind::kSurvivalEventBinary) && num_classes != 2)
      throw RegistryError("task " + task_id + ": " + to_string(kind) + " requires 2 classes, got " +
                          std::to_string(num_classes));
    if (!(loss_weight > 0.0)) throw RegistryError("task " + task_id + ": loss weight must be positive");
  }

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

// Ordered set of tasks. Iteration order is registration order and is the
// order in which the trainer visits tasks within a step.
class TaskRegistry {
 public:
  TaskRegistry() = default;
  explicit TaskRegistry(std::vector<TaskSpec> tasks) {
    for (auto& t : tasks) add(std::move(t));
  }

  void add(TaskSpec spec) {
    spec.validate();
    if (find(spec.task_id)) throw RegistryError("duplicate task id '" + spec.task_id + "'");
    tasks_.push_back(std::move(spec));
  }

  const TaskSpec* find(const std::string& id) const {
    auto it = std::find_if(tasks_.begin(), tasks_.end(), [&](const TaskSpec& t) { return t.task_id == id; });
    return it == tasks_.end() ? nullptr : &*it;
  }

  const TaskSpec& at(const std::string& id) const {
    if (const TaskSpec* t = find(id)) return *t;
    throw RegistryError("unknown task '" + id + "'");
  }

  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  std::size_t size() const { return tasks_.size(); }
  bool empty() const { return tasks_.empty(); }
  auto begin() const { return tasks_.begin(); }
  auto end() const { return tasks_.end(); }

  friend bool operator==(const TaskRegistry&, const TaskRegistry&) = default;

 private:
  std::vector<TaskSpec> tasks_;
};

// Registry text format: one "[task]" section per task with key = value
// lines for id, kind, classes, weight and optional cohort.
inline TaskRegistry parse_registry_text(const std::string& text, const std::string& origin = "<registry>") {
  TaskRegistry reg;
  std::optional<TaskSpec> cur;
  std::map<std::string, bool> seen;
  int line_no = 0;
  auto flush = [&] {
    if (!cur) return;
    for (const char* k : {"id", "kind", "classes"})
      if (!seen[k]) throw RegistryError(origin + ": task section missing '" + k + "' before line " + std::to_string(line_no));
    reg.add(*cur);
    cur.reset();
    seen.clear();
  };
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line == "[task]") {
      flush();
      cur = TaskSpec{};
      continue;
    }
    const auto eq = line.find('=');
    if (!cur || eq == std::string::npos)
      throw RegistryError(origin + ":" + std::to_string(line_no) + ": expected '[task]' or 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    try {
      if (key == "id") cur->task_id = val;
      else if (key == "kind") cur->kind = parse_task_kind(val);
      else if (key == "classes") cur->num_classes = static_cast<int>(parse_int(val, key));
      else if (key == "weight") cur->loss_weight = parse_double(val, key);
      else if (key == "cohort") cur->cohort_tag = val;
      else throw RegistryError("unknown key '" + key + "'");
    } catch (const RegistryError& e) {
      throw RegistryError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const std::exception&) {
      throw RegistryError(origin + ":" + std::to_string(line_no) + ": bad value '" + val + "' for " + key);
    }
    seen[key] = true;
  }
  flush();
  return reg;
}

inline std::string registry_to_text(const TaskRegistry& reg) {
  std::ostringstream os;
  for (const auto& t : reg) {
    os << "[task]\n"
       << "id = " << t.task_id << '\n'
       << "kind = " << to_string(t.kind) << '\n'
       << "classes = " << t.num_classes << '\n'
       << "weight = " << format_double(t.loss_weight) << '\n';
    if (!t.cohort_tag.empty()) os << "cohort = " << t.cohort_tag << '\n';
    os << '\n';
  }
  return os.str();
}

inline TaskRegistry load_registry(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RegistryError("cannot open task registry " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_registry_text(ss.str(), path);
}

}  // namespace tcv2
