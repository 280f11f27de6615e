#pragma once

// Checkpoint container.
//
// Layout (little-endian throughout):
//   "TCV2CKPT"  u16 version
//   u32 count, then per parameter: str stable_id, u8 rank, u32 dims[rank], f64 values[numel]
//   u64 optimizer step, u32 count, then per entry: str stable_id, u32 numel, f64 m[numel], f64 v[numel]
//   str metadata, "key=value\n" lines sorted by key
// where str is a u32 byte length followed by the bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/model.hpp"
#include "tcv2/optimizer.hpp"
#include "tcv2/text.hpp"

namespace tcv2 {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  void put_doubles(const std::vector<double>& v) { put_bytes(v.data(), v.size() * sizeof(double)); }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> get_doubles(std::size_t n) {
    need(n * sizeof(double));
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                            " more)");
  }
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

using Metadata = std::map<std::string, std::string>;

struct ParameterRecord {
  std::string stable_id;
  Shape shape;
  std::vector<double> values;
  friend bool operator==(const ParameterRecord&, const ParameterRecord&) = default;
};

struct CheckpointBundle {
  static constexpr char kMagic[8] = {'T', 'C', 'V', '2', 'C', 'K', 'P', 'T'};
  static constexpr std::uint16_t kVersion = 1;

  std::vector<ParameterRecord> parameters;
  OptimizerState optimizer;
  Metadata metadata;

  friend bool operator==(const CheckpointBundle&, const CheckpointBundle&) = default;

  std::vector<char> serialize() const {
    ByteWriter w;
    w.put_bytes(kMagic, sizeof kMagic);
    w.put<std::uint16_t>(kVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(parameters.size()));
    for (const auto& p : parameters) {
      w.put_string(p.stable_id);
      w.put<std::uint8_t>(static_cast<std::uint8_t>(p.shape.rank()));
      for (auto d : p.shape.dims()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
      w.put_doubles(p.values);
    }
    w.put<std::uint64_t>(optimizer.step);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(optimizer.moments.size()));
    for (const auto& [id, mom] : optimizer.moments) {
      w.put_string(id);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(mom.m.size()));
      w.put_doubles(mom.m);
      w.put_doubles(mom.v);
    }
    w.put_string(metadata_text(metadata));
    return std::move(w.bytes());
  }

  static CheckpointBundle deserialize(const std::vector<char>& bytes) {
    ByteReader r(bytes);
    char magic[8];
    for (char& c : magic) c = r.get<char>();
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint: bad magic");
    const auto version = r.get<std::uint16_t>();
    if (version != kVersion)
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                            std::to_string(kVersion) + ")");
    CheckpointBundle b;
    const auto n = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      ParameterRecord p;
      p.stable_id = r.get_string();
      const auto rank = r.get<std::uint8_t>();
      std::vector<std::size_t> dims(rank);
      for (auto& d : dims) d = r.get<std::uint32_t>();
      try {
        p.shape = Shape(dims);
      } catch (const DimensionError& e) {
        throw CheckpointError("parameter " + p.stable_id + ": " + e.what());
      }
      p.values = r.get_doubles(p.shape.numel());
      b.parameters.push_back(std::move(p));
    }
    b.optimizer.step = r.get<std::uint64_t>();
    const auto nm = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < nm; ++i) {
      const std::string id = r.get_string();
      const auto len = r.get<std::uint32_t>();
      Moments mom;
      mom.m = r.get_doubles(len);
      mom.v = r.get_doubles(len);
      b.optimizer.moments.emplace(id, std::move(mom));
    }
    b.metadata = parse_metadata(r.get_string());
    if (!r.at_end()) throw CheckpointError("trailing bytes after checkpoint metadata");
    return b;
  }

  static std::string metadata_text(const Metadata& md) {
    std::string out;
    for (const auto& [k, v] : md) {
      if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
        throw CheckpointError("metadata entry '" + k + "' contains a reserved character");
      out += k + "=" + v + "\n";
    }
    return out;
  }

  static Metadata parse_metadata(const std::string& text) {
    Metadata md;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw CheckpointError("malformed metadata line '" + line + "'");
      md[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return md;
  }

  void write_file(const std::string& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + path);
  }

  static CheckpointBundle read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }
};

inline CheckpointBundle save_checkpoint(const MultiTaskModel& model, const OptimizerState& optimizer,
                                        Metadata metadata) {
  CheckpointBundle b;
  for (const Parameter* p : model.parameters()) b.parameters.push_back({p->stable_id, p->shape, p->value});
  b.optimizer = optimizer;
  b.metadata = std::move(metadata);
  return b;
}

// Restore parameters and optimizer moments into `model`, whose set of
// parameters must match the bundle exactly. Returns the metadata.
inline Metadata load_checkpoint(const CheckpointBundle& bundle, MultiTaskModel& model, OptimizerState* optimizer) {
  std::set<std::string> in_bundle, in_model;
  for (const auto& p : bundle.parameters) in_bundle.insert(p.stable_id);
  for (const Parameter* p : model.parameters()) in_model.insert(p->stable_id);
  std::string missing, extra;
  for (const auto& id : in_model)
    if (!in_bundle.count(id)) missing += (missing.empty() ? "" : ", ") + id;
  for (const auto& id : in_bundle)
    if (!in_model.count(id)) extra += (extra.empty() ? "" : ", ") + id;
  if (!missing.empty() || !extra.empty())
    throw CheckpointError("checkpoint/model mismatch; missing from checkpoint: [" + missing + "]; not in model: [" +
                          extra + "]");
  for (const auto& rec : bundle.parameters) {
    Parameter* p = model.find_parameter(rec.stable_id);
    if (p->shape != rec.shape)
      throw CheckpointError("shape mismatch for " + rec.stable_id + ": checkpoint " + rec.shape.to_string() +
                            ", model " + p->shape.to_string());
    p->value = rec.values;
  }
  if (optimizer) {
    for (const auto& [id, mom] : bundle.optimizer.moments) {
      if (!in_model.count(id)) throw CheckpointError("optimizer state for unknown parameter " + id);
      if (mom.m.size() != model.find_parameter(id)->value.size())
        throw CheckpointError("optimizer moment size mismatch for " + id);
    }
    *optimizer = bundle.optimizer;
  }
  return bundle.metadata;
}

// Copy only the parameters whose ids start with `prefix` (e.g. "encoder.").
inline void load_parameters_with_prefix(const CheckpointBundle& bundle, MultiTaskModel& model, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& rec : bundle.parameters) {
    if (rec.stable_id.rfind(prefix, 0) != 0) continue;
    Parameter* p = model.find_parameter(rec.stable_id);
    if (!p) throw CheckpointError("model has no parameter " + rec.stable_id);
    if (p->shape != rec.shape) throw CheckpointError("shape mismatch for " + rec.stable_id);
    p->value = rec.values;
    ++n;
  }
  if (n == 0) throw CheckpointError("checkpoint has no parameters with prefix '" + prefix + "'");
}

inline void write_model_config(const ModelConfig& cfg, const TaskRegistry& registry, Metadata& md) {
  std::string hidden;
  for (auto w : cfg.encoder.hidden_widths) hidden += (hidden.empty() ? "" : ",") + std::to_string(w);
  md["model.input_width"] = std::to_string(cfg.encoder.input_width);
  md["model.hidden_widths"] = hidden;
  md["model.output_width"] = std::to_string(cfg.encoder.output_width);
  md["model.activation"] = to_string(cfg.encoder.activation);
  md["model.heads"] = std::to_string(cfg.heads);
  md["model.attention_width"] = std::to_string(cfg.attention_width);
  md["model.head_dropout"] = format_double(cfg.head_dropout);
  md["tasks.count"] = std::to_string(registry.size());
  std::size_t i = 0;
  for (const auto& t : registry) {
    const std::string k = "tasks." + std::to_string(i++) + ".";
    md[k + "id"] = t.task_id;
    md[k + "kind"] = to_string(t.kind);
    md[k + "classes"] = std::to_string(t.num_classes);
    md[k + "weight"] = format_double(t.loss_weight);
    md[k + "cohort"] = t.cohort_tag;
  }
}

inline const std::string& metadata_at(const Metadata& md, const std::string& key) {
  auto it = md.find(key);
  if (it == md.end()) throw CheckpointError("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

inline std::pair<ModelConfig, TaskRegistry> read_model_config(const Metadata& md) {
  try {
    ModelConfig cfg;
    cfg.encoder.input_width = static_cast<std::size_t>(parse_int(metadata_at(md, "model.input_width"), "input width"));
    cfg.encoder.hidden_widths.clear();
    const std::string& hidden = metadata_at(md, "model.hidden_widths");
    if (!hidden.empty())
      for (const auto& w : split(hidden, ','))
        cfg.encoder.hidden_widths.push_back(static_cast<std::size_t>(parse_int(w, "hidden width")));
    cfg.encoder.output_width = static_cast<std::size_t>(parse_int(metadata_at(md, "model.output_width"), "output width"));
    cfg.encoder.activation = parse_activation(metadata_at(md, "model.activation"));
    cfg.heads = static_cast<std::size_t>(parse_int(metadata_at(md, "model.heads"), "heads"));
    cfg.attention_width = static_cast<std::size_t>(parse_int(metadata_at(md, "model.attention_width"), "attention width"));
    cfg.head_dropout = parse_double(metadata_at(md, "model.head_dropout"), "head dropout");
    TaskRegistry reg;
    const auto n = parse_int(metadata_at(md, "tasks.count"), "task count");
    for (long long i = 0; i < n; ++i) {
      const std::string k = "tasks." + std::to_string(i) + ".";
      TaskSpec t;
      t.task_id = metadata_at(md, k + "id");
      t.kind = parse_task_kind(metadata_at(md, k + "kind"));
      t.num_classes = static_cast<int>(parse_int(metadata_at(md, k + "classes"), "classes"));
      t.loss_weight = parse_double(metadata_at(md, k + "weight"), "weight");
      t.cohort_tag = metadata_at(md, k + "cohort");
      reg.add(t);
    }
    return {cfg, reg};
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(std::string("bad model description in checkpoint: ") + e.what());
  }
}

}  // namespace tcv2
