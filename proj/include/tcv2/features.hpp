#pragma once

// Per-slide instance feature files.
//
//   "TCF1"  u32 N  u32 D  float32[N*D] row-major
//   optional: "XY32" u32[2*N] (x, y) patch origins
//
// All integers and floats little-endian.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/tensor.hpp"

namespace tcv2 {

struct PatchCoord {
  std::uint32_t x = 0;
  std::uint32_t y = 0;
  friend bool operator==(const PatchCoord&, const PatchCoord&) = default;
};

struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;
  std::vector<PatchCoord> coords;  // empty or one per row

  float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  bool has_coords() const { return !coords.empty(); }

  // Promote to a float64 tensor; every float32 is exactly representable.
  Tensor to_tensor() const {
    if (rows == 0) throw ContractError("empty bag: a bag needs at least one instance");
    return Tensor(Shape{rows, cols}, std::vector<double>(values.begin(), values.end()));
  }
};

struct FeatureHeader {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  bool has_coords = false;
};

namespace detail {

inline constexpr char kFeatureMagic[4] = {'T', 'C', 'F', '1'};
inline constexpr char kCoordMagic[4] = {'X', 'Y', '3', '2'};
inline constexpr std::uint64_t kMaxFeatureElements = std::numeric_limits<std::uint32_t>::max();

// Validates the header against the file size; returns the header.
inline FeatureHeader check_feature_layout(std::uint32_t n, std::uint32_t d, std::uint64_t file_bytes,
                                          const std::string& path) {
  const std::uint64_t elems = static_cast<std::uint64_t>(n) * d;
  if (elems > kMaxFeatureElements)
    throw DataError(path + ": N*D overflow (" + std::to_string(n) + " x " + std::to_string(d) + " exceeds " +
                    std::to_string(kMaxFeatureElements) + " elements)");
  const std::uint64_t payload = elems * sizeof(float);
  const std::uint64_t expected = 12 + payload;
  if (file_bytes < expected)
    throw DataError(path + ": truncated payload, expected " + std::to_string(expected) + " bytes, got " +
                    std::to_string(file_bytes));
  FeatureHeader h{n, d, false};
  const std::uint64_t rest = file_bytes - expected;
  if (rest == 0) return h;
  const std::uint64_t coord_bytes = 4 + 8ULL * n;
  if (rest != coord_bytes)
    throw DataError(path + ": unexpected trailing block, expected 0 or " + std::to_string(coord_bytes) +
                    " bytes after the payload, got " + std::to_string(rest));
  h.has_coords = true;
  return h;
}

}  // namespace detail

inline FeatureHeader read_feature_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing feature file " + path);
  char magic[4];
  std::uint32_t nd[2];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(nd), sizeof nd);
  if (!in) throw DataError(path + ": truncated header");
  if (std::memcmp(magic, detail::kFeatureMagic, 4) != 0) throw DataError(path + ": magic mismatch, not a TCF1 file");
  const auto size = std::filesystem::file_size(path);
  return detail::check_feature_layout(nd[0], nd[1], size, path);
}

inline FeatureMatrix read_feature_file(const std::string& path) {
  const FeatureHeader h = read_feature_header(path);
  std::ifstream in(path, std::ios::binary);
  in.seekg(12);
  FeatureMatrix m;
  m.rows = h.rows;
  m.cols = h.cols;
  m.values.resize(static_cast<std::size_t>(h.rows) * h.cols);
  in.read(reinterpret_cast<char*>(m.values.data()), static_cast<std::streamsize>(m.values.size() * sizeof(float)));
  if (h.has_coords) {
    char tag[4];
    in.read(tag, 4);
    if (std::memcmp(tag, detail::kCoordMagic, 4) != 0) throw DataError(path + ": trailing block is not tagged XY32");
    m.coords.resize(h.rows);
    in.read(reinterpret_cast<char*>(m.coords.data()), static_cast<std::streamsize>(h.rows * sizeof(PatchCoord)));
  }
  if (!in) throw DataError(path + ": read failed");
  return m;
}

inline void write_feature_file(const std::string& path, const FeatureMatrix& m) {
  if (m.values.size() != m.rows * m.cols) throw DimensionError("feature matrix size does not match rows x cols");
  if (m.has_coords() && m.coords.size() != m.rows) throw DimensionError("coords must have one entry per row");
  if (m.rows > std::numeric_limits<std::uint32_t>::max() || m.cols > std::numeric_limits<std::uint32_t>::max() ||
      static_cast<std::uint64_t>(m.rows) * m.cols > detail::kMaxFeatureElements)
    throw DataError(path + ": N*D overflow");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write feature file " + path);
  const std::uint32_t nd[2] = {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)};
  out.write(detail::kFeatureMagic, 4);
  out.write(reinterpret_cast<const char*>(nd), sizeof nd);
  out.write(reinterpret_cast<const char*>(m.values.data()), static_cast<std::streamsize>(m.values.size() * sizeof(float)));
  if (m.has_coords()) {
    out.write(detail::kCoordMagic, 4);
    out.write(reinterpret_cast<const char*>(m.coords.data()), static_cast<std::streamsize>(m.coords.size() * sizeof(PatchCoord)));
  }
  if (!out) throw DataError("short write to " + path);
}

// Directory of per-slide feature files addressed by slide id. Reads go to
// disk each time, so iterating a store keeps one slide resident at a time.
class FeatureStore {
 public:
  FeatureStore() = default;
  explicit FeatureStore(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }

  void bind(const std::string& slide_id, std::filesystem::path file) { files_[slide_id] = std::move(file); }

  std::filesystem::path path_of(const std::string& slide_id) const {
    auto it = files_.find(slide_id);
    if (it == files_.end()) throw DataError("feature store has no slide '" + slide_id + "'");
    return it->second.is_absolute() ? it->second : root_ / it->second;
  }

  bool contains(const std::string& slide_id) const { return files_.count(slide_id) != 0; }

  FeatureMatrix read(const std::string& slide_id) const { return read_feature_file(path_of(slide_id).string()); }

  // Writes <root>/<file> (default "<slide_id>.tcf") and binds it.
  void write(const std::string& slide_id, const FeatureMatrix& m, std::string file = {}) {
    if (file.empty()) file = slide_id + ".tcf";
    std::filesystem::create_directories((root_ / file).parent_path());
    write_feature_file((root_ / file).string(), m);
    files_[slide_id] = file;
  }

  const std::map<std::string, std::filesystem::path>& files() const { return files_; }

 private:
  std::filesystem::path root_;
  std::map<std::string, std::filesystem::path> files_;
};

inline FeatureMatrix read_features(const FeatureStore& store, const std::string& slide_id) { return store.read(slide_id); }

inline void write_features(FeatureStore& store, const std::string& slide_id, const FeatureMatrix& m) {
  store.write(slide_id, m);
}

}  // namespace tcv2
