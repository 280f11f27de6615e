#pragma once

// Dense float64 tensors with a define-by-run reverse-mode tape.
//
// A Tensor is an immutable value (shared storage) optionally bound to a node
// of a Tape. Operations whose operands are bound to a tape record a node with
// a backward rule; operations on unbound tensors are plain arithmetic.
// Parameters enter a tape through Tape::watch and receive accumulated
// gradients when Tape::backward runs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/rng.hpp"

namespace tcv2 {

class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() : dims_{1} {}
  Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.empty() || dims_.size() > kMaxRank)
      throw DimensionError("shape rank must be in [1, 4], got " + std::to_string(dims_.size()));
    for (auto d : dims_)
      if (d == 0) throw DimensionError("shape extents must be >= 1: " + to_string());
  }

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t last() const { return dims_.back(); }

  std::string to_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
    os << ']';
    return os.str();
  }

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<std::size_t> dims_;
};

// A learnable tensor with its gradient accumulator.
struct Parameter {
  std::string stable_id;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string id, Shape s) : Parameter(std::move(id), s, std::vector<double>(s.numel(), 0.0)) {}
  Parameter(std::string id, Shape s, std::vector<double> v)
      : stable_id(std::move(id)), shape(std::move(s)), value(std::move(v)), grad(value.size(), 0.0) {
    if (value.size() != shape.numel())
      throw DimensionError("parameter " + stable_id + ": " + std::to_string(value.size()) +
                           " values for shape " + shape.to_string());
  }

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Tape;

class Tensor {
 public:
  Tensor() : Tensor(Shape{1}, std::vector<double>{0.0}) {}
  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::make_shared<const std::vector<double>>(std::move(values))) {
    if (values_->size() != shape_.numel())
      throw DimensionError("tensor: " + std::to_string(values_->size()) + " values for shape " +
                           shape_.to_string());
  }

  static Tensor zeros(Shape shape) {
    const auto n = shape.numel();
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> v;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      v.insert(v.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(v));
  }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return values_->size(); }
  std::span<const double> values() const { return *values_; }
  const std::vector<double>& storage() const { return *values_; }
  double operator[](std::size_t i) const { return (*values_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*values_)[r * shape_.last() + c]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_.to_string());
    return (*values_)[0];
  }
  std::size_t rows() const { return shape_[0]; }
  std::size_t cols() const { return shape_.last(); }

  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  // Same values, no history.
  Tensor detach() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = 0;
    return t;
  }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> values_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

// Backward rule: receives dL/d(output) and one accumulator per parent
// (nullptr when that parent does not require a gradient).
using BackwardRule = std::function<void(std::span<const double> grad_out, std::span<double* const> parent_grads)>;

class Tape {
 public:
  Tape() = default;
  // A non-recording tape treats every watched parameter as a constant, so a
  // forward pass through it builds no history (inference).
  explicit Tape(bool recording) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Bind a parameter as a leaf. Frozen parameters enter as constants: they
  // never receive gradient and nothing upstream of them is differentiated.
  Tensor watch(Parameter& p) {
    Tensor t(p.shape, p.value);
    if (p.frozen || !recording_) return t;
    ensure_open();
    nodes_.push_back(Node{"leaf", {}, {}, &p, t.numel()});
    t.tape_ = this;
    t.node_ = nodes_.size() - 1;
    return t;
  }

  // Record the result of an operation. If no operand lives on a tape the
  // result is a constant and `rule` is dropped.
  Tensor record(std::string_view op, Shape shape, std::vector<double> values,
                std::initializer_list<const Tensor*> parents, BackwardRule rule) {
    return record(op, std::move(shape), std::move(values), std::vector<const Tensor*>(parents), std::move(rule));
  }

  Tensor record(std::string_view op, Shape shape, std::vector<double> values,
                const std::vector<const Tensor*>& parents, BackwardRule rule) {
    Tensor out(std::move(shape), std::move(values));
    bool any = false;
    for (const Tensor* p : parents) {
      if (!p->tape_) continue;
      if (p->tape_ != this) throw ContractError(std::string(op) + ": operands live on different tapes");
      any = true;
    }
    if (!any) return out;
    ensure_open();
    Node n{op, {}, std::move(rule), nullptr, out.numel()};
    n.parents.reserve(parents.size());
    for (const Tensor* p : parents) n.parents.push_back(p->tape_ ? static_cast<long>(p->node_) : -1L);
    nodes_.push_back(std::move(n));
    out.tape_ = this;
    out.node_ = nodes_.size() - 1;
    return out;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Reverse sweep from a scalar root. Gradients are added into every
  // reachable Parameter::grad. The tape cannot be used afterwards.
  void backward(const Tensor& root) {
    ensure_open();
    if (root.tape_ != this) throw ContractError("backward: root is not on this tape");
    if (root.numel() != 1) throw ContractError("backward: root must be scalar, got " + root.shape().to_string());
    std::vector<std::vector<double>> grads(nodes_.size());
    grads[root.node_].assign(1, 1.0);
    std::vector<double*> parent_ptrs;
    for (std::size_t i = root.node_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (grads[i].empty()) continue;
      if (n.leaf) {
        auto& g = n.leaf->grad;
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += grads[i][k];
      } else {
        parent_ptrs.assign(n.parents.size(), nullptr);
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          const long p = n.parents[k];
          if (p < 0) continue;
          auto& pg = grads[static_cast<std::size_t>(p)];
          if (pg.empty()) pg.assign(nodes_[static_cast<std::size_t>(p)].numel, 0.0);
          parent_ptrs[k] = pg.data();
        }
        n.backward(grads[i], parent_ptrs);
      }
      std::vector<double>().swap(grads[i]);
    }
    nodes_.clear();
    consumed_ = true;
  }

 private:
  struct Node {
    std::string_view op;
    std::vector<long> parents;
    BackwardRule backward;
    Parameter* leaf;
    std::size_t numel;
  };

  void ensure_open() const {
    if (consumed_) throw ContractError("tape already consumed by backward()");
  }

  std::vector<Node> nodes_;
  bool recording_ = true;
  bool consumed_ = false;
};

inline void backward(const Tensor& root) {
  if (!root.tape()) throw ContractError("backward: root is not on a tape");
  root.tape()->backward(root);
}

namespace detail {

inline Tape* tape_of(std::initializer_list<const Tensor*> ts) {
  Tape* t = nullptr;
  for (const Tensor* x : ts) {
    if (!x->tape()) continue;
    if (t && t != x->tape()) throw ContractError("operands live on different tapes");
    t = x->tape();
  }
  return t;
}

// Record through the operands' tape, or build a constant if there is none.
inline Tensor make(std::string_view op, Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> parents, BackwardRule rule) {
  if (Tape* t = tape_of(parents)) return t->record(op, std::move(shape), std::move(values), parents, std::move(rule));
  return Tensor(std::move(shape), std::move(values));
}

inline void require_rank2(const Tensor& a, std::string_view op) {
  if (a.shape().rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " + a.shape().to_string());
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      c[i * k + p] += s;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

enum class Broadcast { kNone, kTrailing };

inline Broadcast check_binary(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  const bool b_is_vector = b.shape().rank() == 1 || (b.shape().rank() == 2 && b.shape()[0] == 1);
  if (b_is_vector && b.numel() == a.shape().last() && a.shape().rank() >= 2) return Broadcast::kTrailing;
  throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape().to_string() + " and " +
                       b.shape().to_string());
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, std::string_view op, Fwd fwd, DA dfa, DB dfb) {
  const Broadcast mode = check_binary(a, b, op);
  const std::size_t n = a.numel();
  const std::size_t w = b.numel();
  std::vector<double> out(n);
  const auto& av = a.storage();
  const auto& bv = b.storage();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[mode == Broadcast::kNone ? i : i % w]);
  auto sa = a.detach();
  auto sb = b.detach();
  return make(op, a.shape(), std::move(out), {&a, &b},
              [sa, sb, mode, dfa, dfb](std::span<const double> g, std::span<double* const> pg) {
                const std::size_t n = sa.numel();
                const std::size_t w = sb.numel();
                auto av = sa.values();
                auto bv = sb.values();
                for (std::size_t i = 0; i < n; ++i) {
                  const std::size_t j = mode == Broadcast::kNone ? i : i % w;
                  if (pg[0]) pg[0][i] += g[i] * dfa(av[i], bv[j]);
                  if (pg[1]) pg[1][j] += g[i] * dfb(av[i], bv[j]);
                }
              });
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: inner extents differ, " + a.shape().to_string() + " x " + b.shape().to_string());
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.storage().data(), b.storage().data(), out.data(), m, k, n);
  auto sa = a.detach();
  auto sb = b.detach();
  return detail::make("matmul", Shape{m, n}, std::move(out), {&a, &b},
                      [sa, sb, m, k, n](std::span<const double> g, std::span<double* const> pg) {
                        if (pg[0]) detail::gemm_nt(g.data(), sb.storage().data(), pg[0], m, n, k);
                        if (pg[1]) detail::gemm_tn(sa.storage().data(), g.data(), pg[1], m, k, n);
                      });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r * c);
  const auto& v = a.storage();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return detail::make("transpose", Shape{c, r}, std::move(out), {&a},
                      [r, c](std::span<const double> g, std::span<double* const> pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t j = 0; j < c; ++j) pg[0][i * c + j] += g[j * r + i];
                      });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape.numel() != a.numel())
    throw DimensionError("reshape: " + a.shape().to_string() + " to " + shape.to_string());
  return detail::make("reshape", std::move(shape), a.storage(), {&a},
                      [](std::span<const double> g, std::span<double* const> pg) {
                        if (pg[0])
                          for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
                      });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.storage());
  for (auto& x : out) x *= s;
  return detail::make("scale", a.shape(), std::move(out), {&a},
                      [s](std::span<const double> g, std::span<double* const> pg) {
                        if (pg[0])
                          for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += s * g[i];
                      });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
  auto y = std::make_shared<const std::vector<double>>(out);
  return detail::make("tanh", a.shape(), std::move(out), {&a},
                      [y](std::span<const double> g, std::span<double* const> pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] * (1.0 - (*y)[i] * (*y)[i]);
                      });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  auto sa = a.detach();
  return detail::make("relu", a.shape(), std::move(out), {&a},
                      [sa](std::span<const double> g, std::span<double* const> pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < g.size(); ++i)
                          if (sa[i] > 0.0) pg[0][i] += g[i];
                      });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(a[i]);
    if (!std::isfinite(out[i]))
      throw NumericDomainError("exp: overflow at element " + std::to_string(i) + " (input " + std::to_string(a[i]) + ")");
  }
  auto y = std::make_shared<const std::vector<double>>(out);
  return detail::make("exp", a.shape(), std::move(out), {&a},
                      [y](std::span<const double> g, std::span<double* const> pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] * (*y)[i];
                      });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a[i] > 0.0))
      throw NumericDomainError("log: non-positive input at element " + std::to_string(i) + " (" +
                               std::to_string(a[i]) + ")");
    out[i] = std::log(a[i]);
  }
  auto sa = a.detach();
  return detail::make("log", a.shape(), std::move(out), {&a},
                      [sa](std::span<const double> g, std::span<double* const> pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] / sa[i];
                      });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  const std::size_t n = a.numel();
  return detail::make("sum", Shape{1}, {s}, {&a}, [n](std::span<const double> g, std::span<double* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[0];
  });
}

// Softmax along `axis`, max-shifted.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto& dims = a.shape().dims();
  if (axis >= dims.size())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + a.shape().to_string());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= dims[i];
  for (std::size_t i = axis + 1; i < dims.size(); ++i) inner *= dims[i];
  const std::size_t len = dims[axis];
  std::vector<double> out(a.numel());
  const auto& x = a.storage();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  auto y = std::make_shared<const std::vector<double>>(out);
  return detail::make("softmax", a.shape(), std::move(out), {&a},
                      [y, outer, inner, len](std::span<const double> g, std::span<double* const> pg) {
                        if (!pg[0]) return;
                        for (std::size_t o = 0; o < outer; ++o) {
                          for (std::size_t in = 0; in < inner; ++in) {
                            const std::size_t base = o * len * inner + in;
                            double dot = 0.0;
                            for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * (*y)[base + k * inner];
                            for (std::size_t k = 0; k < len; ++k) {
                              const std::size_t idx = base + k * inner;
                              pg[0][idx] += (*y)[idx] * (g[idx] - dot);
                            }
                          }
                        }
                      });
}

// Column-wise concatenation of matrices with equal row counts.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  const std::size_t rows = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != rows)
      throw DimensionError("concat_cols: row mismatch " + parts[0].shape().to_string() + " vs " + p.shape().to_string());
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(rows * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out[r * total + off + c] = p.at(r, c);
    off += p.cols();
  }
  std::vector<const Tensor*> parents;
  for (const auto& p : parts) parents.push_back(&p);
  Tape* tape = nullptr;
  for (const auto* p : parents)
    if (p->tape()) tape = p->tape();
  Shape shape{rows, total};
  if (!tape) return Tensor(shape, std::move(out));
  return tape->record("concat_cols", shape, std::move(out), parents,
                      [rows, total, widths](std::span<const double> g, std::span<double* const> pg) {
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < widths.size(); ++k) {
                          if (pg[k])
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < widths[k]; ++c) pg[k][r * widths[k] + c] += g[r * total + off + c];
                          off += widths[k];
                        }
                      });
}

// Mean over rows of an [N x D] matrix -> [1 x D].
inline Tensor mean_rows(const Tensor& a) {
  detail::require_rank2(a, "mean_rows");
  const std::size_t n = a.rows(), d = a.cols();
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[c] += a.at(r, c);
  for (auto& x : out) x /= static_cast<double>(n);
  return detail::make("mean_rows", Shape{1, d}, std::move(out), {&a},
                      [n, d](std::span<const double> g, std::span<double* const> pg) {
                        if (!pg[0]) return;
                        const double inv = 1.0 / static_cast<double>(n);
                        for (std::size_t r = 0; r < n; ++r)
                          for (std::size_t c = 0; c < d; ++c) pg[0][r * d + c] += g[c] * inv;
                      });
}

// Column-wise max over rows -> [1 x D]. The gradient goes to the first
// row attaining the maximum.
inline Tensor max_rows(const Tensor& a) {
  detail::require_rank2(a, "max_rows");
  const std::size_t n = a.rows(), d = a.cols();
  std::vector<double> out(d);
  std::vector<std::size_t> arg(d, 0);
  for (std::size_t c = 0; c < d; ++c) {
    out[c] = a.at(0, c);
    for (std::size_t r = 1; r < n; ++r)
      if (a.at(r, c) > out[c]) {
        out[c] = a.at(r, c);
        arg[c] = r;
      }
  }
  return detail::make("max_rows", Shape{1, d}, std::move(out), {&a},
                      [arg, d](std::span<const double> g, std::span<double* const> pg) {
                        if (!pg[0]) return;
                        for (std::size_t c = 0; c < d; ++c) pg[0][arg[c] * d + c] += g[c];
                      });
}

enum class Mode { kTrain, kEval };

// Inverted dropout. Eval mode (or p == 0) returns the input unchanged.
inline Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
  if (mode == Mode::kEval || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out[i] = x[i] * (*mask)[i];
  }
  return detail::make("dropout", x.shape(), std::move(out), {&x},
                      [mask](std::span<const double> g, std::span<double* const> pg) {
                        if (!pg[0]) return;
                        for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i] * (*mask)[i];
                      });
}

// Mean over rows of -log softmax(logits)[target], via log-sum-exp.
inline Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets) {
  detail::require_rank2(logits, "cross_entropy_logits");
  const std::size_t b = logits.rows(), c = logits.cols();
  if (targets.size() != b)
    throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(b) + " rows");
  for (std::size_t r = 0; r < b; ++r)
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= c)
      throw LabelError("cross_entropy_logits: target " + std::to_string(targets[r]) + " out of range [0, " +
                       std::to_string(c) + ") at row " + std::to_string(r));
  auto probs = std::make_shared<std::vector<double>>(b * c);
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, logits.at(r, k));
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(logits.at(r, k) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < c; ++k) (*probs)[r * c + k] = std::exp(logits.at(r, k) - lse);
    loss += lse - logits.at(r, static_cast<std::size_t>(targets[r]));
  }
  loss /= static_cast<double>(b);
  std::vector<int> t(targets.begin(), targets.end());
  return detail::make("cross_entropy", Shape{1}, {loss}, {&logits},
                      [probs, t, b, c](std::span<const double> g, std::span<double* const> pg) {
                        if (!pg[0]) return;
                        const double s = g[0] / static_cast<double>(b);
                        for (std::size_t r = 0; r < b; ++r)
                          for (std::size_t k = 0; k < c; ++k) {
                            const double onehot = static_cast<int>(k) == t[r] ? 1.0 : 0.0;
                            pg[0][r * c + k] += s * ((*probs)[r * c + k] - onehot);
                          }
                      });
}

// Central-difference estimate of d f / d param. `f` must be deterministic.
inline Tensor finite_diff_grad(const std::function<double()>& f, Parameter& param, double step) {
  std::vector<double> out(param.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double orig = param.value[i];
    param.value[i] = orig + step;
    const double up = f();
    param.value[i] = orig - step;
    const double down = f();
    param.value[i] = orig;
    out[i] = (up - down) / (2.0 * step);
  }
  return Tensor(param.shape, std::move(out));
}

}  // namespace tcv2
