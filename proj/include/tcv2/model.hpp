#pragma once

// Encoder -> shared attention pooling -> per-task linear heads.

#include <map>
#include <string>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/pooling.hpp"
#include "tcv2/rng.hpp"
#include "tcv2/tasks.hpp"
#include "tcv2/tensor.hpp"

namespace tcv2 {

enum class Activation { kTanh, kRelu };

inline std::string to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "relu"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + s + "'");
}

// Instance encoder. The activation follows every layer, including the last.
struct EncoderConfig {
  std::size_t input_width = 32;
  std::vector<std::size_t> hidden_widths{64};
  std::size_t output_width = 64;
  Activation activation = Activation::kRelu;

  void validate() const {
    if (input_width == 0 || output_width == 0) throw ConfigError("encoder widths must be >= 1");
    for (auto w : hidden_widths)
      if (w == 0) throw ConfigError("encoder hidden widths must be >= 1");
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t heads = 8;
  std::size_t attention_width = 0;  // 0: max(D / 2, 16)
  double head_dropout = 0.1;

  AttentionPoolConfig pool_config() const { return {heads, encoder.output_width, attention_width}; }
};

struct LinearLayer {
  Parameter weight;  // [out x in]
  Parameter bias;    // [out]
};

struct TaskHead {
  std::string task_id;
  int num_classes = 2;
  double dropout_p = 0.1;
  LinearLayer linear;
};

enum class Scope { kEncoder, kPool, kHeads };

struct ForwardResult {
  Tensor logits;        // [1 x C]
  Tensor slide_vector;  // [1 x D]
  AttentionMap map;
};

class MultiTaskModel {
 public:
  MultiTaskModel() = default;

  MultiTaskModel(ModelConfig config, const TaskRegistry& registry) : config_(std::move(config)) {
    config_.encoder.validate();
    if (!(config_.head_dropout >= 0.0 && config_.head_dropout < 1.0))
      throw ConfigError("head dropout must be in [0, 1)");
    std::size_t in = config_.encoder.input_width;
    std::vector<std::size_t> widths = config_.encoder.hidden_widths;
    widths.push_back(config_.encoder.output_width);
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string id = "encoder.layer" + std::to_string(i);
      encoder_.push_back({Parameter(id + ".weight", Shape{widths[i], in}), Parameter(id + ".bias", Shape{widths[i]})});
      in = widths[i];
    }
    pool_ = AttentionPoolParams::zeros(config_.pool_config());
    for (const auto& t : registry) add_head(t);
  }

  const ModelConfig& config() const { return config_; }
  std::size_t input_width() const { return config_.encoder.input_width; }
  std::size_t embed_width() const { return config_.encoder.output_width; }

  void add_head(const TaskSpec& spec) {
    spec.validate();
    if (find_head(spec.task_id)) throw RegistryError("model already has a head for task '" + spec.task_id + "'");
    const std::string id = "head." + spec.task_id;
    const auto c = static_cast<std::size_t>(spec.num_classes);
    heads_.push_back({spec.task_id, spec.num_classes, config_.head_dropout,
                      {Parameter(id + ".weight", Shape{c, embed_width()}), Parameter(id + ".bias", Shape{c})}});
  }

  void clear_heads() { heads_.clear(); }

  TaskHead* find_head(const std::string& task_id) {
    for (auto& h : heads_)
      if (h.task_id == task_id) return &h;
    return nullptr;
  }

  TaskHead& head(const std::string& task_id) {
    if (TaskHead* h = find_head(task_id)) return *h;
    throw RegistryError("model has no head for task '" + task_id + "'");
  }

  std::vector<TaskHead>& heads() { return heads_; }
  const std::vector<TaskHead>& heads() const { return heads_; }
  AttentionPoolParams& pool() { return pool_; }
  std::vector<LinearLayer>& encoder() { return encoder_; }

  // Glorot-uniform encoder and pool, zero heads.
  void initialize(Rng& rng) {
    for (Parameter* p : parameters(Scope::kEncoder))
      if (p->shape.rank() == 2) glorot_uniform(*p, rng);
      else std::fill(p->value.begin(), p->value.end(), 0.0);
    init_pool(pool_, rng);
    for (Parameter* p : parameters(Scope::kHeads)) std::fill(p->value.begin(), p->value.end(), 0.0);
  }

  std::vector<Parameter*> parameters(Scope scope) {
    std::vector<Parameter*> out;
    switch (scope) {
      case Scope::kEncoder:
        for (auto& l : encoder_) {
          out.push_back(&l.weight);
          out.push_back(&l.bias);
        }
        break;
      case Scope::kPool: out = pool_.parameters(); break;
      case Scope::kHeads:
        for (auto& h : heads_) {
          out.push_back(&h.linear.weight);
          out.push_back(&h.linear.bias);
        }
        break;
    }
    return out;
  }

  // All parameters in a fixed order: encoder, pool, heads (registration order).
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (Scope s : {Scope::kEncoder, Scope::kPool, Scope::kHeads}) {
      auto part = parameters(s);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }

  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> out;
    for (Parameter* p : const_cast<MultiTaskModel*>(this)->parameters()) out.push_back(p);
    return out;
  }

  Parameter* find_parameter(const std::string& stable_id) {
    for (Parameter* p : parameters())
      if (p->stable_id == stable_id) return p;
    return nullptr;
  }

  void freeze(Scope scope, bool frozen = true) {
    for (Parameter* p : parameters(scope)) p->frozen = frozen;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  Tensor encode(const Tensor& bag, Tape& tape) {
    if (bag.shape().rank() != 2 || bag.cols() != input_width())
      throw DimensionError("encoder expects [N x " + std::to_string(input_width()) + "], got " + bag.shape().to_string());
    Tensor h = bag;
    for (auto& layer : encoder_) {
      Tensor w = tape.watch(layer.weight);
      Tensor b = tape.watch(layer.bias);
      h = add(matmul(h, transpose(w)), b);
      h = config_.encoder.activation == Activation::kTanh ? tanh(h) : relu(h);
    }
    return h;
  }

  ForwardResult forward_bag(const std::string& task_id, const Tensor& bag, Mode mode, Rng& rng, Tape& tape) {
    TaskHead& th = head(task_id);
    Tensor emb = encode(bag, tape);
    PoolResult pooled = pool_attention(emb, pool_, tape);
    Tensor z = dropout(pooled.slide_vector, th.dropout_p, mode, rng);
    Tensor w = tape.watch(th.linear.weight);
    Tensor b = tape.watch(th.linear.bias);
    Tensor logits = add(matmul(z, transpose(w)), b);
    return {logits, pooled.slide_vector, std::move(pooled.map)};
  }

 private:
  ModelConfig config_;
  std::vector<LinearLayer> encoder_;
  AttentionPoolParams pool_;
  std::vector<TaskHead> heads_;
};

// Free-function forms.
inline ForwardResult forward_bag(MultiTaskModel& model, const std::string& task_id, const Tensor& bag, Mode mode,
                                 Rng& rng, Tape& tape) {
  return model.forward_bag(task_id, bag, mode, rng, tape);
}

inline void freeze(MultiTaskModel& model, Scope scope) { model.freeze(scope); }

// Eval-mode forward with a throwaway tape; returns logits only.
inline std::vector<double> predict_logits(MultiTaskModel& model, const std::string& task_id, const Tensor& bag) {
  Tape tape(false);
  Rng unused(0);
  auto r = model.forward_bag(task_id, bag.detach(), Mode::kEval, unused, tape);
  return r.logits.storage();
}

}  // namespace tcv2
