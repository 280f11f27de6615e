#pragma once

// Multi-head attention pooling over a bag of instance embeddings.
//
// Head h scores instance k as w_h . tanh(V_h e_k); a softmax over the bag
// gives the head's weights alpha_h and the head vector z_h = sum_k alpha_hk e_k.
// The slide vector is W_o [z_1 ... z_H], projecting back to the embedding width.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/rng.hpp"
#include "tcv2/tensor.hpp"

namespace tcv2 {

struct AttentionPoolConfig {
  std::size_t heads = 8;
  std::size_t embed_width = 64;
  // 0 selects max(embed_width / 2, 16).
  std::size_t attention_width = 0;

  std::size_t resolved_attention_width() const {
    return attention_width ? attention_width : std::max<std::size_t>(embed_width / 2, 16);
  }
};

struct AttentionPoolParams {
  std::vector<Parameter> score_matrices;  // per head, [D_att x D]
  std::vector<Parameter> score_vectors;   // per head, [D_att x 1]
  Parameter output_projection;            // [D x H*D]

  std::size_t heads() const { return score_matrices.size(); }
  std::size_t embed_width() const { return output_projection.shape[0]; }
  std::size_t attention_width() const { return score_matrices.at(0).shape[0]; }

  static AttentionPoolParams zeros(const AttentionPoolConfig& cfg, const std::string& prefix = "pool") {
    if (cfg.heads == 0) throw ConfigError("attention pool needs at least one head");
    if (cfg.embed_width == 0) throw ConfigError("attention pool embed width must be >= 1");
    const std::size_t d = cfg.embed_width, da = cfg.resolved_attention_width();
    AttentionPoolParams p;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const std::string head = prefix + ".head" + std::to_string(h);
      p.score_matrices.emplace_back(head + ".V", Shape{da, d});
      p.score_vectors.emplace_back(head + ".w", Shape{da, 1});
    }
    p.output_projection = Parameter(prefix + ".out", Shape{d, cfg.heads * d});
    return p;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (std::size_t h = 0; h < heads(); ++h) {
      out.push_back(&score_matrices[h]);
      out.push_back(&score_vectors[h]);
    }
    out.push_back(&output_projection);
    return out;
  }
};

// Per-head instance weights, one row per head, columns in bag order.
struct AttentionMap {
  std::size_t heads = 0;
  std::size_t instances = 0;
  std::vector<double> weights;  // row-major [heads x instances]
  std::vector<std::size_t> instance_ids;

  double at(std::size_t head, std::size_t k) const { return weights[head * instances + k]; }

  std::vector<double> mean_over_heads() const {
    std::vector<double> out(instances, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t k = 0; k < instances; ++k) out[k] += at(h, k);
    for (auto& x : out) x /= static_cast<double>(heads);
    return out;
  }
};

struct PoolResult {
  Tensor slide_vector;  // [1 x D]
  Tensor head_vectors;  // [1 x H*D], concat of z_h
  AttentionMap map;
};

inline PoolResult pool_attention(const Tensor& bag, AttentionPoolParams& params, Tape& tape) {
  if (bag.shape().rank() != 2) throw DimensionError("pool_attention: bag must be [N x D], got " + bag.shape().to_string());
  const std::size_t n = bag.rows();
  const std::size_t d = params.embed_width();
  if (bag.cols() != d)
    throw DimensionError("pool_attention: bag width " + std::to_string(bag.cols()) + " but pool expects " +
                         std::to_string(d));
  const std::size_t heads = params.heads();

  PoolResult out;
  out.map.heads = heads;
  out.map.instances = n;
  out.map.weights.resize(heads * n);
  out.map.instance_ids.resize(n);
  for (std::size_t k = 0; k < n; ++k) out.map.instance_ids[k] = k;

  std::vector<Tensor> zs;
  zs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor v = tape.watch(params.score_matrices[h]);
    Tensor w = tape.watch(params.score_vectors[h]);
    Tensor hidden = tanh(matmul(bag, transpose(v)));  // [N x D_att]
    Tensor scores = matmul(hidden, w);                 // [N x 1]
    Tensor alpha = softmax(scores, 0);                 // [N x 1]
    for (std::size_t k = 0; k < n; ++k) out.map.weights[h * n + k] = alpha[k];
    zs.push_back(matmul(transpose(alpha), bag));  // [1 x D]
  }
  out.head_vectors = concat_cols(zs);
  Tensor wo = tape.watch(params.output_projection);
  out.slide_vector = matmul(out.head_vectors, transpose(wo));
  return out;
}

inline Tensor pool_mean(const Tensor& bag) {
  if (bag.shape().rank() != 2) throw DimensionError("pool_mean: bag must be [N x D], got " + bag.shape().to_string());
  return mean_rows(bag);
}

inline Tensor pool_max(const Tensor& bag) {
  if (bag.shape().rank() != 2) throw DimensionError("pool_max: bag must be [N x D], got " + bag.shape().to_string());
  return max_rows(bag);
}

// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
inline void glorot_uniform(Parameter& p, Rng& rng) {
  const std::size_t fan_out = p.shape[0];
  const std::size_t fan_in = p.shape.rank() > 1 ? p.shape[1] : 1;
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& x : p.value) x = rng.uniform(-a, a);
}

inline void init_pool(AttentionPoolParams& params, Rng& rng) {
  for (Parameter* p : params.parameters()) glorot_uniform(*p, rng);
}

}  // namespace tcv2
