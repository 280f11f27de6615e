#pragma once

// AdamW with decoupled weight decay.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tcv2/errors.hpp"
#include "tcv2/tensor.hpp"

namespace tcv2 {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("AdamW betas must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("AdamW eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  }
};

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
  friend bool operator==(const Moments&, const Moments&) = default;
};

// First/second moments keyed by parameter stable id, plus the shared step count.
struct OptimizerState {
  std::map<std::string, Moments> moments;
  std::uint64_t step = 0;
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

// One AdamW update over every unfrozen parameter. The step counter advances
// once per call, regardless of how many parameters are updated.
inline void adamw_step(const std::vector<Parameter*>& params, OptimizerState& state, const AdamWConfig& cfg) {
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (Parameter* p : params) {
    if (p->frozen) continue;
    auto& mom = state.moments[p->stable_id];
    if (mom.m.empty()) {
      mom.m.assign(p->value.size(), 0.0);
      mom.v.assign(p->value.size(), 0.0);
    }
    if (mom.m.size() != p->value.size())
      throw DimensionError("optimizer moments for " + p->stable_id + " do not match the parameter shape");
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
      mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      double theta = p->value[i];
      theta -= cfg.lr * cfg.weight_decay * theta;
      theta -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      p->value[i] = theta;
    }
  }
}

}  // namespace tcv2
