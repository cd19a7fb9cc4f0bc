#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mvf/params.hpp"

namespace mvf {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. Moment buffers are keyed by parameter name and
// allocated on first use; the step counter advances once per adam_step call.
struct AdamState {
  AdamConfig cfg;
  std::int64_t step_count = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

inline void adam_step(ParamStore& params, AdamState& state) {
  ++state.step_count;
  const auto& c = state.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step_count));
  for (const auto& name : params.names()) {
    Tensor p = params.get(name);
    const std::vector<double>& g = p.grad();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(g.size(), 0.0);
    if (v.empty()) v.assign(g.size(), 0.0);
    if (m.size() != g.size() || v.size() != g.size()) {
      throw DimensionError("adam_step: moment buffers for " + name + " do not match parameter size");
    }
    auto& val = p.mutable_values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      val[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

}  // namespace mvf
