#pragma once

#include <cmath>
#include <vector>

#include "hcrnn/model.hpp"
#include "hcrnn/params.hpp"

namespace hcrnn {

struct AdamOptions {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;

  AdamState() = default;
  explicit AdamState(const ParamSet& params) : m(params.zeros_like()), v(params.zeros_like()) {}
};

/// One bias-corrected Adam update of every parameter.
inline void adam_step(ParamSet& params, const std::vector<Tensor>& grads, AdamState& state, const AdamOptions& opt) {
  if (grads.size() != params.size()) throw DimensionError("adam_step: one gradient per parameter expected");
  if (state.m.empty()) state = AdamState(params);
  if (state.m.size() != params.size()) throw DimensionError("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params.value(i);
    const Tensor& g = grads[i];
    if (g.size() != w.size()) throw DimensionError("adam_step: gradient shape mismatch for " + params.name(i));
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g[k];
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g[k] * g[k];
      w[k] -= opt.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt.eps);
    }
  }
}

/// Adam followed by the model's projection (W_d >= 0).
inline void optimizer_step(Model& model, const std::vector<Tensor>& grads, AdamState& state, const AdamOptions& opt) {
  adam_step(model.params(), grads, state, opt);
  model.project_constraints();
}

inline double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double x : g.data()) s += x * x;
  return std::sqrt(s);
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. max_norm == 0 disables clipping.
inline double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  const double n = global_norm(grads);
  if (max_norm > 0.0 && n > max_norm) {
    const double s = max_norm / n;
    for (auto& g : grads)
      for (double& x : g.data()) x *= s;
  }
  return n;
}

}  // namespace hcrnn
