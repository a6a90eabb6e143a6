#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "hcrnn/autodiff.hpp"
#include "hcrnn/params.hpp"

namespace hcrnn {

using ScalarFn = std::function<ad::Var(ad::Graph&, ad::Var)>;
using ParamLossFn = std::function<ad::Var(BoundParams&)>;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

inline void check_eps(double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ContractError("numeric_grad_check: eps must lie in [1e-7, 1e-3]");
}

/// Max over coordinates of |analytic - central difference| / max(1, |a|, |n|).
inline double numeric_grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5) {
  check_eps(eps);
  Tensor analytic;
  {
    ad::Graph g;
    ad::Var xv = g.variable(x);
    ad::Var y = f(g, xv);
    g.backward(y);
    analytic = xv.grad().empty() ? Tensor(x.shape(), 0.0) : xv.grad();
  }
  auto eval = [&](const Tensor& at) {
    ad::Graph g;
    return f(g, g.constant(at)).value().item();
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * eps)));
  }
  return worst;
}

struct ParamCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
};

/// Central-difference check of d(loss)/d(every parameter entry).
/// `loss` must be a deterministic function of the parameters.
inline ParamCheckResult numeric_grad_check(ParamSet& params, const ParamLossFn& loss, double eps = 1e-5) {
  check_eps(eps);
  std::vector<Tensor> analytic = params.zeros_like();
  {
    ad::Graph g;
    BoundParams bound(g, params, true);
    ad::Var y = loss(bound);
    g.backward(y);
    bound.accumulate_grads(analytic, 1.0);
  }
  auto eval = [&] {
    ad::Graph g;
    BoundParams bound(g, params, false);
    return loss(bound).value().item();
  };
  ParamCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = params.value(p);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double up = eval();
      w[i] = orig - eps;
      const double down = eval();
      w[i] = orig;
      const double err = relative_error(analytic[p][i], (up - down) / (2.0 * eps));
      ++result.coordinates;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_parameter = params.name(p);
      }
    }
  }
  return result;
}

}  // namespace hcrnn
