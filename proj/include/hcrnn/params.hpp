#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "hcrnn/autodiff.hpp"
#include "hcrnn/random.hpp"
#include "hcrnn/tensor.hpp"

namespace hcrnn {

struct Parameter {
  std::string name;
  Tensor value;
};

/// Ordered, named collection of trainable tensors. Order is insertion order
/// and is the order used for gradient buffers, optimizer state and checkpoints.
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor init) {
    if (index_.contains(name)) throw ContractError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back(Parameter{std::move(name), std::move(init)});
    return entries_.size() - 1;
  }

  bool contains(std::string_view name) const { return index_.find(std::string(name)) != index_.end(); }

  std::size_t index(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InputError("unknown parameter: " + std::string(name));
    return it->second;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  Tensor& value(std::size_t i) { return entries_.at(i).value; }
  const Tensor& value(std::size_t i) const { return entries_.at(i).value; }
  Tensor& value(std::string_view name) { return entries_[index(name)].value; }
  const Tensor& value(std::string_view name) const { return entries_[index(name)].value; }
  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  const std::vector<Parameter>& entries() const noexcept { return entries_; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : entries_) n += p.value.size();
    return n;
  }

  /// Zero tensors shaped like every parameter.
  std::vector<Tensor> zeros_like() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& p : entries_) out.emplace_back(p.value.shape(), 0.0);
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
    }
    return true;
  }

 private:
  std::vector<Parameter> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Per-graph view of a ParamSet. Each parameter becomes a leaf the first time
/// it is requested; leaves view the ParamSet storage without copying.
class BoundParams {
 public:
  BoundParams(ad::Graph& graph, const ParamSet& params, bool requires_grad)
      : graph_(&graph), params_(&params), requires_grad_(requires_grad), vars_(params.size()) {}

  ad::Var operator[](std::size_t i) {
    if (!vars_[i].valid()) vars_[i] = graph_->bind(params_->value(i), requires_grad_);
    return vars_[i];
  }
  ad::Var get(std::string_view name) { return (*this)[params_->index(name)]; }

  ad::Graph& graph() const { return *graph_; }
  const ParamSet& params() const { return *params_; }
  bool requires_grad() const noexcept { return requires_grad_; }

  /// into[i] += scale * dLoss/dParam_i for every parameter reached by backward.
  void accumulate_grads(std::vector<Tensor>& into, double scale) const {
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      if (!vars_[i].valid()) continue;
      const Tensor& g = vars_[i].grad();
      if (g.empty()) continue;
      for (std::size_t k = 0; k < g.size(); ++k) into[i][k] += scale * g[k];
    }
  }

 private:
  ad::Graph* graph_;
  const ParamSet* params_;
  bool requires_grad_;
  std::vector<ad::Var> vars_;
};

/// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) with fan_in = rows.
inline Tensor uniform_init(std::size_t rows, std::size_t cols, std::mt19937_64& rng, std::size_t fan_in = 0) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in ? fan_in : rows));
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = (2.0 * uniform_unit(rng) - 1.0) * bound;
  return t;
}

}  // namespace hcrnn
