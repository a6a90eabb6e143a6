#pragma once

// Full next-item model: embedding, recurrent cell, optional global context,
// optional bi-channel attention and the bilinear decoder.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hcrnn/attention.hpp"
#include "hcrnn/autodiff.hpp"
#include "hcrnn/cells.hpp"
#include "hcrnn/global_context.hpp"
#include "hcrnn/params.hpp"
#include "hcrnn/random.hpp"

namespace hcrnn {

inline constexpr double kProbabilityFloor = 1e-12;

struct ModelSpec {
  CellKind cell = CellKind::hcrnn3;
  AttentionMode attention = AttentionMode::bi;
  std::size_t num_items = 0;
  CellDims dims;
};

/// "hcrnn3+bi", "gru", ...
inline std::string model_label(const ModelSpec& spec) {
  std::string s(to_string(spec.cell));
  if (spec.attention == AttentionMode::bi) s += "+bi";
  return s;
}

class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed) : spec_(spec) {
    validate();
    std::mt19937_64 rng(derive_seed(seed, {0x1417}));
    const auto& d = spec_.dims;
    params_.add("embedding", uniform_init(spec_.num_items, d.embed_dim, rng, d.embed_dim));
    add_cell_params(params_, spec_.cell, d, rng);
    if (is_hierarchical(spec_.cell)) add_global_context_params(params_, d, rng);
    if (spec_.attention == AttentionMode::bi) add_attention_params(params_, d.embed_dim, d.hidden_dim, rng);
    add_decoder_params(params_, spec_.attention, d.embed_dim, d.hidden_dim, rng);
  }

  /// Adopts trained parameters; names and shapes must match a fresh model.
  Model(ModelSpec spec, ParamSet params) : Model(spec, 0) {
    if (params.size() != params_.size()) throw InputError("parameter set does not match model layout");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params.name(i) != params_.name(i) || params.value(i).shape() != params_.value(i).shape()) {
        throw InputError("parameter " + params.name(i) + " does not match model layout");
      }
    }
    params_ = std::move(params);
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  ParamSet& params() noexcept { return params_; }
  const ParamSet& params() const noexcept { return params_; }

  /// Restores W_d >= 0 after an optimizer update.
  void project_constraints() {
    if (params_.contains("cell.W_d")) project_nonnegative(params_.value("cell.W_d"));
  }

 private:
  void validate() const {
    const auto& d = spec_.dims;
    if (spec_.num_items == 0 || d.embed_dim == 0 || d.hidden_dim == 0) throw InputError("model dimensions must be positive");
    if (is_hierarchical(spec_.cell) && d.num_contexts == 0) throw InputError("hierarchical cells need K >= 1");
    if (spec_.attention == AttentionMode::bi && !is_hierarchical(spec_.cell)) {
      throw InputError("bi-channel attention needs a hierarchical cell (it scores local contexts)");
    }
  }

  ModelSpec spec_;
  ParamSet params_;
};

struct ForwardOptions {
  bool sample_theta = false;  // draw theta_tilde; otherwise theta_tilde = mu
  double input_dropout = 0.0;
  double output_dropout = 0.0;
  std::uint64_t seed = 0;  // drives dropout masks and the theta noise
  double kl_weight = 1.0;
  bool record_gates = false;
  bool last_step_only = false;  // decode only the final step
};

struct ForwardResult {
  Unrolled unrolled;
  ad::Var h_all;  // T x H
  ad::Var c_all;  // T x D, hierarchical cells only
  Posterior posterior;
  ThetaSample theta;
  Decoded decoded;
  ad::Var cross_entropy;  // sum over steps of -log y_hat[target]
  ad::Var kl;
  ad::Var loss;
};

/// Builds the computation for one instance. `targets` may be empty (no loss),
/// otherwise it holds one next item per input step (or one item when
/// `last_step_only`). The posterior sees only `inputs`.
inline ForwardResult forward(BoundParams& p, const ModelSpec& spec, std::span<const std::size_t> inputs,
                             std::span<const std::size_t> targets, const ForwardOptions& opt) {
  using namespace ad;
  if (inputs.empty()) throw InputError("forward: empty input sequence");
  for (std::size_t id : inputs) {
    if (id >= spec.num_items) throw InputError("forward: item id " + std::to_string(id) + " out of vocabulary");
  }
  const std::size_t T = inputs.size();
  ForwardResult r;
  Var emb = p.get("embedding");
  CellWeights cw = bind_cell(p);

  GlobalContextVars global;
  if (is_hierarchical(spec.cell)) {
    r.posterior = infer_posterior(gather_rows(emb, inputs), bind_inference(p));
    Tensor noise;
    if (opt.sample_theta) {
      noise = Tensor({1, spec.dims.num_contexts},
                     standard_normal_vector(spec.dims.num_contexts, derive_seed(opt.seed, {0x7e7a})));
    }
    r.theta = sample_theta(r.posterior.mu, r.posterior.log_sigma, noise);
    global = {r.theta.theta, p.get("global.M")};
  }

  Var x_all = gather_rows(emb, inputs);
  if (opt.input_dropout > 0.0) x_all = dropout(x_all, opt.input_dropout, derive_seed(opt.seed, {0xd1}));
  std::vector<Var> xs;
  xs.reserve(T);
  for (std::size_t t = 0; t < T; ++t) xs.push_back(T == 1 ? x_all : slice_rows(x_all, t, t + 1));

  r.unrolled = unroll_sequence(xs, spec.cell, spec.dims, cw, global, opt.record_gates);
  std::vector<Var> hs, cs;
  hs.reserve(T);
  for (const auto& s : r.unrolled.states) {
    hs.push_back(s.h);
    if (is_hierarchical(spec.cell)) cs.push_back(s.c);
  }
  r.h_all = T == 1 ? hs[0] : stack_rows(hs);
  if (!cs.empty()) r.c_all = T == 1 ? cs[0] : stack_rows(cs);

  AttentionWeights aw;
  if (spec.attention == AttentionMode::bi) aw = bind_attention(p);
  Var W_B = p.get("decoder.W_B");
  const std::uint64_t out_seed = derive_seed(opt.seed, {0xd2});
  if (opt.last_step_only) {
    Var h_t = slice_rows(r.h_all, T - 1, T);
    Var u = h_t;
    if (spec.attention == AttentionMode::bi) {
      r.decoded.alpha_c = local_attention(r.c_all, T, aw);
      r.decoded.alpha_h = temporary_attention(r.h_all, T, aw);
      u = concat({h_t, matmul(r.decoded.alpha_c, r.h_all), matmul(r.decoded.alpha_h, r.h_all)});
    }
    if (opt.output_dropout > 0.0) u = dropout(u, opt.output_dropout, out_seed);
    r.decoded.logits = matmul(matmul(u, W_B), transpose(emb));
    r.decoded.probs = softmax(r.decoded.logits);
  } else {
    r.decoded = attend_and_decode(r.h_all, r.c_all, spec.attention, aw, W_B, emb, opt.output_dropout, out_seed);
  }

  if (!targets.empty()) {
    if (targets.size() != r.decoded.probs.rows()) throw DimensionError("forward: need one target per decoded step");
    for (std::size_t id : targets) {
      if (id >= spec.num_items) throw InputError("forward: target id out of vocabulary");
    }
    r.cross_entropy = -sum(log(pick(r.decoded.probs, targets), kProbabilityFloor));
    r.loss = r.cross_entropy;
    if (is_hierarchical(spec.cell)) {
      r.kl = kl_to_standard_normal(r.posterior.mu, r.posterior.log_sigma);
      if (opt.kl_weight != 0.0) r.loss = r.cross_entropy + opt.kl_weight * r.kl;
    }
  }
  return r;
}

/// Model output for one prediction event: scores for the next item after a
/// prefix, plus the analysis record of the prefix's last step.
struct EventPrediction {
  std::vector<double> logits;
  StepTrace trace;
  std::vector<double> alpha_c;  // weights over steps 1..t, empty without attention
  std::vector<double> alpha_h;
};

namespace detail {
inline std::vector<double> row_values(ad::Var m, std::size_t row, std::size_t width) {
  const Tensor& v = m.value();
  const std::size_t c = v.cols();
  return {v.data().begin() + static_cast<std::ptrdiff_t>(row * c),
          v.data().begin() + static_cast<std::ptrdiff_t>(row * c + width)};
}
}  // namespace detail

/// One prediction per event t = 1..n-1 (predict items[t] from items[0..t-1]).
/// Hierarchical cells re-run per prefix so the posterior never sees the
/// future; the other cells are causal in a single pass.
inline std::vector<EventPrediction> predict_events(const Model& model, std::span<const std::size_t> items,
                                                   bool with_traces = true) {
  std::vector<EventPrediction> out;
  if (items.size() < 2) return out;
  const ModelSpec& spec = model.spec();
  const std::size_t n = items.size();
  ForwardOptions opt;
  opt.record_gates = with_traces;
  if (!is_hierarchical(spec.cell)) {
    ad::Graph g;
    BoundParams p(g, model.params(), false);
    ForwardResult r = forward(p, spec, items.first(n - 1), {}, opt);
    std::vector<StepTrace> traces = with_traces ? extract_traces(r.unrolled) : std::vector<StepTrace>{};
    for (std::size_t t = 0; t + 1 < n; ++t) {
      EventPrediction e;
      e.logits = detail::row_values(r.decoded.logits, t, spec.num_items);
      if (with_traces) e.trace = traces[t];
      out.push_back(std::move(e));
    }
    return out;
  }
  opt.last_step_only = true;
  ad::Graph g;
  for (std::size_t t = 1; t < n; ++t) {
    g.clear();
    BoundParams p(g, model.params(), false);
    ForwardResult r = forward(p, spec, items.first(t), {}, opt);
    EventPrediction e;
    e.logits = detail::row_values(r.decoded.logits, 0, spec.num_items);
    if (with_traces) e.trace = extract_traces(r.unrolled).back();
    if (r.decoded.alpha_c.valid()) {
      e.alpha_c = detail::row_values(r.decoded.alpha_c, 0, t);
      e.alpha_h = detail::row_values(r.decoded.alpha_h, 0, t);
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// Scores for the item following `prefix`.
inline std::vector<double> predict_next(const Model& model, std::span<const std::size_t> prefix) {
  ad::Graph g;
  BoundParams p(g, model.params(), false);
  ForwardOptions opt;
  opt.last_step_only = true;
  ForwardResult r = forward(p, model.spec(), prefix, {}, opt);
  return detail::row_values(r.decoded.logits, 0, model.spec().num_items);
}

}  // namespace hcrnn
