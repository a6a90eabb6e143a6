#pragma once

// Finite-difference checks of every differentiable component on small
// seeded instances. Used by `hcrnn gradcheck` and the test suites.

#include <random>
#include <string>
#include <vector>

#include "hcrnn/attention.hpp"
#include "hcrnn/cells.hpp"
#include "hcrnn/global_context.hpp"
#include "hcrnn/gradcheck.hpp"
#include "hcrnn/model.hpp"
#include "hcrnn/training.hpp"

namespace hcrnn {

struct GradCheckSetup {
  std::size_t embed_dim = 6;
  std::size_t hidden_dim = 6;
  std::size_t num_contexts = 4;
  std::size_t num_items = 9;
  std::size_t steps = 4;
  double eps = 1e-5;
};

struct GradCheckRow {
  std::string component;
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
};

namespace detail {
inline Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data()) v = scale * (2.0 * uniform_unit(rng) - 1.0);
  return t;
}

/// Keeps W_d away from the constraint boundary so +-eps stays feasible.
inline void lift_drift_weights(ParamSet& ps) {
  if (!ps.contains("cell.W_d")) return;
  for (double& v : ps.value("cell.W_d").data()) v = std::abs(v) + 0.05;
}

inline GradCheckRow make_row(std::string name, const ParamCheckResult& r) {
  return {std::move(name), r.max_relative_error, r.coordinates, r.worst_parameter};
}

/// Loss = sum_t <h_t, U_t> + <c_t, V_t> over an unrolled sequence whose
/// inputs (and, for hierarchical cells, theta logits and M_global) are
/// themselves checked parameters.
inline GradCheckRow check_cell(CellKind kind, const GradCheckSetup& s, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, {0xce11, static_cast<std::uint64_t>(kind)}));
  const CellDims dims{s.embed_dim, s.hidden_dim, s.num_contexts};
  const bool hier = is_hierarchical(kind);
  const std::size_t cdim = kind == CellKind::lstm ? s.hidden_dim : s.embed_dim;
  ParamSet ps;
  add_cell_params(ps, kind, dims, rng);
  lift_drift_weights(ps);
  ps.add("input", random_matrix(s.steps, s.embed_dim, rng));
  if (hier) {
    ps.add("global.M", random_matrix(s.num_contexts, s.embed_dim, rng));
    ps.add("theta_logits", random_matrix(1, s.num_contexts, rng));
  }
  const Tensor U = random_matrix(s.steps, s.hidden_dim, rng);
  const Tensor V = random_matrix(s.steps, cdim, rng);
  auto loss = [&](BoundParams& p) {
    using namespace ad;
    Graph& g = p.graph();
    Var x_all = p.get("input");
    std::vector<Var> xs;
    for (std::size_t t = 0; t < s.steps; ++t) xs.push_back(slice_rows(x_all, t, t + 1));
    GlobalContextVars global;
    if (hier) global = {softmax(p.get("theta_logits")), p.get("global.M")};
    Unrolled u = unroll_sequence(xs, kind, dims, bind_cell(p), global, false);
    std::vector<Var> terms;
    for (std::size_t t = 0; t < s.steps; ++t) {
      const auto& st = u.states[t];
      Var ut = g.constant(Tensor({1, s.hidden_dim}, {U.data().begin() + t * s.hidden_dim, U.data().begin() + (t + 1) * s.hidden_dim}));
      terms.push_back(sum(st.h * ut));
      if (st.c.valid()) {
        Var vt = g.constant(Tensor({1, cdim}, {V.data().begin() + t * cdim, V.data().begin() + (t + 1) * cdim}));
        terms.push_back(sum(st.c * vt));
      }
    }
    return sum(stack_rows(terms));
  };
  return make_row("cell:" + std::string(to_string(kind)), numeric_grad_check(ps, loss, s.eps));
}

inline GradCheckRow check_attention(const GradCheckSetup& s, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, {0xa77}));
  ParamSet ps;
  add_attention_params(ps, s.embed_dim, s.hidden_dim, rng);
  ps.add("h_all", random_matrix(s.steps, s.hidden_dim, rng));
  ps.add("c_all", random_matrix(s.steps, s.embed_dim, rng));
  const Tensor R = random_matrix(s.steps, 2 * s.hidden_dim, rng);
  auto loss = [&](BoundParams& p) {
    using namespace ad;
    AttentionWeights w = bind_attention(p);
    Var h = p.get("h_all");
    Var mixed = concat({matmul(local_attention_matrix(p.get("c_all"), w), h), matmul(temporary_attention_matrix(h, w), h)});
    return sum(mixed * p.graph().constant(R));
  };
  return make_row("attention:bi", numeric_grad_check(ps, loss, s.eps));
}

inline GradCheckRow check_decoder(const GradCheckSetup& s, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, {0xdec}));
  ParamSet ps;
  ps.add("embedding", uniform_init(s.num_items, s.embed_dim, rng, s.embed_dim));
  add_decoder_params(ps, AttentionMode::bi, s.embed_dim, s.hidden_dim, rng);
  ps.add("decoder_input", random_matrix(s.steps, 3 * s.hidden_dim, rng));
  std::vector<std::size_t> targets;
  for (std::size_t t = 0; t < s.steps; ++t) targets.push_back(uniform_index(rng, s.num_items));
  auto loss = [&](BoundParams& p) {
    using namespace ad;
    Decoded d = attend_and_decode(p.get("decoder_input"), {}, AttentionMode::none, {}, p.get("decoder.W_B"),
                                  p.get("embedding"));
    return -sum(log(pick(d.probs, targets)));
  };
  return make_row("decoder:bilinear", numeric_grad_check(ps, loss, s.eps));
}

inline GradCheckRow check_inference(const GradCheckSetup& s, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, {0x1f3}));
  const CellDims dims{s.embed_dim, s.hidden_dim, s.num_contexts};
  ParamSet ps;
  add_global_context_params(ps, dims, rng);
  ps.add("embedded", random_matrix(s.steps, s.embed_dim, rng));
  const Tensor noise({1, s.num_contexts}, standard_normal_vector(s.num_contexts, derive_seed(seed, {0x1f4})));
  const Tensor R = random_matrix(1, s.num_contexts, rng);
  auto loss = [&](BoundParams& p) {
    using namespace ad;
    Posterior q = infer_posterior(p.get("embedded"), bind_inference(p));
    ThetaSample th = sample_theta(q.mu, q.log_sigma, noise);
    Var mixed = matmul(th.theta, p.get("global.M"));
    return kl_to_standard_normal(q.mu, q.log_sigma) + sum(th.theta * p.graph().constant(R)) + sum(mixed * mixed);
  };
  return make_row("inference:posterior", numeric_grad_check(ps, loss, s.eps));
}

/// Full training loss (dropout masks and theta noise fixed by the seed) on a
/// two-instance batch with `steps` prediction steps each.
inline GradCheckRow check_total_loss(CellKind kind, AttentionMode mode, const GradCheckSetup& s, std::uint64_t seed) {
  const ModelSpec spec{kind, mode, s.num_items, {s.embed_dim, s.hidden_dim, s.num_contexts}};
  Model model(spec, derive_seed(seed, {0x7017, static_cast<std::uint64_t>(kind)}));
  detail::lift_drift_weights(model.params());
  std::mt19937_64 rng(derive_seed(seed, {0x7018, static_cast<std::uint64_t>(kind)}));
  std::vector<Instance> batch(2);
  for (auto& inst : batch) {
    for (std::size_t t = 0; t <= s.steps; ++t) inst.items.push_back(uniform_index(rng, s.num_items));
  }
  ForwardOptions opt;
  opt.sample_theta = true;
  opt.input_dropout = 0.25;
  opt.output_dropout = 0.5;
  opt.kl_weight = 1.0;
  const std::uint64_t batch_seed = derive_seed(seed, {0x7019});
  auto loss = [&](BoundParams& p) { return total_loss(p, spec, batch, opt, batch_seed); };
  return make_row("total_loss:" + model_label(spec), numeric_grad_check(model.params(), loss, s.eps));
}
}  // namespace detail

/// Runs every check; each row's max_relative_error should be below 1e-4.
inline std::vector<GradCheckRow> run_gradient_suite(std::uint64_t seed, const GradCheckSetup& setup = {}) {
  std::vector<GradCheckRow> rows;
  for (CellKind k : {CellKind::lstm, CellKind::gru, CellKind::hcrnn1, CellKind::hcrnn2, CellKind::hcrnn3}) {
    rows.push_back(detail::check_cell(k, setup, seed));
  }
  rows.push_back(detail::check_attention(setup, seed));
  rows.push_back(detail::check_decoder(setup, seed));
  rows.push_back(detail::check_inference(setup, seed));
  for (CellKind k : {CellKind::lstm, CellKind::gru, CellKind::hcrnn1, CellKind::hcrnn2, CellKind::hcrnn3}) {
    rows.push_back(detail::check_total_loss(k, AttentionMode::none, setup, seed));
    if (is_hierarchical(k)) rows.push_back(detail::check_total_loss(k, AttentionMode::bi, setup, seed));
  }
  return rows;
}

}  // namespace hcrnn
