#pragma once

// Recurrent cells: LSTM with peepholes, GRU and the three hierarchical-context
// cells. Vectors are 1 x n rows; weights multiply from the right (x W).
//
// Shapes: x_t is 1 x D, h_t is 1 x H, c_t is 1 x D for the hierarchical cells
// and 1 x H for the LSTM. M_global is K x D, theta is 1 x K.

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hcrnn/autodiff.hpp"
#include "hcrnn/params.hpp"

namespace hcrnn {

enum class CellKind { lstm, gru, hcrnn1, hcrnn2, hcrnn3 };

inline std::string_view to_string(CellKind k) {
  switch (k) {
    case CellKind::lstm: return "lstm";
    case CellKind::gru: return "gru";
    case CellKind::hcrnn1: return "hcrnn1";
    case CellKind::hcrnn2: return "hcrnn2";
    case CellKind::hcrnn3: return "hcrnn3";
  }
  return "?";
}

inline CellKind parse_cell(std::string_view s) {
  for (CellKind k : {CellKind::lstm, CellKind::gru, CellKind::hcrnn1, CellKind::hcrnn2, CellKind::hcrnn3}) {
    if (to_string(k) == s) return k;
  }
  throw InputError("unknown cell variant: " + std::string(s));
}

inline bool is_hierarchical(CellKind k) {
  return k == CellKind::hcrnn1 || k == CellKind::hcrnn2 || k == CellKind::hcrnn3;
}
inline bool has_drift_weights(CellKind k) { return k == CellKind::hcrnn2 || k == CellKind::hcrnn3; }

struct CellDims {
  std::size_t embed_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t num_contexts = 0;
};

struct CellState {
  ad::Var h;  // temporary context
  ad::Var c;  // local context (cell state for the LSTM); invalid for the GRU
};

/// Gate handles of one step; absent gates stay invalid.
struct StepGates {
  ad::Var input, forget, output;  // LSTM
  ad::Var update, reset;          // z_t, r_t
  ad::Var local;                  // G^(c)
  ad::Var drift;                  // G^(d)
  ad::Var memory_attention;       // alpha over K global contexts
};

/// Plain-value record of one step for analysis.
struct StepTrace {
  std::vector<double> r, z, g_c, g_d, i, f, o, alpha_mem;
  double delta_h = 0.0;  // mean |h_t - h_{t-1}|
  double delta_c = 0.0;  // mean |c_t - c_{t-1}|

  /// Mean of the gate multiplying h_{t-1} inside the candidate:
  /// r_t * G^(d)_t for HCRNN-3, r_t otherwise.
  double mean_retention() const {
    if (r.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) s += g_d.empty() ? r[k] : r[k] * g_d[k];
    return s / static_cast<double>(r.size());
  }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace detail {
inline void add_matrix(ParamSet& ps, const std::string& name, std::size_t rows, std::size_t cols,
                       std::mt19937_64& rng) {
  ps.add(name, uniform_init(rows, cols, rng));
}
inline void add_bias(ParamSet& ps, const std::string& name, std::size_t cols) {
  ps.add(name, Tensor::matrix(1, cols));
}
}  // namespace detail

/// Registers every weight of `kind` under "cell.*" (plus "memory.*" for the
/// hierarchical cells). W_d starts at |uniform init| so W_d >= 0 from step 0.
inline void add_cell_params(ParamSet& ps, CellKind kind, const CellDims& d, std::mt19937_64& rng) {
  using detail::add_bias;
  using detail::add_matrix;
  const std::size_t D = d.embed_dim, H = d.hidden_dim;
  if (kind == CellKind::lstm) {
    for (const char* g : {"i", "f", "c", "o"}) {
      add_matrix(ps, std::string("cell.W_x") + g, D, H, rng);
      add_matrix(ps, std::string("cell.W_h") + g, H, H, rng);
      if (std::string_view(g) != "c") ps.add(std::string("cell.w_c") + g, uniform_init(1, H, rng, H));
      add_bias(ps, std::string("cell.b_") + g, H);
    }
    return;
  }
  const bool hier = is_hierarchical(kind);
  if (hier) {
    add_matrix(ps, "memory.W_h_alpha", H, H, rng);
    add_matrix(ps, "memory.W_theta_alpha", D, H, rng);
    add_matrix(ps, "memory.v_theta", H, 1, rng);
    add_matrix(ps, "cell.W_xl", D, D, rng);
    add_matrix(ps, "cell.W_hl", H, D, rng);
    add_matrix(ps, "cell.W_cl", D, D, rng);
    add_bias(ps, "cell.b_l", D);
  }
  add_matrix(ps, "cell.W_xz", D, H, rng);
  add_matrix(ps, "cell.W_hz", H, H, rng);
  if (hier) add_matrix(ps, "cell.W_cz", D, H, rng);
  add_bias(ps, "cell.b_z", H);
  add_matrix(ps, "cell.W_xr", D, H, rng);
  add_matrix(ps, "cell.W_hr", H, H, rng);
  if (kind == CellKind::hcrnn1) add_matrix(ps, "cell.W_cr", D, H, rng);
  add_bias(ps, "cell.b_r", H);
  if (has_drift_weights(kind)) {
    Tensor wd = uniform_init(D, H, rng);
    for (double& v : wd.data()) v = std::abs(v);
    ps.add("cell.W_d", std::move(wd));
  }
  if (kind == CellKind::hcrnn3) add_bias(ps, "cell.b_d", H);
  add_matrix(ps, "cell.W_xh", D, H, rng);
  add_matrix(ps, "cell.W_hh", H, H, rng);
  add_bias(ps, "cell.b_h", H);
}

struct CellWeights {
  ad::Var W_xi, W_hi, w_ci, b_i, W_xf, W_hf, w_cf, b_f, W_xc, W_hc, b_c, W_xo, W_ho, w_co, b_o;
  ad::Var W_xz, W_hz, W_cz, b_z, W_xr, W_hr, W_cr, b_r, W_xh, W_hh, b_h;
  ad::Var W_xl, W_hl, W_cl, b_l;
  ad::Var W_d, b_d;
  ad::Var W_h_alpha, W_theta_alpha, v_theta;
};

inline CellWeights bind_cell(BoundParams& p) {
  CellWeights w;
  const ParamSet& ps = p.params();
  auto opt = [&](std::string_view name) { return ps.contains(name) ? p.get(name) : ad::Var{}; };
  w.W_xi = opt("cell.W_xi"), w.W_hi = opt("cell.W_hi"), w.w_ci = opt("cell.w_ci"), w.b_i = opt("cell.b_i");
  w.W_xf = opt("cell.W_xf"), w.W_hf = opt("cell.W_hf"), w.w_cf = opt("cell.w_cf"), w.b_f = opt("cell.b_f");
  w.W_xc = opt("cell.W_xc"), w.W_hc = opt("cell.W_hc"), w.b_c = opt("cell.b_c");
  w.W_xo = opt("cell.W_xo"), w.W_ho = opt("cell.W_ho"), w.w_co = opt("cell.w_co"), w.b_o = opt("cell.b_o");
  w.W_xz = opt("cell.W_xz"), w.W_hz = opt("cell.W_hz"), w.W_cz = opt("cell.W_cz"), w.b_z = opt("cell.b_z");
  w.W_xr = opt("cell.W_xr"), w.W_hr = opt("cell.W_hr"), w.W_cr = opt("cell.W_cr"), w.b_r = opt("cell.b_r");
  w.W_xh = opt("cell.W_xh"), w.W_hh = opt("cell.W_hh"), w.b_h = opt("cell.b_h");
  w.W_xl = opt("cell.W_xl"), w.W_hl = opt("cell.W_hl"), w.W_cl = opt("cell.W_cl"), w.b_l = opt("cell.b_l");
  w.W_d = opt("cell.W_d"), w.b_d = opt("cell.b_d");
  w.W_h_alpha = opt("memory.W_h_alpha"), w.W_theta_alpha = opt("memory.W_theta_alpha");
  w.v_theta = opt("memory.v_theta");
  return w;
}

/// Clamps negative entries to zero. Idempotent.
inline void project_nonnegative(Tensor& w) {
  for (double& v : w.data()) v = std::max(v, 0.0);
}

inline void require_nonnegative(ad::Var w, const char* what) {
  for (double v : w.value().data()) {
    if (v < 0.0) throw InvariantError(std::string(what) + ": W_d has a negative entry");
  }
}

namespace detail {
inline void require(bool ok, const char* msg) {
  if (!ok) throw DimensionError(msg);
}
inline void check_step_shapes(ad::Var x, ad::Var h, std::size_t D, std::size_t H, const char* what) {
  if (x.rows() != 1 || x.cols() != D || h.rows() != 1 || h.cols() != H) {
    throw DimensionError(std::string(what) + ": input or state shape does not match the weights");
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Baseline cells
// ---------------------------------------------------------------------------

inline CellState lstm_peephole_step(ad::Var x, const CellState& s, const CellWeights& w, StepGates* gates = nullptr) {
  using namespace ad;
  detail::check_step_shapes(x, s.h, w.W_xi.rows(), w.W_hi.rows(), "lstm_peephole_step");
  detail::require(s.c.cols() == w.W_hi.rows(), "lstm_peephole_step: cell state shape");
  Var i = sigmoid(matmul(x, w.W_xi) + matmul(s.h, w.W_hi) + s.c * w.w_ci + w.b_i);
  Var f = sigmoid(matmul(x, w.W_xf) + matmul(s.h, w.W_hf) + s.c * w.w_cf + w.b_f);
  Var c_cand = matmul(x, w.W_xc) + matmul(s.h, w.W_hc) + w.b_c;
  Var c = f * s.c + i * tanh(c_cand);
  Var o = sigmoid(matmul(x, w.W_xo) + matmul(s.h, w.W_ho) + c * w.w_co + w.b_o);
  Var h = o * tanh(c);
  if (gates) {
    gates->input = i;
    gates->forget = f;
    gates->output = o;
  }
  return {h, c};
}

inline CellState gru_step(ad::Var x, const CellState& s, const CellWeights& w, StepGates* gates = nullptr) {
  using namespace ad;
  detail::check_step_shapes(x, s.h, w.W_xz.rows(), w.W_hz.rows(), "gru_step");
  Var z = sigmoid(matmul(x, w.W_xz) + matmul(s.h, w.W_hz) + w.b_z);
  Var r = sigmoid(matmul(x, w.W_xr) + matmul(s.h, w.W_hr) + w.b_r);
  Var h_cand = matmul(r * s.h, w.W_hh) + matmul(x, w.W_xh) + w.b_h;
  Var h = s.h + z * (tanh(h_cand) - s.h);
  if (gates) {
    gates->update = z;
    gates->reset = r;
  }
  return {h, {}};
}

// ---------------------------------------------------------------------------
// Hierarchical-context cells
// ---------------------------------------------------------------------------

/// (theta^(k) M^(k)) W_theta_alpha for every k: the h-independent half of the
/// memory-attention score, constant across the steps of one sequence.
inline ad::Var memory_keys(ad::Var theta, ad::Var memory, const CellWeights& w) {
  using namespace ad;
  const std::size_t K = memory.rows();
  if (K == 0 || theta.rows() != 1 || theta.cols() != K) {
    throw ContractError("memory attention: theta must be 1 x K with K = rows(M_global) >= 1");
  }
  return matmul(reshape(theta, K, 1) * memory, w.W_theta_alpha);
}

struct MemoryAttention {
  ad::Var alpha;    // 1 x K, sums to one
  ad::Var c_tilde;  // 1 x D
};

inline MemoryAttention hcrnn_memory_attention_keys(ad::Var h_prev, ad::Var keys, ad::Var memory,
                                                   const CellWeights& w) {
  using namespace ad;
  Var scores = matmul(sigmoid(keys + matmul(h_prev, w.W_h_alpha)), w.v_theta);  // K x 1
  Var alpha = softmax(reshape(scores, 1, memory.rows()));
  return {alpha, matmul(alpha, memory)};
}

/// alpha^(k) = softmax_k v_theta^T sigmoid(h_{t-1} W_h_alpha + (theta^(k) M^(k)) W_theta_alpha)
/// c_tilde = sum_k alpha^(k) M^(k)
inline MemoryAttention hcrnn_memory_attention(ad::Var h_prev, ad::Var theta, ad::Var memory, const CellWeights& w) {
  return hcrnn_memory_attention_keys(h_prev, memory_keys(theta, memory, w), memory, w);
}

struct LocalUpdate {
  ad::Var gate;  // G^(c), 1 x D
  ad::Var c;     // c_t
};

inline LocalUpdate hcrnn_local_update(ad::Var x, ad::Var h_prev, ad::Var c_prev, ad::Var c_tilde,
                                      const CellWeights& w) {
  using namespace ad;
  detail::require(c_prev.cols() == x.cols() && c_tilde.cols() == x.cols(), "hcrnn_local_update: context shape");
  Var g = sigmoid(matmul(x, w.W_xl) + matmul(h_prev, w.W_hl) + matmul(c_prev, w.W_cl) + w.b_l);
  // (1 - G) * c_prev + G * c_tilde
  return {g, c_prev + g * (c_tilde - c_prev)};
}

struct TemporalUpdate {
  ad::Var update;  // z_t
  ad::Var reset;   // r_t
  ad::Var drift;   // G^(d)_t, HCRNN-3 only
  ad::Var h;
};

namespace detail {
inline ad::Var hier_update_gate(ad::Var x, ad::Var h_prev, ad::Var c, const CellWeights& w) {
  using namespace ad;
  return sigmoid(matmul(x, w.W_xz) + matmul(h_prev, w.W_hz) + matmul(c, w.W_cz) + w.b_z);
}
inline ad::Var blend(ad::Var h_prev, ad::Var z, ad::Var h_cand) {
  using namespace ad;
  // (1 - z) * h_prev + z * tanh(h_cand)
  return h_prev + z * (tanh(h_cand) - h_prev);
}
}  // namespace detail

inline TemporalUpdate hcrnn1_temporal_update(ad::Var x, ad::Var h_prev, ad::Var c, const CellWeights& w) {
  using namespace ad;
  detail::check_step_shapes(x, h_prev, w.W_xz.rows(), w.W_hz.rows(), "hcrnn1_temporal_update");
  Var z = detail::hier_update_gate(x, h_prev, c, w);
  Var r = sigmoid(matmul(x, w.W_xr) + matmul(h_prev, w.W_hr) + matmul(c, w.W_cr) + w.b_r);
  Var h_cand = matmul(r * h_prev, w.W_hh) + matmul(x, w.W_xh) + w.b_h;
  return {z, r, {}, detail::blend(h_prev, z, h_cand)};
}

/// r_t = sigmoid(x W_xr + h_{t-1} W_hr + (x * c_t) W_d + b_r), W_d >= 0.
inline ad::Var hcrnn2_reset(ad::Var x, ad::Var h_prev, ad::Var c, const CellWeights& w) {
  using namespace ad;
  require_nonnegative(w.W_d, "hcrnn2_reset");
  return sigmoid(matmul(x, w.W_xr) + matmul(h_prev, w.W_hr) + matmul(x * c, w.W_d) + w.b_r);
}

inline TemporalUpdate hcrnn2_temporal_update(ad::Var x, ad::Var h_prev, ad::Var c, const CellWeights& w) {
  using namespace ad;
  detail::check_step_shapes(x, h_prev, w.W_xz.rows(), w.W_hz.rows(), "hcrnn2_temporal_update");
  Var z = detail::hier_update_gate(x, h_prev, c, w);
  Var r = hcrnn2_reset(x, h_prev, c, w);
  Var h_cand = matmul(r * h_prev, w.W_hh) + matmul(x, w.W_xh) + w.b_h;
  return {z, r, {}, detail::blend(h_prev, z, h_cand)};
}

/// G^(d) = sigmoid((x * c_t) W_d + b_d); r_t without a context term;
/// h_cand = (r_t * (G^(d) * h_{t-1})) W_hh + x W_xh + b_h.
inline TemporalUpdate hcrnn3_drift_step(ad::Var x, ad::Var h_prev, ad::Var c, const CellWeights& w) {
  using namespace ad;
  detail::check_step_shapes(x, h_prev, w.W_xz.rows(), w.W_hz.rows(), "hcrnn3_drift_step");
  require_nonnegative(w.W_d, "hcrnn3_drift_step");
  Var z = detail::hier_update_gate(x, h_prev, c, w);
  Var gd = sigmoid(matmul(x * c, w.W_d) + w.b_d);
  Var r = sigmoid(matmul(x, w.W_xr) + matmul(h_prev, w.W_hr) + w.b_r);
  Var h_cand = matmul(r * (gd * h_prev), w.W_hh) + matmul(x, w.W_xh) + w.b_h;
  return {z, r, gd, detail::blend(h_prev, z, h_cand)};
}

/// One hierarchical step: memory attention, local update, then gates and
/// temporary update, all consuming the current c_t.
inline CellState hcrnn_step(CellKind kind, ad::Var x, const CellState& s, ad::Var keys, ad::Var memory,
                            const CellWeights& w, StepGates* gates = nullptr) {
  MemoryAttention mem = hcrnn_memory_attention_keys(s.h, keys, memory, w);
  LocalUpdate local = hcrnn_local_update(x, s.h, s.c, mem.c_tilde, w);
  TemporalUpdate tu;
  switch (kind) {
    case CellKind::hcrnn1: tu = hcrnn1_temporal_update(x, s.h, local.c, w); break;
    case CellKind::hcrnn2: tu = hcrnn2_temporal_update(x, s.h, local.c, w); break;
    case CellKind::hcrnn3: tu = hcrnn3_drift_step(x, s.h, local.c, w); break;
    default: throw ContractError("hcrnn_step: not a hierarchical cell");
  }
  if (gates) {
    gates->memory_attention = mem.alpha;
    gates->local = local.gate;
    gates->update = tu.update;
    gates->reset = tu.reset;
    gates->drift = tu.drift;
  }
  return {tu.h, local.c};
}

// ---------------------------------------------------------------------------
// Unrolling
// ---------------------------------------------------------------------------

struct Unrolled {
  std::vector<CellState> states;
  std::vector<StepGates> gates;  // empty unless requested
};

/// Global context handed to the hierarchical cells.
struct GlobalContextVars {
  ad::Var theta;   // 1 x K
  ad::Var memory;  // K x D
};

inline CellState zero_state(ad::Graph& g, CellKind kind, const CellDims& d) {
  CellState s;
  s.h = g.constant(Tensor::matrix(1, d.hidden_dim));
  if (kind == CellKind::lstm) s.c = g.constant(Tensor::matrix(1, d.hidden_dim));
  if (is_hierarchical(kind)) s.c = g.constant(Tensor::matrix(1, d.embed_dim));
  return s;
}

/// Runs the cell over embedded inputs from the zero state.
inline Unrolled unroll_sequence(std::span<const ad::Var> inputs, CellKind kind, const CellDims& dims,
                                const CellWeights& w, const GlobalContextVars& global, bool record_gates) {
  if (inputs.empty()) throw InputError("unroll_sequence: empty sequence");
  ad::Graph& g = inputs[0].graph();
  Unrolled out;
  out.states.reserve(inputs.size());
  if (record_gates) out.gates.reserve(inputs.size());
  ad::Var keys;
  if (is_hierarchical(kind)) {
    if (!global.theta.valid() || !global.memory.valid()) {
      throw ContractError("unroll_sequence: hierarchical cells need a global context");
    }
    keys = memory_keys(global.theta, global.memory, w);
  }
  CellState s = zero_state(g, kind, dims);
  for (ad::Var x : inputs) {
    StepGates gates;
    StepGates* gp = record_gates ? &gates : nullptr;
    switch (kind) {
      case CellKind::lstm: s = lstm_peephole_step(x, s, w, gp); break;
      case CellKind::gru: s = gru_step(x, s, w, gp); break;
      default: s = hcrnn_step(kind, x, s, keys, global.memory, w, gp); break;
    }
    out.states.push_back(s);
    if (record_gates) out.gates.push_back(gates);
  }
  return out;
}

/// Looks up item embeddings then unrolls; rejects out-of-vocabulary ids.
inline Unrolled unroll_sequence(std::span<const std::size_t> items, ad::Var embeddings, CellKind kind,
                                const CellDims& dims, const CellWeights& w, const GlobalContextVars& global,
                                bool record_gates) {
  if (items.empty()) throw InputError("unroll_sequence: empty sequence");
  std::vector<ad::Var> xs;
  xs.reserve(items.size());
  for (std::size_t item : items) {
    if (item >= embeddings.rows()) throw InputError("unroll_sequence: item id " + std::to_string(item) + " out of vocabulary");
    xs.push_back(ad::gather_rows(embeddings, std::span<const std::size_t>(&item, 1)));
  }
  return unroll_sequence(xs, kind, dims, w, global, record_gates);
}

namespace detail {
inline std::vector<double> values_of(ad::Var v) {
  if (!v.valid()) return {};
  const auto d = v.value().data();
  return {d.begin(), d.end()};
}
inline double mean_abs_diff(ad::Var a, ad::Var prev) {
  if (!a.valid()) return 0.0;
  const Tensor& x = a.value();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - (prev.valid() ? prev.value()[i] : 0.0));
  return s / static_cast<double>(x.size());
}
}  // namespace detail

inline std::vector<StepTrace> extract_traces(const Unrolled& u) {
  std::vector<StepTrace> traces;
  traces.reserve(u.gates.size());
  for (std::size_t t = 0; t < u.gates.size(); ++t) {
    const StepGates& g = u.gates[t];
    StepTrace tr;
    tr.r = detail::values_of(g.reset);
    tr.z = detail::values_of(g.update);
    tr.g_c = detail::values_of(g.local);
    tr.g_d = detail::values_of(g.drift);
    tr.i = detail::values_of(g.input);
    tr.f = detail::values_of(g.forget);
    tr.o = detail::values_of(g.output);
    tr.alpha_mem = detail::values_of(g.memory_attention);
    const CellState& s = u.states[t];
    const CellState prev = t ? u.states[t - 1] : CellState{};
    tr.delta_h = detail::mean_abs_diff(s.h, prev.h);
    tr.delta_c = detail::mean_abs_diff(s.c, prev.c);
    traces.push_back(std::move(tr));
  }
  return traces;
}

}  // namespace hcrnn
