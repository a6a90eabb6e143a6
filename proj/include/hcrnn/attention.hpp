#pragma once

// Bi-channel attention over the unrolled sequence and the bilinear decoder.
//
// Both channels aggregate the temporary contexts h_j, j <= t. The local
// channel scores with a scaled dot product of projected local contexts; the
// temporary channel uses an additive alignment of projected h vectors.

#include <cmath>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "hcrnn/autodiff.hpp"
#include "hcrnn/params.hpp"

namespace hcrnn {

enum class AttentionMode { none, bi };

inline std::string_view to_string(AttentionMode m) { return m == AttentionMode::bi ? "bi" : "none"; }

inline AttentionMode parse_attention(std::string_view s) {
  if (s == "bi") return AttentionMode::bi;
  if (s == "none") return AttentionMode::none;
  throw InputError("unknown attention mode: " + std::string(s));
}

inline void add_attention_params(ParamSet& ps, std::size_t embed_dim, std::size_t hidden_dim, std::mt19937_64& rng) {
  ps.add("attn.W_c1", uniform_init(embed_dim, hidden_dim, rng));
  ps.add("attn.W_c2", uniform_init(embed_dim, hidden_dim, rng));
  ps.add("attn.W_h1", uniform_init(hidden_dim, hidden_dim, rng));
  ps.add("attn.W_h2", uniform_init(hidden_dim, hidden_dim, rng));
  ps.add("attn.v_h", uniform_init(hidden_dim, 1, rng));
}

/// W_B maps the decoder input (3H with attention, H without) to D.
inline void add_decoder_params(ParamSet& ps, AttentionMode mode, std::size_t embed_dim, std::size_t hidden_dim,
                               std::mt19937_64& rng) {
  const std::size_t in = mode == AttentionMode::bi ? 3 * hidden_dim : hidden_dim;
  ps.add("decoder.W_B", uniform_init(in, embed_dim, rng));
}

struct AttentionWeights {
  ad::Var W_c1, W_c2, W_h1, W_h2, v_h;
};

inline AttentionWeights bind_attention(BoundParams& p) {
  return {p.get("attn.W_c1"), p.get("attn.W_c2"), p.get("attn.W_h1"), p.get("attn.W_h2"), p.get("attn.v_h")};
}

namespace detail {
inline void check_step(std::size_t t, std::size_t T, const char* what) {
  if (t < 1 || t > T) throw ContractError(std::string(what) + ": step out of range");
}
inline double score_scale(const AttentionWeights& w) {
  return 1.0 / std::sqrt(static_cast<double>(w.W_c1.cols()));
}
}  // namespace detail

/// Weights over j = 1..t (1-based t) from the local contexts:
/// softmax_j (c_t W_c1)(c_j W_c2)^T / sqrt(H).
inline ad::Var local_attention(ad::Var c_all, std::size_t t, const AttentionWeights& w) {
  using namespace ad;
  detail::check_step(t, c_all.rows(), "local_attention");
  Var q = matmul(slice_rows(c_all, t - 1, t), w.W_c1);
  Var k = matmul(slice_rows(c_all, 0, t), w.W_c2);
  return softmax(matmul(q, transpose(k)) * detail::score_scale(w));
}

/// Weights over j = 1..t from the temporary contexts:
/// softmax_j v_h^T sigmoid(h_t W_h1 + h_j W_h2).
inline ad::Var temporary_attention(ad::Var h_all, std::size_t t, const AttentionWeights& w) {
  using namespace ad;
  detail::check_step(t, h_all.rows(), "temporary_attention");
  Var q = matmul(slice_rows(h_all, t - 1, t), w.W_h1);
  Var k = matmul(slice_rows(h_all, 0, t), w.W_h2);
  Var e = matmul(sigmoid(k + q), w.v_h);
  return softmax(reshape(e, 1, t));
}

/// All rows of the local channel at once (T x T, zero above the diagonal).
inline ad::Var local_attention_matrix(ad::Var c_all, const AttentionWeights& w) {
  using namespace ad;
  Var q = matmul(c_all, w.W_c1);
  Var k = matmul(c_all, w.W_c2);
  return causal_softmax(matmul(q, transpose(k)) * detail::score_scale(w));
}

/// All rows of the temporary channel at once (T x T, zero above the diagonal).
inline ad::Var temporary_attention_matrix(ad::Var h_all, const AttentionWeights& w) {
  using namespace ad;
  const std::size_t T = h_all.rows();
  std::vector<std::size_t> rows_t, rows_j;
  rows_t.reserve(T * T);
  rows_j.reserve(T * T);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < T; ++j) {
      rows_t.push_back(t);
      rows_j.push_back(j);
    }
  }
  Var q = gather_rows(matmul(h_all, w.W_h1), rows_t);
  Var k = gather_rows(matmul(h_all, w.W_h2), rows_j);
  Var e = matmul(sigmoid(q + k), w.v_h);
  return causal_softmax(reshape(e, T, T));
}

struct Decoded {
  ad::Var logits;   // T x I
  ad::Var probs;    // T x I, rows sum to one
  ad::Var alpha_c;  // T x T, invalid without attention
  ad::Var alpha_h;  // T x T, invalid without attention
};

/// y_hat_t = softmax(W_emb^T W_B [h_t, h_t^(c), h_t^(h)]) for every t.
/// Without attention the decoder input is h_t alone.
/// `output_dropout` is applied to the decoder input.
inline Decoded attend_and_decode(ad::Var h_all, ad::Var c_all, AttentionMode mode, const AttentionWeights& attn,
                                 ad::Var W_B, ad::Var embeddings, double output_dropout = 0.0,
                                 std::uint64_t dropout_seed = 0) {
  using namespace ad;
  Decoded out;
  Var u = h_all;
  if (mode == AttentionMode::bi) {
    if (!c_all.valid() || c_all.rows() != h_all.rows()) {
      throw DimensionError("attend_and_decode: bi-channel attention needs one local context per step");
    }
    out.alpha_c = local_attention_matrix(c_all, attn);
    out.alpha_h = temporary_attention_matrix(h_all, attn);
    u = concat({h_all, matmul(out.alpha_c, h_all), matmul(out.alpha_h, h_all)});
  }
  if (u.cols() != W_B.rows()) throw DimensionError("attend_and_decode: decoder input width does not match W_B");
  if (output_dropout > 0.0) u = dropout(u, output_dropout, dropout_seed);
  out.logits = matmul(matmul(u, W_B), transpose(embeddings));
  out.probs = softmax(out.logits);
  return out;
}

/// Single-step form: prediction for step t (1-based) from rows 1..t.
inline ad::Var attend_and_decode_step(ad::Var h_all, ad::Var c_all, std::size_t t, AttentionMode mode,
                                      const AttentionWeights& attn, ad::Var W_B, ad::Var embeddings) {
  using namespace ad;
  detail::check_step(t, h_all.rows(), "attend_and_decode_step");
  Var h_t = slice_rows(h_all, t - 1, t);
  Var u = h_t;
  if (mode == AttentionMode::bi) {
    Var hist = slice_rows(h_all, 0, t);
    Var hc = matmul(local_attention(c_all, t, attn), hist);
    Var hh = matmul(temporary_attention(h_all, t, attn), hist);
    u = concat({h_t, hc, hh});
  }
  return softmax(matmul(matmul(u, W_B), transpose(embeddings)));
}

}  // namespace hcrnn
