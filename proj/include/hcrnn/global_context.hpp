#pragma once

// Amortized Gaussian posterior over the global-context logits theta_tilde,
// the softmax proportion theta, and the KL term against a N(0, I) prior.

#include <random>
#include <span>
#include <vector>

#include "hcrnn/autodiff.hpp"
#include "hcrnn/cells.hpp"
#include "hcrnn/params.hpp"

namespace hcrnn {

/// Plain-value snapshot of a sequence's global context.
struct GlobalContext {
  Tensor memory;       // M_global, K x D
  Tensor theta;        // 1 x K, softmax(theta_tilde)
  Tensor theta_tilde;  // 1 x K
  Tensor mu;           // 1 x K
  Tensor log_sigma;    // 1 x K
};

/// Registers M_global ("global.M") and the inference network ("infer.*").
/// The network is mean-pool -> tanh layer of width H -> two affine heads.
inline void add_global_context_params(ParamSet& ps, const CellDims& d, std::mt19937_64& rng) {
  const std::size_t D = d.embed_dim, H = d.hidden_dim, K = d.num_contexts;
  ps.add("global.M", uniform_init(K, D, rng, D));
  ps.add("infer.W_f", uniform_init(D, H, rng));
  ps.add("infer.b_f", Tensor::matrix(1, H));
  ps.add("infer.W_q1", uniform_init(H, K, rng));
  ps.add("infer.b_q1", Tensor::matrix(1, K));
  ps.add("infer.W_q2", uniform_init(H, K, rng));
  ps.add("infer.b_q2", Tensor::matrix(1, K));
}

struct InferenceWeights {
  ad::Var W_f, b_f, W_q1, b_q1, W_q2, b_q2;
};

inline InferenceWeights bind_inference(BoundParams& p) {
  return {p.get("infer.W_f"), p.get("infer.b_f"), p.get("infer.W_q1"),
          p.get("infer.b_q1"), p.get("infer.W_q2"), p.get("infer.b_q2")};
}

struct Posterior {
  ad::Var mu;         // 1 x K
  ad::Var log_sigma;  // 1 x K
};

/// `embedded` holds one row per item of the sequence (T x D).
inline Posterior infer_posterior(ad::Var embedded, const InferenceWeights& w) {
  using namespace ad;
  Var f = tanh(matmul(mean_rows(embedded), w.W_f) + w.b_f);
  return {matmul(f, w.W_q1) + w.b_q1, matmul(f, w.W_q2) + w.b_q2};
}

inline Posterior infer_posterior(std::span<const std::size_t> items, ad::Var embeddings, const InferenceWeights& w) {
  if (items.empty()) throw InputError("infer_posterior: empty sequence");
  for (std::size_t i : items) {
    if (i >= embeddings.rows()) throw InputError("infer_posterior: item id out of vocabulary");
  }
  return infer_posterior(ad::gather_rows(embeddings, items), w);
}

struct ThetaSample {
  ad::Var theta_tilde;
  ad::Var theta;
};

/// theta_tilde = mu + exp(log_sigma) * noise; theta = softmax(theta_tilde).
/// An empty `noise` tensor means the posterior mean (theta_tilde = mu).
inline ThetaSample sample_theta(ad::Var mu, ad::Var log_sigma, const Tensor& noise) {
  using namespace ad;
  if (noise.empty()) return {mu, softmax(mu)};
  if (noise.size() != mu.value().size()) throw DimensionError("sample_theta: noise length must equal K");
  Var eps = mu.graph().constant(Tensor({1, noise.size()}, noise.storage()));
  Var tilde = mu + exp(log_sigma) * eps;
  return {tilde, softmax(tilde)};
}

/// 0.5 * sum_k (mu_k^2 + sigma_k^2 - 1 - 2 log sigma_k)
inline ad::Var kl_to_standard_normal(ad::Var mu, ad::Var log_sigma) {
  using namespace ad;
  const double k = static_cast<double>(mu.value().size());
  Var terms = mu * mu + exp(2.0 * log_sigma) - 2.0 * log_sigma;
  return affine(sum(terms), 0.5, -0.5 * k);
}

}  // namespace hcrnn
