#pragma once

// Loss assembly, batched gradients and the epoch loop.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <tuple>
#include <vector>

#include "hcrnn/checkpoint.hpp"
#include "hcrnn/config.hpp"
#include "hcrnn/data.hpp"
#include "hcrnn/metrics.hpp"
#include "hcrnn/model.hpp"
#include "hcrnn/optimizer.hpp"
#include "hcrnn/parallel.hpp"

namespace hcrnn {

/// Thrown when the loss or an update becomes non-finite. Carries the last
/// parameters known to be finite.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, Checkpoint last_finite)
      : NumericError(what), last_finite_(std::move(last_finite)) {}
  const Checkpoint& last_finite() const noexcept { return last_finite_; }

 private:
  Checkpoint last_finite_;
};

inline ModelSpec spec_from_config(const TrainConfig& cfg, std::size_t num_items) {
  return {cfg.cell, cfg.attention, num_items, {cfg.embed_dim, cfg.hidden_dim, cfg.num_contexts}};
}

/// Options for a training-mode forward pass (dropout on, theta sampled).
inline ForwardOptions training_options(const TrainConfig& cfg) {
  ForwardOptions o;
  o.sample_theta = true;
  o.input_dropout = cfg.input_dropout;
  o.output_dropout = cfg.output_dropout;
  o.kl_weight = cfg.kl_weight;
  return o;
}

/// Mean over the batch of [sum_t -log y_hat_t[target_t] + kl_weight * KL] as
/// a single graph. Instance i draws its noise from derive_seed(seed, {i}).
inline ad::Var total_loss(BoundParams& p, const ModelSpec& spec, std::span<const Instance> batch,
                          const ForwardOptions& base, std::uint64_t seed) {
  if (batch.empty()) throw ContractError("total_loss: empty batch");
  std::vector<ad::Var> losses;
  losses.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ForwardOptions o = base;
    o.seed = derive_seed(seed, {i});
    losses.push_back(forward(p, spec, batch[i].inputs(), batch[i].targets(), o).loss);
  }
  ad::Var total = batch.size() == 1 ? losses[0] : ad::sum(ad::stack_rows(losses));
  return total * (1.0 / static_cast<double>(batch.size()));
}

inline constexpr std::size_t kGradientChunks = 8;

/// Gradient of total_loss, computed one graph per instance; `grads` is
/// overwritten. Returns the batch loss. The summation order is fixed, so the
/// result does not depend on the worker count.
inline double batch_gradient(const Model& model, std::span<const Instance* const> batch, const ForwardOptions& base,
                             std::uint64_t seed, std::vector<Tensor>& grads, std::size_t workers = worker_count()) {
  if (batch.empty()) throw ContractError("batch_gradient: empty batch");
  const auto chunks = fixed_chunks(batch.size(), kGradientChunks);
  const double scale = 1.0 / static_cast<double>(batch.size());
  std::vector<std::vector<Tensor>> partial(chunks.size());
  std::vector<double> partial_loss(chunks.size(), 0.0);
  parallel_for(
      chunks.size(),
      [&](std::size_t c) {
        partial[c] = model.params().zeros_like();
        ad::Graph g;
        for (std::size_t i = chunks[c].begin; i < chunks[c].end; ++i) {
          g.clear();
          BoundParams p(g, model.params(), true);
          ForwardOptions o = base;
          o.seed = derive_seed(seed, {i});
          const Instance& inst = *batch[i];
          ad::Var loss = forward(p, model.spec(), inst.inputs(), inst.targets(), o).loss;
          g.backward(loss);
          p.accumulate_grads(partial[c], scale);
          partial_loss[c] += loss.value().item();
        }
      },
      workers);
  grads = model.params().zeros_like();
  double loss = 0.0;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    loss += partial_loss[c];
    for (std::size_t i = 0; i < grads.size(); ++i) {
      for (std::size_t k = 0; k < grads[i].size(); ++k) grads[i][k] += partial[c][i][k];
    }
  }
  return loss * scale;
}

/// Fraction of instances whose final target ranks within the top k
/// (no dropout, theta_tilde = mu).
inline double instance_recall(const Model& model, std::span<const Instance> instances, std::size_t k,
                              std::size_t workers = worker_count()) {
  std::vector<std::size_t> ranks(instances.size());
  parallel_for(
      instances.size(),
      [&](std::size_t i) {
        const auto scores = predict_next(model, instances[i].inputs());
        ranks[i] = rank_of(scores, instances[i].items.back());
      },
      workers);
  return recall_at_k(ranks, k);
}

inline bool params_finite(const ParamSet& ps) {
  for (const auto& p : ps.entries())
    if (!p.value.all_finite()) return false;
  return true;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains a fresh model. With a validation split the returned checkpoint is
/// the epoch with the best validation R@20 (later epochs win ties) and
/// training stops after `patience` epochs without improvement; without one
/// it is the last epoch. The history always covers every epoch run.
inline Checkpoint train(const SessionCorpus& corpus, const TrainConfig& cfg, const EpochCallback& on_epoch = {},
                        std::size_t workers = worker_count()) {
  cfg.validate();
  if (corpus.sequences.empty()) throw InputError("train: empty corpus");
  const ModelSpec spec = spec_from_config(cfg, corpus.num_items());
  Model model(spec, derive_seed(cfg.seed, {0x4d}));

  std::vector<Instance> all = cfg.augment ? augment_prefixes(corpus) : whole_sequences(corpus);
  std::vector<Instance> train_set, valid_set;
  if (cfg.validation_fraction > 0.0) {
    std::tie(train_set, valid_set) = split_validation(all, cfg.validation_fraction, cfg.seed);
  } else {
    train_set = std::move(all);
  }
  if (train_set.empty()) throw InputError("train: no training instances after the validation split");

  auto snapshot = [&](std::size_t epoch) {
    Checkpoint ck;
    ck.config = cfg;
    ck.spec = spec;
    ck.params = model.params();
    ck.vocab = corpus.vocab;
    ck.epoch = epoch;
    return ck;
  };

  AdamState state(model.params());
  const AdamOptions adam{cfg.learning_rate};
  const ForwardOptions base = training_options(cfg);
  std::vector<EpochRecord> history;
  Checkpoint best = snapshot(0);
  double best_metric = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train_set.size());
  std::vector<const Instance*> batch;
  std::vector<Tensor> grads;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(cfg.seed, {0xe9, epoch}));
    shuffle(order, rng);

    double loss_sum = 0.0;
    for (std::size_t b = 0, step = 0; b < order.size(); b += cfg.batch_size, ++step) {
      batch.clear();
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(&train_set[order[i]]);
      double loss = 0.0;
      try {
        loss = batch_gradient(model, batch, base, derive_seed(cfg.seed, {0xba, epoch, step}), grads, workers);
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what(),
                              snapshot(epoch - 1));
      }
      if (!std::isfinite(loss)) {
        throw DivergenceError("training loss became non-finite in epoch " + std::to_string(epoch), snapshot(epoch - 1));
      }
      ParamSet before = model.params();
      clip_grad_norm(grads, cfg.grad_clip_norm);
      optimizer_step(model, grads, state, adam);
      if (!params_finite(model.params())) {
        model.params() = std::move(before);
        throw DivergenceError("parameters became non-finite in epoch " + std::to_string(epoch), snapshot(epoch - 1));
      }
      loss_sum += loss * static_cast<double>(batch.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    if (!valid_set.empty()) rec.valid_recall = instance_recall(model, valid_set, 20, workers);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (!rec.valid_recall) {
      best = snapshot(epoch);
      continue;
    }
    if (*rec.valid_recall >= best_metric) {
      best_metric = *rec.valid_recall;
      best = snapshot(epoch);
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }
  best.history = history;
  return best;
}

}  // namespace hcrnn
