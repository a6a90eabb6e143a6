#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "hcrnn/hcrnn.hpp"
#include "oracle.hpp"
#include "temp_dir.hpp"

using namespace hcrnn;

namespace {

const std::filesystem::path kConfigs = std::filesystem::path(HCRNN_SOURCE_DIR) / "configs";

SessionCorpus tiny_corpus() { return preprocess(load_sessions(kConfigs / "tiny_sessions.txt"), 2, 1); }

TrainConfig tiny_config(CellKind cell, AttentionMode mode) {
  TrainConfig cfg = load_config(kConfigs / "tiny.toml");
  cfg.cell = cell;
  cfg.attention = mode;
  return cfg;
}

struct Variant {
  CellKind cell;
  AttentionMode mode;
};

constexpr Variant kVariants[] = {{CellKind::lstm, AttentionMode::none},   {CellKind::gru, AttentionMode::none},
                                 {CellKind::hcrnn1, AttentionMode::none}, {CellKind::hcrnn1, AttentionMode::bi},
                                 {CellKind::hcrnn2, AttentionMode::none}, {CellKind::hcrnn2, AttentionMode::bi},
                                 {CellKind::hcrnn3, AttentionMode::none}, {CellKind::hcrnn3, AttentionMode::bi}};

ModelSpec small_spec(const Variant& v, std::size_t items = 9) { return {v.cell, v.mode, items, {5, 4, 3}}; }

std::vector<Instance> random_batch(std::size_t n, std::size_t items, std::mt19937_64& rng) {
  std::vector<Instance> batch(n);
  for (auto& inst : batch) {
    inst.items.resize(2 + uniform_index(rng, 5));
    for (auto& i : inst.items) i = uniform_index(rng, items);
  }
  return batch;
}

// Plain Adam on one coordinate.
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double w, double g, double lr) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    return w - lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

double mean_posterior_kl(const Model& model, const SessionCorpus& c) {
  double total = 0.0;
  for (const auto& seq : c.sequences) {
    ad::Graph g;
    BoundParams bp(g, model.params(), false);
    Posterior q = infer_posterior(seq, bp.get("embedding"), bind_inference(bp));
    total += kl_to_standard_normal(q.mu, q.log_sigma).value().item();
  }
  return total / static_cast<double>(c.sequences.size());
}

}  // namespace

TEST(TotalLoss, UniformPredictorGivesLogItems) {
  for (std::size_t items : {2u, 7u, 12u}) {
    Model model({CellKind::gru, AttentionMode::none, items, {4, 3, 0}}, 3);
    model.params().value("decoder.W_B").fill(0.0);
    std::vector<Instance> batch{Instance{{1, 0}}};
    ad::Graph g;
    BoundParams bp(g, model.params(), false);
    EXPECT_NEAR(total_loss(bp, model.spec(), batch, {}, 0).value().item(), std::log(static_cast<double>(items)), 1e-14);
  }
}

TEST(TotalLoss, KlWeightZeroIsCrossEntropy) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Variant v{seed % 2 ? CellKind::hcrnn3 : CellKind::hcrnn1, seed % 3 ? AttentionMode::bi : AttentionMode::none};
    Model model(small_spec(v), seed);
    Instance inst = random_batch(1, 9, rng)[0];
    ForwardOptions o;
    o.sample_theta = true;
    o.seed = seed;
    ad::Graph g;
    BoundParams bp(g, model.params(), false);
    o.kl_weight = 0.0;
    ForwardResult a = forward(bp, model.spec(), inst.inputs(), inst.targets(), o);
    o.kl_weight = 1.0;
    ForwardResult b = forward(bp, model.spec(), inst.inputs(), inst.targets(), o);
    EXPECT_EQ(a.loss.value().item(), a.cross_entropy.value().item());
    EXPECT_EQ(a.cross_entropy.value().item(), b.cross_entropy.value().item());
    EXPECT_GT(b.kl.value().item(), 0.0);
    EXPECT_NEAR(b.loss.value().item(), b.cross_entropy.value().item() + b.kl.value().item(), 1e-12);
  }
}

TEST(TotalLoss, CrossEntropyMatchesOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Variant v = kVariants[seed % std::size(kVariants)];
    Model model(small_spec(v), seed);
    Instance inst = random_batch(1, 9, rng)[0];
    ad::Graph g;
    BoundParams bp(g, model.params(), false);
    const double ce = forward(bp, model.spec(), inst.inputs(), inst.targets(), {}).cross_entropy.value().item();
    // One pass over an instance infers theta from all of its inputs.
    const std::vector<std::size_t> inputs(inst.inputs().begin(), inst.inputs().end());
    double expect = 0.0;
    for (std::size_t t = 1; t < inst.items.size(); ++t) {
      const std::vector<std::size_t> prefix(inst.items.begin(), inst.items.begin() + t);
      const auto probs = oracle::predict(model, prefix, &inputs);
      expect -= std::log(probs[inst.items[t]]);
    }
    EXPECT_NEAR(ce, expect, 1e-10 * (1.0 + expect)) << model_label(model.spec());
  }
}

TEST(TotalLoss, IsMeanOfInstanceLosses) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Variant v = kVariants[seed % std::size(kVariants)];
    Model model(small_spec(v), seed);
    const auto batch = random_batch(1 + uniform_index(rng, 4), 9, rng);
    ForwardOptions o;
    o.sample_theta = true;
    o.input_dropout = 0.25;
    o.output_dropout = 0.5;
    ad::Graph g;
    BoundParams bp(g, model.params(), false);
    const double total = total_loss(bp, model.spec(), batch, o, seed).value().item();
    double expect = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ForwardOptions oi = o;
      oi.seed = derive_seed(seed, {i});
      expect += forward(bp, model.spec(), batch[i].inputs(), batch[i].targets(), oi).loss.value().item();
    }
    EXPECT_NEAR(total, expect / static_cast<double>(batch.size()), 1e-12 * (1.0 + expect));
  }
}

TEST(TotalLoss, EmptyBatchIsContractError) {
  Model model(small_spec(kVariants[0]), 0);
  ad::Graph g;
  BoundParams bp(g, model.params(), false);
  EXPECT_THROW(total_loss(bp, model.spec(), std::span<const Instance>{}, {}, 0), ContractError);
}

TEST(TotalLoss, GradientCheck) {
  for (const Variant& v : kVariants) {
    const GradCheckRow row = detail::check_total_loss(v.cell, v.mode, {}, 0);
    EXPECT_LT(row.max_relative_error, 1e-4) << row.component << " worst " << row.worst_parameter;
  }
}

TEST(BatchGradient, MatchesSingleGraphAndIgnoresWorkerCount) {
  for (std::uint64_t seed = 0; seed < 24; ++seed) {
    std::mt19937_64 rng(seed);
    const Variant v = kVariants[seed % std::size(kVariants)];
    Model model(small_spec(v), seed);
    const auto batch = random_batch(1 + uniform_index(rng, 12), 9, rng);
    std::vector<const Instance*> ptrs;
    for (const auto& b : batch) ptrs.push_back(&b);
    ForwardOptions o;
    o.sample_theta = true;
    o.input_dropout = 0.25;
    o.output_dropout = 0.5;

    ad::Graph g;
    BoundParams bp(g, model.params(), true);
    ad::Var loss = total_loss(bp, model.spec(), batch, o, seed);
    g.backward(loss);
    std::vector<Tensor> expect = model.params().zeros_like();
    bp.accumulate_grads(expect, 1.0);

    std::vector<Tensor> one, many;
    const double l1 = batch_gradient(model, ptrs, o, seed, one, 1);
    const double l3 = batch_gradient(model, ptrs, o, seed, many, 3);
    EXPECT_NEAR(l1, loss.value().item(), 1e-12);
    EXPECT_EQ(l1, l3);
    for (std::size_t i = 0; i < expect.size(); ++i) {
      EXPECT_TRUE(bit_identical(one[i], many[i])) << model.params().name(i);
      for (std::size_t k = 0; k < expect[i].size(); ++k) EXPECT_NEAR(one[i][k], expect[i][k], 1e-12);
    }
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Model model(small_spec(kVariants[seed % std::size(kVariants)]), seed);
    const ParamSet before = model.params();
    AdamState state(model.params());
    for (int s = 0; s < 3; ++s) adam_step(model.params(), model.params().zeros_like(), state, {0.01});
    EXPECT_EQ(model.params(), before);
  }
}

TEST(Adam, FirstStepIsLearningRateTimesSign) {
  for (double g : {3.0, -0.2, 1e-3, -250.0}) {
    ParamSet ps;
    ps.add("w", Tensor::scalar(0.5));
    AdamState state(ps);
    adam_step(ps, {Tensor::scalar(g)}, state, {0.01});
    const double step = 0.5 - ps.value("w").item();
    EXPECT_NEAR(step, 0.01 * g / (std::abs(g) + 1e-8), 1e-15);
    EXPECT_NEAR(std::abs(step), 0.01, 1e-7);
    EXPECT_EQ(std::signbit(step), std::signbit(g));
  }
}

TEST(Adam, MatchesScalarRecurrence) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor w0 = oracle::random_tensor(3, 2, rng);
    ParamSet ps;
    ps.add("w", w0);
    AdamState state(ps);
    std::vector<ScalarAdam> ref(6);
    std::vector<double> w(w0.data().begin(), w0.data().end());
    const double lr = 0.001 + 0.05 * uniform_unit(rng);
    for (int s = 0; s < 8; ++s) {
      const Tensor g = oracle::random_tensor(3, 2, rng, 5.0);
      adam_step(ps, {g}, state, {lr});
      for (std::size_t k = 0; k < 6; ++k) w[k] = ref[k].step(w[k], g[k], lr);
    }
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(ps.value("w")[k], w[k], 1e-13);
  }
}

TEST(Adam, ProjectionZeroesDriftWeightsPushedNegative) {
  for (CellKind cell : {CellKind::hcrnn2, CellKind::hcrnn3}) {
    Model model({cell, AttentionMode::none, 9, {4, 3, 2}}, 1);
    Tensor& wd = model.params().value("cell.W_d");
    wd.fill(1e-4);
    std::vector<Tensor> grads = model.params().zeros_like();
    grads[model.params().index("cell.W_d")].fill(1.0);
    AdamState state(model.params());
    optimizer_step(model, grads, state, {0.01});
    for (double v : model.params().value("cell.W_d").data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Adam, DriftWeightsNonNegativeAfterEveryStep) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    Model model({seed % 2 ? CellKind::hcrnn2 : CellKind::hcrnn3, AttentionMode::none, 9, {4, 3, 2}}, seed);
    AdamState state(model.params());
    for (int s = 0; s < 10; ++s) {
      std::vector<Tensor> grads = model.params().zeros_like();
      for (auto& g : grads)
        for (double& x : g.data()) x = 4.0 * standard_normal(rng);
      optimizer_step(model, grads, state, {0.05});
      for (double v : model.params().value("cell.W_d").data()) ASSERT_GE(v, 0.0);
    }
  }
}

TEST(ClipGradNorm, RescalesOnlyAboveThreshold) {
  std::vector<Tensor> g{Tensor::row({3.0, 0.0}), Tensor::row({0.0, 4.0})};
  EXPECT_EQ(clip_grad_norm(g, 10.0), 5.0);
  EXPECT_EQ(g[0][0], 3.0);
  EXPECT_EQ(clip_grad_norm(g, 0.0), 5.0);
  EXPECT_EQ(g[1][1], 4.0);
  EXPECT_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  EXPECT_NEAR(g[1][1], 0.8, 1e-15);
  EXPECT_NEAR(global_norm(g), 1.0, 1e-15);
}

TEST(Train, DeterministicGivenSeed) {
  const SessionCorpus c = tiny_corpus();
  for (const Variant& v : {kVariants[1], kVariants[7]}) {
    TrainConfig cfg = tiny_config(v.cell, v.mode);
    cfg.max_epochs = 6;
    cfg.batch_size = 8;
    cfg.input_dropout = 0.25;
    cfg.output_dropout = 0.5;
    const Checkpoint a = train(c, cfg, {}, 1);
    const Checkpoint b = train(c, cfg, {}, 1);
    const Checkpoint w = train(c, cfg, {}, 3);
    ASSERT_EQ(a.history.size(), 6u);
    for (std::size_t e = 0; e < a.history.size(); ++e) {
      EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
      EXPECT_EQ(a.history[e].train_loss, w.history[e].train_loss);
    }
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.params, w.params);
    cfg.seed = 1;
    EXPECT_NE(train(c, cfg, {}, 1).history.back().train_loss, a.history.back().train_loss);
  }
}

TEST(Train, MemorizesTinyCorpus) {
  const SessionCorpus c = tiny_corpus();
  ASSERT_EQ(c.num_items(), 12u);
  ASSERT_EQ(c.sequences.size(), 8u);
  const Checkpoint ck = train(c, tiny_config(CellKind::hcrnn3, AttentionMode::bi));
  const EvalReport r = evaluate_model(ck, c, {1});
  EXPECT_GE(r.models[0].recall.at(1), 0.95);
}

TEST(Train, TinyLossMonotoneAfterEpochFive) {
  const SessionCorpus c = tiny_corpus();
  for (const Variant& v : kVariants) {
    const Checkpoint ck = train(c, tiny_config(v.cell, v.mode));
    for (std::size_t e = 5; e < ck.history.size(); ++e) {
      EXPECT_LE(ck.history[e].train_loss, 1.01 * ck.history[e - 1].train_loss)
          << model_label(ck.spec) << " epoch " << e + 1;
    }
  }
}

TEST(Train, KlWeightZeroAndOneBothConverge) {
  const SessionCorpus c = tiny_corpus();
  TrainConfig cfg = tiny_config(CellKind::hcrnn3, AttentionMode::bi);
  cfg.max_epochs = 100;
  cfg.kl_weight = 0.0;
  const Checkpoint free = train(c, cfg);
  cfg.kl_weight = 1.0;
  const Checkpoint tied = train(c, cfg);
  for (const Checkpoint* ck : {&free, &tied}) {
    EXPECT_LT(ck->history.back().train_loss, 0.05 * ck->history.front().train_loss);
    EXPECT_GE(instance_recall(ck->model(), augment_prefixes(c), 1), 0.95);
  }
  EXPECT_GT(mean_posterior_kl(free.model(), c), mean_posterior_kl(tied.model(), c));
}

TEST(Train, DivergenceKeepsLastFiniteCheckpoint) {
  const SessionCorpus c = tiny_corpus();
  TrainConfig cfg = tiny_config(CellKind::gru, AttentionMode::none);
  cfg.learning_rate = 1e300;
  cfg.max_epochs = 5;
  try {
    train(c, cfg, {}, 1);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_TRUE(params_finite(e.last_finite().params));
    EXPECT_EQ(e.last_finite().params.size(), Model(spec_from_config(cfg, 12), 0).params().size());
  }
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  TempDir dir;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Variant v = kVariants[seed % std::size(kVariants)];
    const std::size_t items = 1 + uniform_index(rng, 15);
    Checkpoint ck;
    ck.spec = {v.cell, v.mode, items, {1 + uniform_index(rng, 5), 1 + uniform_index(rng, 5), 1 + uniform_index(rng, 4)}};
    ck.params = Model(ck.spec, seed).params();
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      for (double& x : ck.params.value(i).data()) {
        switch (uniform_index(rng, 6)) {
          case 0: x = -0.0; break;
          case 1: x = std::numeric_limits<double>::denorm_min() * static_cast<double>(1 + uniform_index(rng, 100)); break;
          case 2: x = std::ldexp(2.0 * uniform_unit(rng) - 1.0, static_cast<int>(uniform_index(rng, 2000)) - 1000); break;
          default: x = std::bit_cast<double>((rng() & 0x800FFFFFFFFFFFFFull) | 0x3FF0000000000000ull); break;
        }
      }
    }
    ck.config.cell = v.cell;
    ck.config.attention = v.mode;
    ck.config.seed = rng();
    ck.config.learning_rate = uniform_unit(rng) + 1e-9;
    for (std::size_t i = 0; i < items; ++i) ck.vocab.add("tok " + std::to_string(i) + (i % 3 ? "\t\"x\"" : ""));
    ck.epoch = uniform_index(rng, 50);
    for (std::size_t e = 0; e < ck.epoch % 5; ++e) {
      EpochRecord r{e + 1, standard_normal(rng), std::nullopt, uniform_unit(rng)};
      if (e % 2) r.valid_recall = uniform_unit(rng);
      ck.history.push_back(r);
    }

    save_checkpoint(ck, dir / "ck.bin");
    const Checkpoint back = load_checkpoint(dir / "ck.bin");
    ASSERT_EQ(back.params.size(), ck.params.size());
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      EXPECT_EQ(back.params.name(i), ck.params.name(i));
      EXPECT_TRUE(bit_identical(back.params.value(i), ck.params.value(i))) << ck.params.name(i);
    }
    EXPECT_EQ(to_json(back.config), to_json(ck.config));
    EXPECT_EQ(spec_to_json(back.spec), spec_to_json(ck.spec));
    EXPECT_EQ(back.vocab, ck.vocab);
    EXPECT_EQ(back.epoch, ck.epoch);
    ASSERT_EQ(back.history.size(), ck.history.size());
    for (std::size_t e = 0; e < ck.history.size(); ++e) {
      EXPECT_EQ(back.history[e].epoch, ck.history[e].epoch);
      EXPECT_EQ(back.history[e].train_loss, ck.history[e].train_loss);
      EXPECT_EQ(back.history[e].valid_recall, ck.history[e].valid_recall);
    }
  }
}

TEST(Checkpoint, RoundTripReproducesMetrics) {
  TempDir dir;
  SynthConfig sc;
  sc.num_sequences = 60;
  sc.items_per_genre = 6;
  sc.seed = 4;
  const auto [train_c, test_c] = split_sequences(generate_synthetic_drift(sc), 20);
  TrainConfig cfg = tiny_config(CellKind::hcrnn3, AttentionMode::bi);
  cfg.max_epochs = 3;
  cfg.validation_fraction = 0.2;
  const Checkpoint ck = train(train_c, cfg);
  save_checkpoint(ck, dir / "ck.bin");
  const Checkpoint back = load_checkpoint(dir / "ck.bin");
  const EvalReport a = evaluate_model(ck, test_c);
  const EvalReport b = evaluate_model(back, test_c);
  EXPECT_EQ(a.models[0].recall, b.models[0].recall);
  EXPECT_EQ(a.models[0].mrr, b.models[0].mrr);
  const auto valid = split_validation(augment_prefixes(train_c), cfg.validation_fraction, cfg.seed).second;
  EXPECT_EQ(instance_recall(ck.model(), valid, 20), instance_recall(back.model(), valid, 20));
  EXPECT_EQ(instance_recall(back.model(), valid, 20), *back.history.at(back.epoch - 1).valid_recall);
}

TEST(Checkpoint, CorruptFilesAreInputErrors) {
  TempDir dir;
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), InputError);
  std::ofstream(dir / "magic.bin") << "NOTACHECKPOINT";
  EXPECT_THROW(load_checkpoint(dir / "magic.bin"), InputError);

  Checkpoint ck;
  ck.spec = {CellKind::gru, AttentionMode::none, 3, {2, 2, 0}};
  ck.params = Model(ck.spec, 0).params();
  for (const char* t : {"a", "b", "c"}) ck.vocab.add(t);
  save_checkpoint(ck, dir / "ck.bin");
  const auto size = std::filesystem::file_size(dir / "ck.bin");
  std::filesystem::copy_file(dir / "ck.bin", dir / "short.bin");
  std::filesystem::resize_file(dir / "short.bin", size - 8);
  EXPECT_THROW(load_checkpoint(dir / "short.bin"), InputError);

  ck.vocab.add("d");
  save_checkpoint(ck, dir / "vocab.bin");
  EXPECT_THROW(load_checkpoint(dir / "vocab.bin"), InputError);
}
