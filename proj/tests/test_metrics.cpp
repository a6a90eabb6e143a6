#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "hcrnn/hcrnn.hpp"

using namespace hcrnn;

namespace {

SessionCorpus corpus_of(const std::vector<std::vector<ItemId>>& seqs, std::size_t items) {
  SessionCorpus c;
  for (std::size_t i = 0; i < items; ++i) c.vocab.add("i" + std::to_string(i));
  c.sequences = seqs;
  return c;
}

// Brute force: sort (score desc, id asc) and look the target up.
std::size_t brute_rank(const std::vector<double>& scores, std::size_t target) {
  std::vector<std::pair<double, std::size_t>> v;
  for (std::size_t i = 0; i < scores.size(); ++i) v.emplace_back(-scores[i], i);
  std::sort(v.begin(), v.end());
  for (std::size_t r = 0; r < v.size(); ++r)
    if (v[r].second == target) return r + 1;
  return 0;
}

std::vector<double> random_scores(std::size_t n, std::mt19937_64& rng) {
  std::vector<double> s(n);
  // Coarse values force ties.
  for (double& x : s) x = static_cast<double>(uniform_index(rng, 5)) - 2.0;
  return s;
}

}  // namespace

TEST(Metrics, HandExamples) {
  const std::vector<std::size_t> ones{1, 1, 1};
  EXPECT_EQ(recall_at_k(ones, 3), 1.0);
  EXPECT_EQ(recall_at_k(std::vector<std::size_t>{5}, 3), 0.0);
  EXPECT_DOUBLE_EQ(recall_at_k(std::vector<std::size_t>{1, 4, 21}, 20), 2.0 / 3.0);
  EXPECT_EQ(mrr_at_k(std::vector<std::size_t>{2}, 3), 0.5);
  EXPECT_EQ(mrr_at_k(std::vector<std::size_t>{21}, 20), 0.0);
  EXPECT_DOUBLE_EQ(mrr_at_k(std::vector<std::size_t>{1, 2, 4}, 3), 0.5);
}

TEST(Metrics, Errors) {
  EXPECT_THROW(recall_at_k(std::vector<std::size_t>{1}, 0), ContractError);
  EXPECT_THROW(mrr_at_k(std::vector<std::size_t>{1}, 0), ContractError);
  EXPECT_THROW(recall_at_k(std::vector<std::size_t>{}, 3), InputError);
  EXPECT_THROW(mrr_at_k(std::vector<std::size_t>{}, 3), InputError);
  const std::vector<double> scores{0.1, 0.2};
  EXPECT_THROW(rank_of(scores, 2), InputError);
  const std::vector<double> bad{0.1, std::nan("")};
  EXPECT_THROW(rank_of(bad, 1), NumericError);
}

TEST(Metrics, TiesBreakByAscendingId) {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.9};
  EXPECT_EQ(rank_of(s, 1), 1u);
  EXPECT_EQ(rank_of(s, 3), 2u);
  EXPECT_EQ(rank_of(s, 0), 3u);
  EXPECT_EQ(rank_of(s, 2), 4u);
  EXPECT_EQ(ranking_from_scores(s), (std::vector<std::size_t>{1, 3, 0, 2}));
}

TEST(Metrics, MatchBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t items = 1 + uniform_index(rng, 20), events = 1 + uniform_index(rng, 50);
    std::vector<std::vector<std::size_t>> rankings;
    std::vector<std::size_t> targets, ranks;
    for (std::size_t e = 0; e < events; ++e) {
      const auto s = random_scores(items, rng);
      const std::size_t target = uniform_index(rng, items);
      const std::size_t r = brute_rank(s, target);
      ASSERT_EQ(rank_of(s, target), r);
      rankings.push_back(ranking_from_scores(s));
      targets.push_back(target);
      ranks.push_back(r);
    }
    EXPECT_EQ(target_ranks(rankings, targets), ranks);
    for (std::size_t k = 1; k <= 21; ++k) {
      std::size_t hits = 0;
      double rr = 0.0;
      for (std::size_t r : ranks) {
        if (r <= k) {
          ++hits;
          rr += 1.0 / static_cast<double>(r);
        }
      }
      EXPECT_EQ(recall_at_k(rankings, targets, k), static_cast<double>(hits) / static_cast<double>(events));
      EXPECT_EQ(mrr_at_k(rankings, targets, k), rr / static_cast<double>(events));
    }
  }
}

TEST(Metrics, MrrBelowRecallBelowLargerCutoff) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> ranks(1 + uniform_index(rng, 50));
    for (auto& r : ranks) r = 1 + uniform_index(rng, 30);
    for (std::size_t k = 1; k <= 30; ++k) {
      const double rec = recall_at_k(ranks, k);
      EXPECT_GE(mrr_at_k(ranks, k), 0.0);
      EXPECT_LE(mrr_at_k(ranks, k), rec);
      EXPECT_LE(rec, 1.0);
      EXPECT_LE(rec, recall_at_k(ranks, k + 1 + uniform_index(rng, 10)));
    }
  }
}

TEST(Baselines, PopRanksMostFrequentFirstForEveryQuery) {
  const SessionCorpus train = corpus_of({{2, 0, 2}, {2, 1}, {3, 2, 1}}, 4);
  PopBaseline pop(train);
  const std::vector<std::vector<ItemId>> queries{{}, {0}, {1, 1, 3}, {3, 0}};
  for (const auto& q : queries) {
    const auto s = pop.scores(q);
    EXPECT_EQ(ranking_from_scores(s), (std::vector<std::size_t>{2, 1, 0, 3}));
  }
}

TEST(Baselines, PopIsFixedPermutation) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t items = 2 + uniform_index(rng, 10);
    std::vector<std::vector<ItemId>> seqs(1 + uniform_index(rng, 6));
    for (auto& s : seqs) {
      s.resize(1 + uniform_index(rng, 6));
      for (auto& i : s) i = uniform_index(rng, items);
    }
    PopBaseline pop(corpus_of(seqs, items));
    std::vector<ItemId> q1(uniform_index(rng, 5)), q2(uniform_index(rng, 5));
    for (auto& i : q1) i = uniform_index(rng, items);
    for (auto& i : q2) i = uniform_index(rng, items);
    const auto r1 = ranking_from_scores(pop.scores(q1));
    EXPECT_EQ(r1, ranking_from_scores(pop.scores(q2)));
    auto sorted = r1;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> ids(items);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    EXPECT_EQ(sorted, ids);
  }
}

TEST(Baselines, SPopPrefersLocalFrequencyThenPopularity) {
  // Item 2 is globally the most popular.
  const SessionCorpus train = corpus_of({{2, 2, 2, 2}, {1, 2, 0}}, 3);
  SPopBaseline spop(train);
  const std::vector<ItemId> prefix{0, 0, 1};
  EXPECT_EQ(ranking_from_scores(spop.scores(prefix)), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(ranking_from_scores(spop.scores(std::vector<ItemId>{1})), (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_EQ(ranking_from_scores(spop.scores(std::vector<ItemId>{})), (std::vector<std::size_t>{2, 0, 1}));
}

TEST(Baselines, ItemKnnMatchesBruteForceCooccurrence) {
  const std::vector<std::vector<ItemId>> seqs{{0, 1, 2}, {1, 2}, {2, 3, 2}, {0, 3}, {1, 0, 1}};
  const SessionCorpus train = corpus_of(seqs, 4);
  ItemKnnBaseline knn(train);
  double cooc[4][4] = {}, freq[4] = {};
  for (const auto& s : seqs) {
    bool in[4] = {};
    for (ItemId i : s) in[i] = true;
    for (int a = 0; a < 4; ++a) {
      freq[a] += in[a];
      for (int b = 0; b < 4; ++b) cooc[a][b] += (a != b && in[a] && in[b]);
    }
  }
  for (ItemId cur = 0; cur < 4; ++cur) {
    std::vector<double> expect(4);
    for (ItemId j = 0; j < 4; ++j) {
      expect[j] = cur == j ? 0.0 : cooc[cur][j] / std::sqrt(freq[cur] * freq[j]);
      EXPECT_DOUBLE_EQ(knn.similarity(cur, j), expect[j]);
    }
    const std::vector<ItemId> prefix{3, cur};
    EXPECT_EQ(ranking_from_scores(knn.scores(prefix)), ranking_from_scores(expect));
  }
  // Hand values: 1 and 2 share sequences 0 and 1; freq(1) = 3, freq(2) = 3.
  EXPECT_DOUBLE_EQ(knn.similarity(1, 2), 2.0 / 3.0);
  EXPECT_EQ(knn.similarity(2, 2), 0.0);
}

TEST(Baselines, RanksCoverEveryEvent) {
  const SessionCorpus train = corpus_of({{0, 1, 2}, {1, 2}}, 3);
  const SessionCorpus test = corpus_of({{0, 1, 2}, {2, 1}}, 3);
  EXPECT_EQ(baseline_ranks(PopBaseline(train), test).size(), 3u);
  EXPECT_THROW(baseline_ranks(PopBaseline(train), corpus_of({{1}}, 3)), InputError);
}

TEST(TraceAnalytics, SingleGenreHasNoChangeEvents) {
  SynthConfig sc;
  sc.genres = 1;
  sc.num_sequences = 10;
  sc.items_per_genre = 8;
  const SessionCorpus c = generate_synthetic_drift(sc);
  Model model({CellKind::hcrnn3, AttentionMode::bi, c.num_items(), {4, 4, 2}}, 1);
  const ModelEvaluation ev = evaluate_ranks(model, c, true, 1);
  const TraceSummary s = trace_analytics(c, ev.traces);
  EXPECT_TRUE(s.gate_by_genre);
  EXPECT_EQ(s.changed_events, 0u);
  EXPECT_GT(s.continued_events, 0u);
  for (const auto& b : s.gate_buckets) EXPECT_FALSE(b.changed_genre);
}

TEST(TraceAnalytics, HandBuiltRecords) {
  SessionCorpus c = corpus_of({{0, 0, 1, 1}}, 2);
  c.genre_names = {"x", "y"};
  c.item_genre = {0, 1};
  auto rec = [](std::size_t t, double r, double dh, double dc, std::vector<double> ac, std::vector<double> ah) {
    TraceRecord tr;
    tr.t = t;
    tr.trace.r = {r};
    tr.trace.delta_h = dh;
    tr.trace.delta_c = dc;
    tr.alpha_c = std::move(ac);
    tr.alpha_h = std::move(ah);
    return tr;
  };
  const std::vector<TraceRecord> records{rec(1, 0.9, 5.0, 5.0, {1.0}, {1.0}),
                                         rec(2, 0.7, 0.4, 0.1, {0.2, 0.8}, {0.5, 0.5}),
                                         rec(3, 0.2, 0.6, 0.3, {0.1, 0.1, 0.8}, {0.6, 0.2, 0.2})};
  const TraceSummary s = trace_analytics(c, records, 1);
  // t=2 continues genre x after a run of 1; t=3 switches to y after a run of 2.
  EXPECT_EQ(s.continued_events, 1u);
  EXPECT_EQ(s.changed_events, 1u);
  EXPECT_DOUBLE_EQ(s.mean_gate_continued, 0.7);
  EXPECT_DOUBLE_EQ(s.mean_gate_changed, 0.2);
  EXPECT_DOUBLE_EQ(s.mean_gate, 0.6);
  EXPECT_DOUBLE_EQ(s.mean_delta_h, 0.5);
  EXPECT_DOUBLE_EQ(s.mean_delta_c, 0.2);
  EXPECT_EQ(s.delta_steps, 2u);
  EXPECT_DOUBLE_EQ(s.recent_mass_c, (1.0 + 1.0 + 0.9) / 3.0);
  EXPECT_DOUBLE_EQ(s.recent_mass_h, (1.0 + 1.0 + 0.4) / 3.0);
  ASSERT_EQ(s.attention.size(), 3u);
  EXPECT_DOUBLE_EQ(s.attention[0].mean_alpha_c, (1.0 + 0.8 + 0.8) / 3.0);
  EXPECT_EQ(s.attention[2].count, 1u);
}

TEST(TraceAnalytics, MissingGenreMapDisablesGateBuckets) {
  const SessionCorpus c = corpus_of({{0, 1, 0}}, 2);
  Model model({CellKind::hcrnn3, AttentionMode::bi, 2, {3, 3, 2}}, 2);
  const TraceSummary s = trace_analytics(c, evaluate_ranks(model, c, true, 1).traces);
  EXPECT_FALSE(s.gate_by_genre);
  EXPECT_TRUE(s.gate_buckets.empty());
  EXPECT_GT(s.mean_gate, 0.0);
  EXPECT_EQ(s.attention_rows, 2u);
}

TEST(Evaluate, VocabularyMismatchIsInputError) {
  Checkpoint ck;
  ck.spec = {CellKind::gru, AttentionMode::none, 3, {2, 2, 0}};
  ck.params = Model(ck.spec, 0).params();
  for (const char* t : {"a", "b", "c"}) ck.vocab.add(t);
  SessionCorpus test;
  for (const char* t : {"a", "z"}) test.vocab.add(t);
  test.sequences = {{0, 1}};
  EXPECT_THROW(evaluate_model(ck, test), InputError);
  EXPECT_THROW(evaluate_ranks(ck.model(), test), InputError);
  test.vocab = Vocabulary();
  for (const char* t : {"c", "a"}) test.vocab.add(t);
  const EvalReport r = evaluate_model(ck, test);
  EXPECT_EQ(r.models[0].events, 1u);
}

TEST(Evaluate, ReportsEveryStepAndRespectsMetricOrder) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t items = 3 + uniform_index(rng, 20);
    std::vector<std::vector<ItemId>> seqs(1 + uniform_index(rng, 4));
    std::size_t events = 0;
    for (auto& s : seqs) {
      s.resize(2 + uniform_index(rng, 5));
      for (auto& i : s) i = uniform_index(rng, items);
      events += s.size() - 1;
    }
    Checkpoint ck;
    ck.spec = {seed % 2 ? CellKind::hcrnn2 : CellKind::lstm, seed % 2 ? AttentionMode::bi : AttentionMode::none, items,
               {3, 3, 2}};
    ck.params = Model(ck.spec, seed).params();
    const SessionCorpus test = corpus_of(seqs, items);
    ck.vocab = test.vocab;
    const EvalReport r = evaluate_model(ck, test, {1, 3, 20}, 1);
    ASSERT_EQ(r.models[0].events, events);
    const auto& m = r.models[0];
    for (std::size_t k : {1u, 3u, 20u}) {
      EXPECT_LE(m.mrr.at(k), m.recall.at(k));
      EXPECT_GE(m.mrr.at(k), 0.0);
      EXPECT_LE(m.recall.at(k), 1.0);
    }
    EXPECT_LE(m.recall.at(1), m.recall.at(3));
    EXPECT_LE(m.recall.at(3), m.recall.at(20));
  }
}

// Untrained models rank the target uniformly at random: R@k ~ k/|I| with
// binomial spread. Each sequence gets its own seeded model.
TEST(Evaluate, RandomModelRecallNearChance) {
  SynthConfig sc;
  sc.num_sequences = 500;
  sc.seed = 11;
  const SessionCorpus c = generate_synthetic_drift(sc);
  const std::size_t n_items = c.num_items();
  std::vector<std::size_t> ranks;
  for (std::size_t s = 0; s < c.sequences.size(); ++s) {
    const Model model({CellKind::gru, AttentionMode::none, n_items, {8, 8, 0}}, derive_seed(5, {s}));
    const auto& seq = c.sequences[s];
    for (std::size_t t = 1; t < seq.size(); ++t) {
      ranks.push_back(rank_of(predict_next(model, std::span<const ItemId>(seq).first(t)), seq[t]));
    }
  }
  ASSERT_GE(ranks.size(), 10000u);
  for (std::size_t k : {1u, 3u, 20u}) {
    const double p = static_cast<double>(k) / static_cast<double>(n_items);
    const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(ranks.size()));
    EXPECT_NEAR(recall_at_k(ranks, k), p, 3.0 * sigma) << "k=" << k;
  }
}
