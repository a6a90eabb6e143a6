#pragma once

// Every-step next-item evaluation of trained models and baselines.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hcrnn/analytics.hpp"
#include "hcrnn/checkpoint.hpp"
#include "hcrnn/data.hpp"
#include "hcrnn/metrics.hpp"
#include "hcrnn/model.hpp"
#include "hcrnn/parallel.hpp"

namespace hcrnn {

inline const std::vector<std::size_t> kReportCutoffs = {3, 20};

struct ModelMetrics {
  std::string name;
  std::size_t events = 0;
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> mrr;
};

inline ModelMetrics metrics_from_ranks(std::string name, std::span<const std::size_t> ranks,
                                       const std::vector<std::size_t>& cutoffs) {
  ModelMetrics m;
  m.name = std::move(name);
  m.events = ranks.size();
  for (std::size_t k : cutoffs) {
    m.recall[k] = recall_at_k(ranks, k);
    m.mrr[k] = mrr_at_k(ranks, k);
  }
  return m;
}

/// Re-encodes a held-out corpus with a checkpoint's vocabulary. Every token
/// must be known to the checkpoint.
inline SessionCorpus align_to_vocab(const SessionCorpus& test, const Vocabulary& vocab) {
  if (test.vocab == vocab) return test;
  SessionCorpus out;
  out.vocab = vocab;
  for (const auto& s : test.sequences) {
    std::vector<ItemId> ids;
    ids.reserve(s.size());
    for (ItemId id : s) {
      const auto& tok = test.vocab.decode(id);
      auto mapped = vocab.find(tok);
      if (!mapped) throw InputError("vocabulary mismatch: test item '" + tok + "' is unknown to the model");
      ids.push_back(*mapped);
    }
    out.sequences.push_back(std::move(ids));
  }
  if (test.has_genres()) {
    out.genre_names = test.genre_names;
    out.item_genre.assign(vocab.size(), kNoGenre);
    for (ItemId id = 0; id < test.vocab.size(); ++id) {
      if (auto mapped = vocab.find(test.vocab.decode(id))) out.item_genre[*mapped] = test.item_genre[id];
    }
  }
  return out;
}

struct ModelEvaluation {
  std::vector<std::size_t> ranks;  // one per event, sequence-major
  std::vector<TraceRecord> traces;
};

/// Ranks the true next item at every step of every test sequence over the
/// full vocabulary, with theta_tilde = mu and no dropout.
inline ModelEvaluation evaluate_ranks(const Model& model, const SessionCorpus& test, bool with_traces = true,
                                      std::size_t workers = worker_count()) {
  if (test.num_items() != model.spec().num_items) throw InputError("vocabulary mismatch between model and test corpus");
  std::vector<ModelEvaluation> per(test.sequences.size());
  parallel_for(
      test.sequences.size(),
      [&](std::size_t s) {
        const auto& seq = test.sequences[s];
        auto events = predict_events(model, seq, with_traces);
        auto& out = per[s];
        for (std::size_t t = 0; t < events.size(); ++t) {
          out.ranks.push_back(rank_of(events[t].logits, seq[t + 1]));
          if (with_traces) {
            out.traces.push_back(
                {s, t + 1, std::move(events[t].trace), std::move(events[t].alpha_c), std::move(events[t].alpha_h)});
          }
        }
      },
      workers);
  ModelEvaluation all;
  for (auto& p : per) {
    all.ranks.insert(all.ranks.end(), p.ranks.begin(), p.ranks.end());
    std::move(p.traces.begin(), p.traces.end(), std::back_inserter(all.traces));
  }
  if (all.ranks.empty()) throw InputError("test corpus has no prediction events");
  return all;
}

/// Baseline exposing scores(prefix).
template <class Baseline>
std::vector<std::size_t> baseline_ranks(const Baseline& b, const SessionCorpus& test) {
  std::vector<std::size_t> ranks;
  for (const auto& seq : test.sequences) {
    for (std::size_t t = 1; t < seq.size(); ++t) {
      const auto scores = b.scores(std::span<const ItemId>(seq).first(t));
      ranks.push_back(rank_of(scores, seq[t]));
    }
  }
  if (ranks.empty()) throw InputError("test corpus has no prediction events");
  return ranks;
}

struct EvalReport {
  std::vector<ModelMetrics> models;
  std::optional<TraceSummary> traces;
};

/// Evaluates a checkpoint on a test corpus (R@{3,20}, M@{3,20} plus trace
/// analytics).
inline EvalReport evaluate_model(const Checkpoint& ck, const SessionCorpus& test,
                                 const std::vector<std::size_t>& cutoffs = kReportCutoffs,
                                 std::size_t workers = worker_count()) {
  const SessionCorpus aligned = align_to_vocab(test, ck.vocab);
  const Model model = ck.model();
  ModelEvaluation ev = evaluate_ranks(model, aligned, true, workers);
  EvalReport r;
  r.models.push_back(metrics_from_ranks(model_label(ck.spec), ev.ranks, cutoffs));
  r.traces = trace_analytics(aligned, ev.traces);
  return r;
}

inline nlohmann::json to_json(const ModelMetrics& m) {
  nlohmann::json j;
  j["model"] = m.name;
  j["events"] = m.events;
  for (const auto& [k, v] : m.recall) j["recall@" + std::to_string(k)] = v;
  for (const auto& [k, v] : m.mrr) j["mrr@" + std::to_string(k)] = v;
  return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["models"] = nlohmann::json::array();
  for (const auto& m : r.models) j["models"].push_back(to_json(m));
  if (r.traces) j["traces"] = to_json(*r.traces);
  return j;
}

}  // namespace hcrnn
