#pragma once

// Ranking metrics. Ranks are 1-based; equal scores are ordered by ascending
// item id.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "hcrnn/tensor.hpp"

namespace hcrnn {

/// Position of `target` when items are sorted by descending score.
inline std::size_t rank_of(std::span<const double> scores, std::size_t target) {
  if (target >= scores.size()) throw InputError("rank_of: target id out of range");
  const double s = scores[target];
  if (!std::isfinite(s)) throw NumericError("rank_of: non-finite target score");
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > s || (scores[i] == s && i < target)) ++rank;
  }
  return rank;
}

/// Full ranking (item ids, best first).
inline std::vector<std::size_t> ranking_from_scores(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// Rank of each event's target within that event's ranking.
inline std::vector<std::size_t> target_ranks(const std::vector<std::vector<std::size_t>>& rankings,
                                             std::span<const std::size_t> targets) {
  if (rankings.size() != targets.size()) throw DimensionError("need one target per ranking");
  std::vector<std::size_t> ranks;
  ranks.reserve(targets.size());
  for (std::size_t e = 0; e < targets.size(); ++e) {
    const auto& r = rankings[e];
    auto it = std::find(r.begin(), r.end(), targets[e]);
    if (it == r.end()) throw InputError("target missing from ranking");
    ranks.push_back(static_cast<std::size_t>(it - r.begin()) + 1);
  }
  return ranks;
}

namespace detail {
inline void check_metric_args(std::size_t events, std::size_t k) {
  if (k < 1) throw ContractError("metric cutoff k must be >= 1");
  if (events == 0) throw InputError("metric over an empty event set");
}
}  // namespace detail

inline double recall_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  detail::check_metric_args(ranks.size(), k);
  std::size_t hits = 0;
  for (std::size_t r : ranks) hits += r <= k ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

inline double mrr_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  detail::check_metric_args(ranks.size(), k);
  double total = 0.0;
  for (std::size_t r : ranks) total += r <= k ? 1.0 / static_cast<double>(r) : 0.0;
  return total / static_cast<double>(ranks.size());
}

inline double recall_at_k(const std::vector<std::vector<std::size_t>>& rankings, std::span<const std::size_t> targets,
                          std::size_t k) {
  detail::check_metric_args(targets.size(), k);
  return recall_at_k(target_ranks(rankings, targets), k);
}

inline double mrr_at_k(const std::vector<std::vector<std::size_t>>& rankings, std::span<const std::size_t> targets,
                       std::size_t k) {
  detail::check_metric_args(targets.size(), k);
  return mrr_at_k(target_ranks(rankings, targets), k);
}

}  // namespace hcrnn
