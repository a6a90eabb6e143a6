#pragma once

// Non-neural next-item baselines. Each exposes scores(prefix) over the full
// vocabulary; rankings follow the shared tie rule in metrics.hpp.

#include <cmath>
#include <span>
#include <string_view>
#include <vector>

#include "hcrnn/data.hpp"

namespace hcrnn {

/// Global item popularity in the training corpus.
class PopBaseline {
 public:
  explicit PopBaseline(const SessionCorpus& train) : counts_(train.num_items(), 0.0) {
    for (const auto& s : train.sequences)
      for (ItemId id : s) counts_.at(id) += 1.0;
  }
  std::vector<double> scores(std::span<const ItemId>) const { return counts_; }
  const std::vector<double>& counts() const noexcept { return counts_; }

 private:
  std::vector<double> counts_;
};

/// Frequency inside the current prefix; items tied on that count fall back to
/// global popularity.
class SPopBaseline {
 public:
  explicit SPopBaseline(const SessionCorpus& train) : pop_(train) {
    double total = 0.0;
    for (double c : pop_.counts()) total += c;
    scale_ = 1.0 / (total + 1.0);
  }
  std::vector<double> scores(std::span<const ItemId> prefix) const {
    std::vector<double> out(pop_.counts().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pop_.counts()[i] * scale_;
    for (ItemId id : prefix) out.at(id) += 1.0;
    return out;
  }

 private:
  PopBaseline pop_;
  double scale_ = 1.0;
};

/// Session co-occurrence with the current (last) item:
/// sim(i, j) = cooc(i, j) / sqrt(freq(i) * freq(j)), where cooc counts
/// training sequences containing both and freq counts sequences containing
/// the item. The current item itself scores 0.
class ItemKnnBaseline {
 public:
  explicit ItemKnnBaseline(const SessionCorpus& train)
      : n_(train.num_items()), cooc_(n_ * n_, 0.0), freq_(n_, 0.0) {
    std::vector<char> seen(n_, 0);
    std::vector<ItemId> distinct;
    for (const auto& s : train.sequences) {
      distinct.clear();
      for (ItemId id : s) {
        if (!seen.at(id)) {
          seen[id] = 1;
          distinct.push_back(id);
        }
      }
      for (ItemId a : distinct) {
        freq_[a] += 1.0;
        for (ItemId b : distinct)
          if (a != b) cooc_[a * n_ + b] += 1.0;
      }
      for (ItemId id : distinct) seen[id] = 0;
    }
  }

  double similarity(ItemId a, ItemId b) const {
    if (a == b || freq_.at(a) == 0.0 || freq_.at(b) == 0.0) return 0.0;
    return cooc_[a * n_ + b] / std::sqrt(freq_[a] * freq_[b]);
  }

  std::vector<double> scores(std::span<const ItemId> prefix) const {
    std::vector<double> out(n_, 0.0);
    if (prefix.empty()) return out;
    const ItemId cur = prefix.back();
    for (ItemId j = 0; j < n_; ++j) out[j] = similarity(cur, j);
    return out;
  }

 private:
  std::size_t n_;
  std::vector<double> cooc_;
  std::vector<double> freq_;
};

}  // namespace hcrnn
