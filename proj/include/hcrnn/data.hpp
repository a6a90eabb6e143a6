#pragma once

// Session corpora: loading, filtering, vocabulary, prefix augmentation,
// validation split, JSON cache and a synthetic interest-drift generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hcrnn/random.hpp"
#include "hcrnn/tensor.hpp"

namespace hcrnn {

using ItemId = std::size_t;
using RawSessions = std::vector<std::vector<std::string>>;

class Vocabulary {
 public:
  ItemId add(const std::string& token) {
    auto [it, inserted] = ids_.try_emplace(token, tokens_.size());
    if (inserted) tokens_.push_back(token);
    return it->second;
  }
  std::optional<ItemId> find(const std::string& token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  ItemId encode(const std::string& token) const {
    auto id = find(token);
    if (!id) throw InputError("unknown item token: " + token);
    return *id;
  }
  const std::string& decode(ItemId id) const {
    if (id >= tokens_.size()) throw InputError("item id out of range: " + std::to_string(id));
    return tokens_[id];
  }
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, ItemId> ids_;
};

inline constexpr int kNoGenre = -1;

struct SessionCorpus {
  Vocabulary vocab;
  std::vector<std::vector<ItemId>> sequences;
  std::vector<int> item_genre;  // per item id; empty when no genre map
  std::vector<std::string> genre_names;

  bool has_genres() const noexcept { return !item_genre.empty(); }
  int genre_of(ItemId id) const { return has_genres() ? item_genre.at(id) : kNoGenre; }
  std::size_t num_items() const noexcept { return vocab.size(); }
  std::size_t num_events() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size() > 0 ? s.size() - 1 : 0;
    return n;
  }
};

inline RawSessions to_raw(const SessionCorpus& c) {
  RawSessions raw;
  raw.reserve(c.sequences.size());
  for (const auto& s : c.sequences) {
    std::vector<std::string> tokens;
    tokens.reserve(s.size());
    for (ItemId id : s) tokens.push_back(c.vocab.decode(id));
    raw.push_back(std::move(tokens));
  }
  return raw;
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

struct LoadStats {
  std::size_t empty_lines_skipped = 0;
};

/// One session per line, whitespace-separated item tokens.
inline RawSessions parse_sessions(std::istream& in, LoadStats* stats = nullptr) {
  RawSessions out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> tokens;
    for (std::string tok; ls >> tok;) tokens.push_back(tok);
    if (tokens.empty()) {
      if (stats) ++stats->empty_lines_skipped;
      continue;
    }
    out.push_back(std::move(tokens));
  }
  return out;
}

inline RawSessions load_sessions(const std::filesystem::path& path, LoadStats* stats = nullptr) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read session file: " + path.string());
  RawSessions out = parse_sessions(in, stats);
  if (out.empty()) throw InputError("session file has no sessions: " + path.string());
  return out;
}

/// item-token TAB genre-token per line.
inline std::map<std::string, std::string> load_genre_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read genre map: " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw InputError("genre map line without TAB: " + line);
    out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

/// Items missing from the map get kNoGenre.
inline void attach_genres(SessionCorpus& c, const std::map<std::string, std::string>& genres) {
  std::map<std::string, int> genre_ids;
  c.genre_names.clear();
  c.item_genre.assign(c.vocab.size(), kNoGenre);
  for (ItemId id = 0; id < c.vocab.size(); ++id) {
    auto it = genres.find(c.vocab.decode(id));
    if (it == genres.end()) continue;
    auto [g, inserted] = genre_ids.try_emplace(it->second, static_cast<int>(c.genre_names.size()));
    if (inserted) c.genre_names.push_back(it->second);
    c.item_genre[id] = g->second;
  }
}

struct RatingRecord {
  std::string user;
  std::string item;
  double rating = 0.0;
  double timestamp = 0.0;
};

/// Groups explicit ratings into per-user sessions ordered by time. With
/// `max_rating_only`, only ratings equal to the data set's maximum survive
/// (binary implicit feedback).
inline RawSessions sessions_from_ratings(std::vector<RatingRecord> records, bool max_rating_only) {
  if (max_rating_only && !records.empty()) {
    double top = records.front().rating;
    for (const auto& r : records) top = std::max(top, r.rating);
    std::erase_if(records, [top](const RatingRecord& r) { return r.rating != top; });
  }
  std::stable_sort(records.begin(), records.end(), [](const RatingRecord& a, const RatingRecord& b) {
    return a.user != b.user ? a.user < b.user : a.timestamp < b.timestamp;
  });
  RawSessions out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (i == 0 || records[i].user != records[i - 1].user) out.emplace_back();
    out.back().push_back(records[i].item);
  }
  return out;
}

/// "user item rating timestamp" per line, whitespace separated.
inline std::vector<RatingRecord> load_ratings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read ratings file: " + path.string());
  std::vector<RatingRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    RatingRecord r;
    if (!(ls >> r.user >> r.item >> r.rating >> r.timestamp)) continue;
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Drops items with fewer than `min_item_freq` occurrences and sequences
/// shorter than `min_len`, repeating both filters until nothing changes.
/// The vocabulary is built from the surviving items in first-seen order.
inline SessionCorpus preprocess(const RawSessions& raw, std::size_t min_len = 10, std::size_t min_item_freq = 1) {
  if (min_len < 2) throw ContractError("preprocess: min_len must be >= 2");
  RawSessions cur = raw;
  for (bool changed = true; changed;) {
    changed = false;
    std::unordered_map<std::string, std::size_t> freq;
    for (const auto& s : cur)
      for (const auto& tok : s) ++freq[tok];
    for (auto& s : cur) {
      const auto before = s.size();
      std::erase_if(s, [&](const std::string& tok) { return freq[tok] < min_item_freq; });
      changed = changed || s.size() != before;
    }
    const auto before = cur.size();
    std::erase_if(cur, [&](const std::vector<std::string>& s) { return s.size() < min_len; });
    changed = changed || cur.size() != before;
  }
  if (cur.empty()) throw InputError("preprocess: corpus is empty after filtering");
  SessionCorpus c;
  for (const auto& s : cur) {
    std::vector<ItemId> ids;
    ids.reserve(s.size());
    for (const auto& tok : s) ids.push_back(c.vocab.add(tok));
    c.sequences.push_back(std::move(ids));
  }
  return c;
}

/// Encodes a held-out split against a training vocabulary: tokens the
/// training corpus never saw are removed, then short sequences are dropped.
inline SessionCorpus encode_with_vocab(const RawSessions& raw, const SessionCorpus& train, std::size_t min_len = 2) {
  SessionCorpus c;
  c.vocab = train.vocab;
  c.item_genre = train.item_genre;
  c.genre_names = train.genre_names;
  for (const auto& s : raw) {
    std::vector<ItemId> ids;
    for (const auto& tok : s) {
      if (auto id = train.vocab.find(tok)) ids.push_back(*id);
    }
    if (ids.size() >= std::max<std::size_t>(min_len, 2)) c.sequences.push_back(std::move(ids));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Training instances
// ---------------------------------------------------------------------------

/// items[0..n-1] is a contiguous head of a source sequence; inputs are
/// items[0..n-2] and per-step targets items[1..n-1].
struct Instance {
  std::vector<ItemId> items;
  std::size_t source = 0;

  std::span<const ItemId> inputs() const { return std::span<const ItemId>(items).first(items.size() - 1); }
  std::span<const ItemId> targets() const { return std::span<const ItemId>(items).subspan(1); }
  std::size_t steps() const noexcept { return items.size() - 1; }
};

/// Every prefix of length 2..n of every sequence (n - 1 instances each).
inline std::vector<Instance> augment_prefixes(const SessionCorpus& c) {
  std::vector<Instance> out;
  for (std::size_t s = 0; s < c.sequences.size(); ++s) {
    const auto& seq = c.sequences[s];
    if (seq.size() < 2) throw ContractError("augment_prefixes: sequences must have length >= 2");
    for (std::size_t k = 2; k <= seq.size(); ++k) out.push_back(Instance{{seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(k)}, s});
  }
  return out;
}

/// One instance per sequence (no augmentation).
inline std::vector<Instance> whole_sequences(const SessionCorpus& c) {
  std::vector<Instance> out;
  for (std::size_t s = 0; s < c.sequences.size(); ++s) {
    if (c.sequences[s].size() < 2) throw ContractError("whole_sequences: sequences must have length >= 2");
    out.push_back(Instance{c.sequences[s], s});
  }
  return out;
}

/// Seeded shuffle, then round(fraction * n) instances go to validation.
/// Both halves keep their original relative order.
inline std::pair<std::vector<Instance>, std::vector<Instance>> split_validation(const std::vector<Instance>& instances,
                                                                                double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ContractError("split_validation: fraction must lie in (0, 1)");
  std::vector<std::size_t> order(instances.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, {0x5b1}));
  shuffle(order, rng);
  const auto n_valid = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(instances.size())));
  std::vector<char> is_valid(instances.size(), 0);
  for (std::size_t i = 0; i < n_valid; ++i) is_valid[order[i]] = 1;
  std::pair<std::vector<Instance>, std::vector<Instance>> out;
  for (std::size_t i = 0; i < instances.size(); ++i) (is_valid[i] ? out.second : out.first).push_back(instances[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic interest-drift corpus
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::size_t num_sequences = 100;
  std::size_t genres = 3;
  std::size_t items_per_genre = 20;
  std::size_t block_min = 4;
  std::size_t block_max = 8;
  std::size_t length_min = 16;
  std::size_t length_max = 32;
  double follow_prob = 0.7;   // chance the next in-block item is the genre-local successor
  double home_return = 0.6;   // chance a block after an away block returns to the home genre
  std::uint64_t seed = 0;
};

/// Each sequence is a concatenation of genre blocks. A block draws from one
/// genre's pool following a fixed genre-local successor chain with
/// probability follow_prob; consecutive blocks always differ in genre when
/// more than one genre exists. Item ids are genre * items_per_genre + index.
inline SessionCorpus generate_synthetic_drift(const SynthConfig& cfg) {
  if (cfg.genres == 0 || cfg.items_per_genre == 0) throw ContractError("synthetic corpus needs genres and items");
  if (cfg.block_min == 0 || cfg.block_min > cfg.block_max) throw ContractError("synthetic corpus: bad block length range");
  if (cfg.length_min < 2 || cfg.length_min > cfg.length_max) throw ContractError("synthetic corpus: bad sequence length range");
  std::mt19937_64 rng(derive_seed(cfg.seed, {0x5e9}));
  const std::size_t G = cfg.genres, P = cfg.items_per_genre;

  SessionCorpus c;
  for (std::size_t g = 0; g < G; ++g) {
    c.genre_names.push_back("genre" + std::to_string(g));
    for (std::size_t i = 0; i < P; ++i) {
      std::ostringstream tok;
      tok << 'g' << g << "_i" << i;
      c.vocab.add(tok.str());
      c.item_genre.push_back(static_cast<int>(g));
    }
  }
  // Genre-local successor: a random cycle through each genre's items.
  std::vector<std::size_t> successor(G * P);
  for (std::size_t g = 0; g < G; ++g) {
    std::vector<std::size_t> cycle(P);
    std::iota(cycle.begin(), cycle.end(), g * P);
    shuffle(cycle, rng);
    for (std::size_t i = 0; i < P; ++i) successor[cycle[i]] = cycle[(i + 1) % P];
  }
  auto pick_range = [&](std::size_t lo, std::size_t hi) { return lo + uniform_index(rng, hi - lo + 1); };

  for (std::size_t s = 0; s < cfg.num_sequences; ++s) {
    const std::size_t length = pick_range(cfg.length_min, cfg.length_max);
    const std::size_t home = uniform_index(rng, G);
    std::size_t genre = home;
    std::vector<ItemId> seq;
    seq.reserve(length);
    while (seq.size() < length) {
      const std::size_t block = pick_range(cfg.block_min, cfg.block_max);
      for (std::size_t b = 0; b < block && seq.size() < length; ++b) {
        std::size_t item;
        if (b > 0 && uniform_unit(rng) < cfg.follow_prob) {
          item = successor[seq.back()];
        } else {
          item = genre * P + uniform_index(rng, P);
        }
        seq.push_back(item);
      }
      if (G > 1) {
        std::size_t next;
        if (genre != home && uniform_unit(rng) < cfg.home_return) {
          next = home;
        } else {
          next = uniform_index(rng, G - 1);
          if (next >= genre) ++next;
        }
        genre = next;
      }
    }
    c.sequences.push_back(std::move(seq));
  }
  return c;
}

/// Positions t >= 1 whose item genre differs from the previous item's.
inline std::vector<std::size_t> drift_points(const SessionCorpus& c, std::size_t sequence) {
  std::vector<std::size_t> out;
  if (!c.has_genres()) return out;
  const auto& s = c.sequences.at(sequence);
  for (std::size_t t = 1; t < s.size(); ++t) {
    if (c.genre_of(s[t]) != c.genre_of(s[t - 1])) out.push_back(t);
  }
  return out;
}

/// Splits off the last `n_test` sequences as a held-out corpus sharing the
/// vocabulary.
inline std::pair<SessionCorpus, SessionCorpus> split_sequences(const SessionCorpus& c, std::size_t n_test) {
  if (n_test >= c.sequences.size()) throw ContractError("split_sequences: test part must leave training data");
  SessionCorpus train = c, test = c;
  train.sequences.assign(c.sequences.begin(), c.sequences.end() - static_cast<std::ptrdiff_t>(n_test));
  test.sequences.assign(c.sequences.end() - static_cast<std::ptrdiff_t>(n_test), c.sequences.end());
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// JSON cache
// ---------------------------------------------------------------------------

inline nlohmann::json corpus_to_json(const SessionCorpus& c) {
  nlohmann::json j;
  j["format"] = "hcrnn-corpus";
  j["version"] = 1;
  j["vocab"] = c.vocab.tokens();
  j["sequences"] = c.sequences;
  if (c.has_genres()) {
    j["genres"] = {{"names", c.genre_names}, {"item_genre", c.item_genre}};
  }
  return j;
}

inline SessionCorpus corpus_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "hcrnn-corpus") throw InputError("not an hcrnn corpus cache");
  SessionCorpus c;
  for (const auto& tok : j.at("vocab")) c.vocab.add(tok.get<std::string>());
  if (c.vocab.size() != j.at("vocab").size()) throw InputError("corpus cache has duplicate vocabulary tokens");
  c.sequences = j.at("sequences").get<std::vector<std::vector<ItemId>>>();
  for (const auto& s : c.sequences) {
    for (ItemId id : s) {
      if (id >= c.vocab.size()) throw InputError("corpus cache has an out-of-vocabulary id");
    }
  }
  if (j.contains("genres")) {
    c.genre_names = j["genres"].at("names").get<std::vector<std::string>>();
    c.item_genre = j["genres"].at("item_genre").get<std::vector<int>>();
    if (c.item_genre.size() != c.vocab.size()) throw InputError("corpus cache genre map size mismatch");
  }
  return c;
}

inline void save_corpus(const SessionCorpus& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write corpus cache: " + path.string());
  out << corpus_to_json(c).dump() << '\n';
}

inline SessionCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read corpus cache: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed corpus cache " + path.string() + ": " + e.what());
  }
  return corpus_from_json(j);
}

inline void write_sessions(const SessionCorpus& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write session file: " + path.string());
  for (const auto& s : c.sequences) {
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << c.vocab.decode(s[i]);
    out << '\n';
  }
}

inline void write_genre_map(const SessionCorpus& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write genre map: " + path.string());
  for (ItemId id = 0; id < c.vocab.size(); ++id) {
    if (c.genre_of(id) != kNoGenre) out << c.vocab.decode(id) << '\t' << c.genre_names.at(c.genre_of(id)) << '\n';
  }
}

}  // namespace hcrnn
