#pragma once

// Summaries of recorded gate/attention/context traces:
//   (a) mean retention gate (r * G^(d), or r) bucketed by the length of the
//       preceding same-genre run and by whether the current item changes genre
//   (b) mean attention weight of both channels as a function of dt = t - j
//   (c) mean per-step |dh| and |dc|

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "hcrnn/cells.hpp"
#include "hcrnn/data.hpp"

namespace hcrnn {

/// Trace of the prediction made after reading items[0..t-1] of a sequence.
struct TraceRecord {
  std::size_t sequence = 0;
  std::size_t t = 0;  // prefix length (1-based position of the current item)
  StepTrace trace;
  std::vector<double> alpha_c;  // over j = 1..t
  std::vector<double> alpha_h;
};

struct GateBucket {
  std::size_t run_length = 0;
  bool changed_genre = false;
  double mean_gate = 0.0;
  std::size_t count = 0;
};

struct AttentionLag {
  std::size_t delta_t = 0;
  double mean_alpha_c = 0.0;
  double mean_alpha_h = 0.0;
  std::size_t count = 0;
};

struct TraceSummary {
  // (a)
  bool gate_by_genre = false;
  std::vector<GateBucket> gate_buckets;
  double mean_gate_changed = 0.0;
  double mean_gate_continued = 0.0;
  std::size_t changed_events = 0;
  std::size_t continued_events = 0;
  double mean_gate = 0.0;  // over every recorded step with a reset gate
  // (b)
  std::vector<AttentionLag> attention;
  std::size_t recent_window = 3;
  double recent_mass_c = 0.0;  // mean over rows of sum_{dt <= window} alpha
  double recent_mass_h = 0.0;
  std::size_t attention_rows = 0;
  // (c)
  double mean_delta_h = 0.0;
  double mean_delta_c = 0.0;
  std::size_t delta_steps = 0;
};

/// `corpus` supplies the item sequences the records refer to and, when
/// present, the genre map used by (a). Context deltas use steps t >= 2, where
/// the previous state is a real one rather than the zero initial state.
inline TraceSummary trace_analytics(const SessionCorpus& corpus, const std::vector<TraceRecord>& records,
                                    std::size_t recent_window = 3) {
  TraceSummary s;
  s.recent_window = recent_window;
  s.gate_by_genre = corpus.has_genres();
  std::map<std::pair<std::size_t, bool>, std::pair<double, std::size_t>> buckets;
  std::vector<double> sum_c, sum_h;
  std::vector<std::size_t> lag_count;
  double gate_total = 0.0, changed_total = 0.0, continued_total = 0.0;
  std::size_t gate_steps = 0;

  for (const auto& rec : records) {
    const auto& seq = corpus.sequences.at(rec.sequence);
    if (rec.t == 0 || rec.t > seq.size()) throw ContractError("trace record step outside its sequence");

    if (!rec.trace.r.empty()) {
      const double gate = rec.trace.mean_retention();
      gate_total += gate;
      ++gate_steps;
      const std::size_t cur = rec.t - 1;
      if (s.gate_by_genre && cur >= 1) {
        const int prev_genre = corpus.genre_of(seq[cur - 1]);
        const int genre = corpus.genre_of(seq[cur]);
        if (prev_genre != kNoGenre && genre != kNoGenre) {
          std::size_t run = 1;
          while (run < cur && corpus.genre_of(seq[cur - 1 - run]) == prev_genre) ++run;
          const bool changed = genre != prev_genre;
          auto& b = buckets[{run, changed}];
          b.first += gate;
          ++b.second;
          (changed ? changed_total : continued_total) += gate;
          ++(changed ? s.changed_events : s.continued_events);
        }
      }
    }

    if (!rec.alpha_c.empty()) {
      const std::size_t t = rec.alpha_c.size();
      if (rec.alpha_h.size() != t) throw DimensionError("trace record attention rows differ in length");
      if (sum_c.size() < t) {
        sum_c.resize(t, 0.0);
        sum_h.resize(t, 0.0);
        lag_count.resize(t, 0);
      }
      double recent_c = 0.0, recent_h = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        const std::size_t dt = t - 1 - j;
        sum_c[dt] += rec.alpha_c[j];
        sum_h[dt] += rec.alpha_h[j];
        ++lag_count[dt];
        if (dt <= recent_window) {
          recent_c += rec.alpha_c[j];
          recent_h += rec.alpha_h[j];
        }
      }
      s.recent_mass_c += recent_c;
      s.recent_mass_h += recent_h;
      ++s.attention_rows;
    }

    if (rec.t >= 2) {
      s.mean_delta_h += rec.trace.delta_h;
      s.mean_delta_c += rec.trace.delta_c;
      ++s.delta_steps;
    }
  }

  for (const auto& [key, v] : buckets) s.gate_buckets.push_back({key.first, key.second, v.first / v.second, v.second});
  if (gate_steps) s.mean_gate = gate_total / gate_steps;
  if (s.changed_events) s.mean_gate_changed = changed_total / s.changed_events;
  if (s.continued_events) s.mean_gate_continued = continued_total / s.continued_events;
  for (std::size_t dt = 0; dt < lag_count.size(); ++dt) {
    s.attention.push_back({dt, sum_c[dt] / lag_count[dt], sum_h[dt] / lag_count[dt], lag_count[dt]});
  }
  if (s.attention_rows) {
    s.recent_mass_c /= s.attention_rows;
    s.recent_mass_h /= s.attention_rows;
  }
  if (s.delta_steps) {
    s.mean_delta_h /= s.delta_steps;
    s.mean_delta_c /= s.delta_steps;
  }
  return s;
}

inline nlohmann::json to_json(const TraceSummary& s) {
  nlohmann::json j;
  j["mean_gate"] = s.mean_gate;
  if (s.gate_by_genre) {
    j["gate_by_genre"] = {{"mean_changed", s.mean_gate_changed},
                          {"mean_continued", s.mean_gate_continued},
                          {"changed_events", s.changed_events},
                          {"continued_events", s.continued_events}};
  }
  if (s.attention_rows) {
    j["attention"] = {{"window", s.recent_window},
                      {"recent_mass_c", s.recent_mass_c},
                      {"recent_mass_h", s.recent_mass_h},
                      {"rows", s.attention_rows}};
  }
  j["context_delta"] = {{"mean_abs_dh", s.mean_delta_h}, {"mean_abs_dc", s.mean_delta_c}, {"steps", s.delta_steps}};
  return j;
}

namespace detail {
inline std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out.precision(10);
  return out;
}
}  // namespace detail

/// run_length,changed_genre,mean_gate,count
inline void write_gate_csv(const TraceSummary& s, const std::filesystem::path& path) {
  auto out = detail::open_csv(path);
  out << "run_length,changed_genre,mean_gate,count\n";
  for (const auto& b : s.gate_buckets) out << b.run_length << ',' << (b.changed_genre ? 1 : 0) << ',' << b.mean_gate << ',' << b.count << '\n';
}

/// delta_t,mean_alpha_c,mean_alpha_h,count
inline void write_attention_csv(const TraceSummary& s, const std::filesystem::path& path) {
  auto out = detail::open_csv(path);
  out << "delta_t,mean_alpha_c,mean_alpha_h,count\n";
  for (const auto& a : s.attention) out << a.delta_t << ',' << a.mean_alpha_c << ',' << a.mean_alpha_h << ',' << a.count << '\n';
}

/// sequence,t,delta_h,delta_c,mean_gate
inline void write_context_csv(const std::vector<TraceRecord>& records, const std::filesystem::path& path) {
  auto out = detail::open_csv(path);
  out << "sequence,t,delta_h,delta_c,mean_gate\n";
  for (const auto& r : records) {
    out << r.sequence << ',' << r.t << ',' << r.trace.delta_h << ',' << r.trace.delta_c << ',' << r.trace.mean_retention() << '\n';
  }
}

}  // namespace hcrnn
