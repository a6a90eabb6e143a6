#pragma once

// Training configuration and its JSON / TOML loaders.
//
// The TOML reader accepts the flat subset used by the shipped configs:
// `key = value` lines, `#` comments, optional [section] headers (ignored),
// quoted strings, booleans, integers and floats.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "hcrnn/attention.hpp"
#include "hcrnn/cells.hpp"
#include "hcrnn/tensor.hpp"

namespace hcrnn {

struct TrainConfig {
  std::size_t batch_size = 512;
  std::size_t embed_dim = 100;
  std::size_t hidden_dim = 100;
  std::size_t num_contexts = 50;
  double input_dropout = 0.25;
  double output_dropout = 0.5;
  double learning_rate = 0.001;
  double kl_weight = 1.0;
  std::size_t max_epochs = 30;
  double grad_clip_norm = 5.0;  // 0 disables clipping
  std::size_t patience = 10;    // 0 disables early stopping
  double validation_fraction = 0.1;  // 0 trains on everything and skips selection
  bool augment = true;
  std::uint64_t seed = 0;
  CellKind cell = CellKind::hcrnn3;
  AttentionMode attention = AttentionMode::bi;

  void validate() const {
    if (batch_size == 0) throw InputError("batch_size must be positive");
    if (embed_dim == 0 || hidden_dim == 0) throw InputError("embed_dim and hidden_dim must be positive");
    if (is_hierarchical(cell) && num_contexts == 0) throw InputError("num_contexts must be positive");
    if (!(input_dropout >= 0.0 && input_dropout < 1.0)) throw InputError("input_dropout must lie in [0, 1)");
    if (!(output_dropout >= 0.0 && output_dropout < 1.0)) throw InputError("output_dropout must lie in [0, 1)");
    if (!(learning_rate > 0.0)) throw InputError("learning_rate must be positive");
    if (!(kl_weight >= 0.0)) throw InputError("kl_weight must be non-negative");
    if (!(grad_clip_norm >= 0.0)) throw InputError("grad_clip_norm must be non-negative");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw InputError("validation_fraction must lie in [0, 1)");
    }
    if (attention == AttentionMode::bi && !is_hierarchical(cell)) {
      throw InputError("attention = bi needs a hierarchical cell (hcrnn1/2/3)");
    }
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"embed_dim", c.embed_dim},
          {"hidden_dim", c.hidden_dim},
          {"num_contexts", c.num_contexts},
          {"input_dropout", c.input_dropout},
          {"output_dropout", c.output_dropout},
          {"learning_rate", c.learning_rate},
          {"kl_weight", c.kl_weight},
          {"max_epochs", c.max_epochs},
          {"grad_clip_norm", c.grad_clip_norm},
          {"patience", c.patience},
          {"validation_fraction", c.validation_fraction},
          {"augment", c.augment},
          {"seed", c.seed},
          {"cell", std::string(to_string(c.cell))},
          {"attention", std::string(to_string(c.attention))}};
}

/// Overlays the keys present in `j` onto `base`. Unknown keys are rejected.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw InputError("config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "batch_size") base.batch_size = v.get<std::size_t>();
      else if (key == "embed_dim") base.embed_dim = v.get<std::size_t>();
      else if (key == "hidden_dim") base.hidden_dim = v.get<std::size_t>();
      else if (key == "num_contexts") base.num_contexts = v.get<std::size_t>();
      else if (key == "input_dropout") base.input_dropout = v.get<double>();
      else if (key == "output_dropout") base.output_dropout = v.get<double>();
      else if (key == "learning_rate") base.learning_rate = v.get<double>();
      else if (key == "kl_weight") base.kl_weight = v.get<double>();
      else if (key == "max_epochs") base.max_epochs = v.get<std::size_t>();
      else if (key == "grad_clip_norm") base.grad_clip_norm = v.get<double>();
      else if (key == "patience") base.patience = v.get<std::size_t>();
      else if (key == "validation_fraction") base.validation_fraction = v.get<double>();
      else if (key == "augment") base.augment = v.get<bool>();
      else if (key == "seed") base.seed = v.get<std::uint64_t>();
      else if (key == "cell") base.cell = parse_cell(v.get<std::string>());
      else if (key == "attention") base.attention = parse_attention(v.get<std::string>());
      else throw InputError("unknown config key: " + key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("bad config value: ") + e.what());
  }
  return base;
}

namespace detail {
inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline nlohmann::json toml_value(const std::string& raw, std::size_t line_no) {
  const std::string v = trim(raw);
  auto fail = [&]() -> nlohmann::json {
    throw InputError("config line " + std::to_string(line_no) + ": cannot parse value '" + v + "'");
  };
  if (v.empty()) return fail();
  if (v.front() == '"' || v.front() == '\'') {
    if (v.size() < 2 || v.back() != v.front()) return fail();
    return v.substr(1, v.size() - 2);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  std::string num;
  for (char ch : v)
    if (ch != '_') num += ch;
  const bool is_int = num.find_first_of(".eE") == std::string::npos;
  std::size_t used = 0;
  try {
    if (is_int && num.front() != '-') {
      const auto x = std::stoull(num, &used);
      if (used == num.size()) return x;
    } else if (is_int) {
      const auto x = std::stoll(num, &used);
      if (used == num.size()) return x;
    } else {
      const double x = std::stod(num, &used);
      if (used == num.size()) return x;
    }
  } catch (const std::exception&) {
  }
  return fail();
}
}  // namespace detail

inline nlohmann::json parse_flat_toml(std::istream& in) {
  nlohmann::json out = nlohmann::json::object();
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    bool quoted = false;
    char q = 0;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char ch = line[i];
      if (quoted) {
        if (ch == q) quoted = false;
      } else if (ch == '"' || ch == '\'') {
        quoted = true;
        q = ch;
      } else if (ch == '#') {
        line.resize(i);
        break;
      }
    }
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '[') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw InputError("config line " + std::to_string(n) + ": expected key = value");
    const std::string key = detail::trim(t.substr(0, eq));
    if (key.empty()) throw InputError("config line " + std::to_string(n) + ": empty key");
    out[key] = detail::toml_value(t.substr(eq + 1), n);
  }
  return out;
}

/// .json files are parsed as JSON, everything else as flat TOML.
inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config: " + path.string());
  nlohmann::json j;
  if (path.extension() == ".json") {
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw InputError("malformed config " + path.string() + ": " + e.what());
    }
  } else {
    j = parse_flat_toml(in);
  }
  return config_from_json(j, base);
}

}  // namespace hcrnn
