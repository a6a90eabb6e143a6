#pragma once

// Checkpoint container:
//   8-byte magic "HCRNNCK1"
//   u64 little-endian length of the JSON header, then the header
//   raw little-endian doubles of every tensor, in header order

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hcrnn/config.hpp"
#include "hcrnn/data.hpp"
#include "hcrnn/model.hpp"

namespace hcrnn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> valid_recall;  // validation R@20
  double seconds = 0.0;
};

struct Checkpoint {
  TrainConfig config;
  ModelSpec spec;
  ParamSet params;
  Vocabulary vocab;
  std::size_t epoch = 0;  // epoch the parameters come from (0 = untrained)
  std::vector<EpochRecord> history;

  Model model() const { return Model(spec, params); }
};

inline constexpr char kCheckpointMagic[8] = {'H', 'C', 'R', 'N', 'N', 'C', 'K', '1'};

inline nlohmann::json spec_to_json(const ModelSpec& s) {
  return {{"cell", std::string(to_string(s.cell))},
          {"attention", std::string(to_string(s.attention))},
          {"num_items", s.num_items},
          {"embed_dim", s.dims.embed_dim},
          {"hidden_dim", s.dims.hidden_dim},
          {"num_contexts", s.dims.num_contexts}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.cell = parse_cell(j.at("cell").get<std::string>());
  s.attention = parse_attention(j.at("attention").get<std::string>());
  s.num_items = j.at("num_items").get<std::size_t>();
  s.dims.embed_dim = j.at("embed_dim").get<std::size_t>();
  s.dims.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  s.dims.num_contexts = j.at("num_contexts").get<std::size_t>();
  return s;
}

inline nlohmann::json history_to_json(const std::vector<EpochRecord>& h) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : h) {
    nlohmann::json e = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"seconds", r.seconds}};
    e["valid_recall20"] = r.valid_recall ? nlohmann::json(*r.valid_recall) : nlohmann::json(nullptr);
    out.push_back(e);
  }
  return out;
}

inline std::vector<EpochRecord> history_from_json(const nlohmann::json& j) {
  std::vector<EpochRecord> out;
  for (const auto& e : j) {
    EpochRecord r;
    r.epoch = e.at("epoch").get<std::size_t>();
    r.train_loss = e.at("train_loss").get<double>();
    r.seconds = e.value("seconds", 0.0);
    if (e.contains("valid_recall20") && !e["valid_recall20"].is_null()) r.valid_recall = e["valid_recall20"].get<double>();
    out.push_back(r);
  }
  return out;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = "hcrnn-checkpoint";
  header["version"] = 1;
  header["config"] = to_json(ck.config);
  header["model"] = spec_to_json(ck.spec);
  header["vocab"] = ck.vocab.tokens();
  header["epoch"] = ck.epoch;
  header["history"] = history_to_json(ck.history);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : ck.params.entries()) tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint: " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : ck.params.entries()) {
    out.write(reinterpret_cast<const char*>(p.value.data().data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!out) throw InputError("failed writing checkpoint: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw InputError("not an hcrnn checkpoint: " + path.string());
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (std::uint64_t{1} << 32)) throw InputError("corrupt checkpoint header: " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw InputError("truncated checkpoint header: " + path.string());

  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(text);
    if (header.value("format", "") != "hcrnn-checkpoint") throw InputError("checkpoint format tag missing");
    ck.config = config_from_json(header.at("config"));
    ck.spec = spec_from_json(header.at("model"));
    for (const auto& tok : header.at("vocab")) ck.vocab.add(tok.get<std::string>());
    ck.epoch = header.at("epoch").get<std::size_t>();
    ck.history = history_from_json(header.at("history"));
    for (const auto& t : header.at("tensors")) {
      Tensor v(t.at("shape").get<Shape>());
      in.read(reinterpret_cast<char*>(v.data().data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
      if (!in) throw InputError("truncated checkpoint tensor data");
      ck.params.add(t.at("name").get<std::string>(), std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed checkpoint header: " + std::string(e.what()));
  }
  if (ck.vocab.size() != ck.spec.num_items) throw InputError("checkpoint vocabulary size does not match the model");
  Model check(ck.spec, ck.params);  // validates names and shapes
  (void)check;
  return ck;
}

}  // namespace hcrnn
