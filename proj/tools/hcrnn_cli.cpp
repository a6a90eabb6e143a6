// hcrnn: prepare | synth | train | evaluate | inspect | gradcheck

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hcrnn/hcrnn.hpp"

namespace fs = std::filesystem;
using namespace hcrnn;

namespace {

struct PrepareArgs {
  std::string sessions, test_sessions, genres, out = ".";
  std::size_t min_len = 10, min_item_freq = 1;
  bool ratings = false, max_rating_only = false;
};

struct SynthArgs {
  SynthConfig cfg;
  std::size_t test_sequences = 0;
  std::string out = ".";
};

struct TrainArgs {
  std::string data, config, cell, attention, out = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
};

struct EvalArgs {
  std::string checkpoint, data, train, out = ".";
  std::vector<std::size_t> cutoffs = kReportCutoffs;
};

struct GradArgs {
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
};

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory " + dir + ": " + ec.message());
}

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

int run_prepare(const PrepareArgs& a) {
  ensure_dir(a.out);
  RawSessions raw;
  if (a.ratings) {
    raw = sessions_from_ratings(load_ratings(a.sessions), a.max_rating_only);
  } else {
    LoadStats st;
    raw = load_sessions(a.sessions, &st);
    if (st.empty_lines_skipped) std::cerr << "skipped " << st.empty_lines_skipped << " empty lines\n";
  }
  SessionCorpus train = preprocess(raw, a.min_len, a.min_item_freq);
  std::optional<std::map<std::string, std::string>> genres;
  if (!a.genres.empty()) {
    genres = load_genre_map(a.genres);
    attach_genres(train, *genres);
  }
  save_corpus(train, fs::path(a.out) / "train.json");
  std::cout << "train: " << train.sequences.size() << " sequences, " << train.num_items() << " items, "
            << train.num_events() << " events\n";
  if (!a.test_sessions.empty()) {
    SessionCorpus test = encode_with_vocab(load_sessions(a.test_sessions), train);
    save_corpus(test, fs::path(a.out) / "test.json");
    std::cout << "test: " << test.sequences.size() << " sequences, " << test.num_events() << " events\n";
  }
  return 0;
}

int run_synth(const SynthArgs& a) {
  ensure_dir(a.out);
  SynthConfig cfg = a.cfg;
  cfg.num_sequences += a.test_sequences;
  SessionCorpus all = generate_synthetic_drift(cfg);
  const fs::path dir(a.out);
  write_genre_map(all, dir / "genres.tsv");
  if (a.test_sequences > 0) {
    auto [train, test] = split_sequences(all, a.test_sequences);
    save_corpus(train, dir / "train.json");
    save_corpus(test, dir / "test.json");
    write_sessions(train, dir / "train.txt");
    write_sessions(test, dir / "test.txt");
    std::cout << "synthetic: " << train.sequences.size() << " train / " << test.sequences.size()
              << " test sequences, " << all.num_items() << " items\n";
  } else {
    save_corpus(all, dir / "train.json");
    write_sessions(all, dir / "train.txt");
    std::cout << "synthetic: " << all.sequences.size() << " sequences, " << all.num_items() << " items\n";
  }
  return 0;
}

int run_train(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) cfg = load_config(a.config);
  if (!a.cell.empty()) cfg.cell = parse_cell(a.cell);
  if (!a.attention.empty()) cfg.attention = parse_attention(a.attention);
  else if (!a.cell.empty() && !is_hierarchical(cfg.cell)) cfg.attention = AttentionMode::none;
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.max_epochs = *a.epochs;
  cfg.validate();
  ensure_dir(a.out);
  const SessionCorpus corpus = load_corpus(a.data);
  const fs::path dir(a.out);

  std::ofstream log(dir / "loss_log.csv");
  if (!log) throw InputError("cannot write loss log in " + a.out);
  log << "epoch,train_loss,valid_recall20,seconds\n";
  log << std::setprecision(10);
  std::cout << "training " << to_string(cfg.cell) << " (attention " << to_string(cfg.attention) << ") on "
            << corpus.sequences.size() << " sequences, " << worker_count() << " worker(s)\n";
  auto on_epoch = [&](const EpochRecord& r) {
    log << r.epoch << ',' << r.train_loss << ',';
    if (r.valid_recall) log << *r.valid_recall;
    log << ',' << r.seconds << '\n' << std::flush;
    std::cout << "epoch " << r.epoch << "  loss " << std::fixed << std::setprecision(4) << r.train_loss;
    if (r.valid_recall) std::cout << "  valid R@20 " << *r.valid_recall;
    std::cout << "  (" << std::setprecision(1) << r.seconds << " s)\n" << std::defaultfloat << std::flush;
  };
  try {
    const Checkpoint ck = train(corpus, cfg, on_epoch);
    save_checkpoint(ck, dir / "model.ckpt");
    std::cout << "saved " << (dir / "model.ckpt").string() << " (epoch " << ck.epoch << ")\n";
  } catch (const DivergenceError& e) {
    save_checkpoint(e.last_finite(), dir / "last_finite.ckpt");
    std::cerr << e.what() << "\nlast finite parameters saved to " << (dir / "last_finite.ckpt").string() << '\n';
    return 1;
  }
  return 0;
}

void print_metrics(const ModelMetrics& m) {
  std::cout << std::left << std::setw(12) << m.name << std::right << std::fixed << std::setprecision(4);
  for (const auto& [k, v] : m.recall) std::cout << "  R@" << k << ' ' << v;
  for (const auto& [k, v] : m.mrr) std::cout << "  M@" << k << ' ' << v;
  std::cout << "  (" << m.events << " events)\n" << std::defaultfloat;
}

int run_evaluate(const EvalArgs& a) {
  ensure_dir(a.out);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const SessionCorpus test = load_corpus(a.data);
  EvalReport report = evaluate_model(ck, test, a.cutoffs);
  if (!a.train.empty()) {
    const SessionCorpus train_corpus = align_to_vocab(load_corpus(a.train), ck.vocab);
    const SessionCorpus aligned = align_to_vocab(test, ck.vocab);
    report.models.push_back(metrics_from_ranks("pop", baseline_ranks(PopBaseline(train_corpus), aligned), a.cutoffs));
    report.models.push_back(metrics_from_ranks("s-pop", baseline_ranks(SPopBaseline(train_corpus), aligned), a.cutoffs));
    report.models.push_back(
        metrics_from_ranks("item-knn", baseline_ranks(ItemKnnBaseline(train_corpus), aligned), a.cutoffs));
  }
  for (const auto& m : report.models) print_metrics(m);
  write_json(to_json(report), fs::path(a.out) / "eval.json");
  return 0;
}

int run_inspect(const EvalArgs& a) {
  ensure_dir(a.out);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const SessionCorpus test = align_to_vocab(load_corpus(a.data), ck.vocab);
  const Model model = ck.model();
  const ModelEvaluation ev = evaluate_ranks(model, test, true);
  const TraceSummary summary = trace_analytics(test, ev.traces);
  const fs::path dir(a.out);
  write_gate_csv(summary, dir / "gates.csv");
  write_attention_csv(summary, dir / "attention.csv");
  write_context_csv(ev.traces, dir / "context.csv");
  write_json(to_json(summary), dir / "summary.json");

  std::ofstream emb(dir / "embeddings.tsv");
  emb << std::setprecision(10);
  const Tensor& E = model.params().value("embedding");
  for (std::size_t i = 0; i < E.rows(); ++i) {
    emb << ck.vocab.decode(i);
    if (test.has_genres()) emb << '\t' << (test.genre_of(i) == kNoGenre ? "-" : test.genre_names[test.genre_of(i)]);
    for (std::size_t d = 0; d < E.cols(); ++d) emb << '\t' << E.at(i, d);
    emb << '\n';
  }
  if (model.params().contains("global.M")) {
    std::ofstream mem(dir / "global_memory.tsv");
    mem << std::setprecision(10);
    const Tensor& M = model.params().value("global.M");
    for (std::size_t k = 0; k < M.rows(); ++k) {
      mem << k;
      for (std::size_t d = 0; d < M.cols(); ++d) mem << '\t' << M.at(k, d);
      mem << '\n';
    }
  }
  std::cout << "wrote traces for " << ev.traces.size() << " steps to " << a.out << '\n';
  return 0;
}

int run_gradcheck(const GradArgs& a) {
  const auto rows = run_gradient_suite(a.seed);
  bool ok = true;
  std::cout << std::left << std::setw(26) << "component" << std::setw(14) << "max rel err" << std::setw(8) << "coords"
            << "result\n";
  for (const auto& r : rows) {
    const bool pass = r.max_relative_error < a.tolerance;
    ok = ok && pass;
    std::cout << std::left << std::setw(26) << r.component << std::setw(14) << std::scientific << std::setprecision(2)
              << r.max_relative_error << std::defaultfloat << std::setw(8) << r.coordinates << (pass ? "pass" : "FAIL");
    if (!pass) std::cout << "  (worst: " << r.worst_parameter << ")";
    std::cout << '\n';
  }
  std::cout << (ok ? "all gradient checks passed\n" : "gradient checks FAILED\n");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical-context recurrent recommenders"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* c_prep = app.add_subcommand("prepare", "Filter a session file and write a corpus cache");
  c_prep->add_option("--sessions", prep.sessions, "Session file (one session per line)")->required();
  c_prep->add_option("--test-sessions", prep.test_sessions, "Held-out session file, encoded with the train vocabulary");
  c_prep->add_option("--genres", prep.genres, "TSV genre map (item TAB genre)");
  c_prep->add_option("--min-len", prep.min_len, "Minimum sequence length")->capture_default_str();
  c_prep->add_option("--min-item-freq", prep.min_item_freq, "Minimum item frequency")->capture_default_str();
  c_prep->add_flag("--ratings", prep.ratings, "Input lines are 'user item rating timestamp'");
  c_prep->add_flag("--max-rating-only", prep.max_rating_only, "Keep only ratings equal to the maximum rating");
  c_prep->add_option("--out", prep.out, "Output directory")->capture_default_str();

  SynthArgs syn;
  auto* c_syn = app.add_subcommand("synth", "Generate a synthetic interest-drift corpus");
  c_syn->add_option("--genres", syn.cfg.genres, "Number of genres")->capture_default_str();
  c_syn->add_option("--items-per-genre", syn.cfg.items_per_genre, "Items per genre")->capture_default_str();
  c_syn->add_option("--sequences", syn.cfg.num_sequences, "Training sequences")->capture_default_str();
  c_syn->add_option("--test-sequences", syn.test_sequences, "Additional held-out sequences")->capture_default_str();
  c_syn->add_option("--block-min", syn.cfg.block_min, "Shortest genre block")->capture_default_str();
  c_syn->add_option("--block-max", syn.cfg.block_max, "Longest genre block")->capture_default_str();
  c_syn->add_option("--length-min", syn.cfg.length_min, "Shortest sequence")->capture_default_str();
  c_syn->add_option("--length-max", syn.cfg.length_max, "Longest sequence")->capture_default_str();
  c_syn->add_option("--follow-prob", syn.cfg.follow_prob, "Chance of the genre-local successor")->capture_default_str();
  c_syn->add_option("--seed", syn.cfg.seed, "Random seed")->capture_default_str();
  c_syn->add_option("--out", syn.out, "Output directory")->capture_default_str();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model and write a checkpoint");
  c_train->add_option("--data", tr.data, "Corpus cache (train.json)")->required();
  c_train->add_option("--config", tr.config, "Config file (.toml or .json)");
  c_train->add_option("--cell", tr.cell, "lstm | gru | hcrnn1 | hcrnn2 | hcrnn3")
      ->check(CLI::IsMember({"lstm", "gru", "hcrnn1", "hcrnn2", "hcrnn3"}));
  c_train->add_option("--attention", tr.attention, "none | bi")->check(CLI::IsMember({"none", "bi"}));
  c_train->add_option("--seed", tr.seed, "Random seed (overrides the config)");
  c_train->add_option("--epochs", tr.epochs, "Maximum epochs (overrides the config)");
  c_train->add_option("--out", tr.out, "Output directory")->capture_default_str();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "Every-step R@K / M@K of a checkpoint");
  c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  c_eval->add_option("--data", ev.data, "Test corpus cache")->required();
  c_eval->add_option("--train", ev.train, "Training corpus cache; adds POP, S-POP and Item-KNN baselines");
  c_eval->add_option("--cutoffs", ev.cutoffs, "Ranking cutoffs K for R@K and M@K")->capture_default_str();
  c_eval->add_option("--out", ev.out, "Output directory")->capture_default_str();

  EvalArgs ins;
  auto* c_ins = app.add_subcommand("inspect", "Export gate, attention and context traces plus embeddings");
  c_ins->add_option("--checkpoint", ins.checkpoint, "Checkpoint file")->required();
  c_ins->add_option("--data", ins.data, "Corpus cache to trace")->required();
  c_ins->add_option("--out", ins.out, "Output directory")->capture_default_str();

  GradArgs gc;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference checks of every component");
  c_grad->add_option("--seed", gc.seed, "Random seed")->capture_default_str();
  c_grad->add_option("--tolerance", gc.tolerance, "Maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*c_prep) return run_prepare(prep);
    if (*c_syn) return run_synth(syn);
    if (*c_train) return run_train(tr);
    if (*c_eval) return run_evaluate(ev);
    if (*c_ins) return run_inspect(ins);
    if (*c_grad) return run_gradcheck(gc);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
