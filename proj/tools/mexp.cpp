// mexp: command-line front end for the modular-exponentiation lab.

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "mexp/analysis.hpp"
#include "mexp/checkpoint.hpp"
#include "mexp/csv.hpp"
#include "mexp/dataset_io.hpp"
#include "mexp/interpret.hpp"
#include "mexp/trainer.hpp"

namespace fs = std::filesystem;
using namespace mexp;

namespace {

template <class T>
void preset(const CLI::Option* opt, T& field, T value) {
  if (opt->count() == 0) {
    field = value;
  }
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
}

template <class Fn>
void write_with(const fs::path& path, Fn&& fn) {
  std::ostringstream out;
  fn(out);
  write_file(path, out.str());
}

std::uint32_t checkpoint_base(const Model<float>& model) {
  return static_cast<std::uint32_t>(model.config.vocab_size - 4);
}

fs::path latest_checkpoint(const fs::path& run) {
  if (!fs::is_directory(run)) {
    throw DataError("run directory not found: " + run.string());
  }
  const std::regex pattern(R"(ckpt_(\d+)\.mexp1)");
  int best = -1;
  fs::path best_path;
  for (const auto& entry : fs::directory_iterator(run)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern) && std::stoi(m[1]) > best) {
      best = std::stoi(m[1]);
      best_path = entry.path();
    }
  }
  if (best < 0) {
    throw DataError("no checkpoints in " + run.string());
  }
  return best_path;
}

SamplerSpec run_spec(const LoadedCheckpoint& ck) {
  if (ck.meta.run.contains("train")) {
    return ck.meta.run.at("train").at("train_spec").get<SamplerSpec>();
  }
  return SamplerSpec{};
}

// ---------------------------------------------------------------------------
// gen

struct GenOpts {
  std::string operands = "reciprocal";
  std::string outcomes = "computed";
  std::uint64_t count = 1000;
  std::uint64_t seed = 1;
  std::uint64_t max_int = 1'000'000;
  std::uint64_t c_max = 100;
  std::uint64_t max_rejections = 1'000'000;
  std::string out = "dataset.jsonl";
  std::string tokenized;
  std::uint32_t base = 1000;
  unsigned threads = 1;
};

void add_sampler_options(CLI::App* cmd, std::string& operands, std::string& outcomes,
                         std::uint64_t& max_int, std::uint64_t& c_max) {
  cmd->add_option("--operands", operands, "Operand law: uniform | reciprocal")->capture_default_str();
  cmd->add_option("--outcomes", outcomes, "Outcome law: computed | uniform")->capture_default_str();
  cmd->add_option("--max-int", max_int, "Operand bound M")->capture_default_str();
  cmd->add_option("--c-max", c_max, "Largest modulus")->capture_default_str();
}

int cmd_gen(const GenOpts& o) {
  SamplerSpec spec;
  spec.operand_law = parse_operand_law(o.operands);
  spec.outcome_law = parse_outcome_law(o.outcomes);
  spec.max_int = o.max_int;
  spec.c_max = o.c_max;
  spec.seed = o.seed;
  spec.max_rejections = o.max_rejections;
  const auto stats = write_dataset(o.out, spec, o.count, Stream::dataset, o.threads);
  if (!o.tokenized.empty()) {
    const auto rows = read_dataset(o.out);
    write_tokenized(o.tokenized, rows, Vocabulary(o.base), max_source_len(o.max_int, o.c_max, o.base),
                    max_target_len(o.c_max, o.base));
  }
  std::cout << fmt::format("wrote {} rows to {} ({} rejections)\n", stats.count, o.out,
                           stats.rejections);
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string preset;
  std::uint64_t seed = 1;
  std::string out = "run";
  std::string operands = "reciprocal";
  std::string outcomes = "computed";
  std::uint64_t max_int = 1'000'000;
  std::uint64_t c_max = 100;
  int epochs = 2500;
  std::uint64_t samples_per_epoch = 300'000;
  int batch_size = 256;
  double lr = 1e-4;
  std::uint32_t base = 1000;
  int enc_layers = 4;
  int dec_layers = 4;
  int d_model = 256;
  int heads = 8;
  int d_ff = 1024;
  std::uint64_t eval_size = 10'000;
  bool stratified_eval = false;
  int eval_every = 1;
  int checkpoint_every = 100;
  unsigned threads = 1;
  std::string resume;
  bool force = false;
  bool quiet = false;
};

struct TrainHandles {
  CLI::Option *max_int, *c_max, *epochs, *spe, *batch, *lr, *base, *enc, *dec, *d_model, *heads,
      *d_ff, *eval_size, *ckpt_every;
};

void apply_preset(TrainOpts& o, const TrainHandles& h) {
  if (o.preset.empty()) {
    return;
  }
  if (o.preset == "paper") {
    preset(h.max_int, o.max_int, std::uint64_t{1'000'000});
    preset(h.c_max, o.c_max, std::uint64_t{100});
    preset(h.epochs, o.epochs, 2500);
    preset(h.spe, o.samples_per_epoch, std::uint64_t{300'000});
    preset(h.batch, o.batch_size, 256);
    preset(h.lr, o.lr, 1e-4);
    preset(h.base, o.base, std::uint32_t{1000});
    preset(h.enc, o.enc_layers, 4);
    preset(h.dec, o.dec_layers, 4);
    preset(h.d_model, o.d_model, 256);
    preset(h.heads, o.heads, 8);
    preset(h.d_ff, o.d_ff, 1024);
    preset(h.eval_size, o.eval_size, std::uint64_t{10'000});
    preset(h.ckpt_every, o.checkpoint_every, 100);
  } else if (o.preset == "desk") {
    preset(h.max_int, o.max_int, std::uint64_t{10'000});
    preset(h.c_max, o.c_max, std::uint64_t{20});
    preset(h.epochs, o.epochs, 200);
    preset(h.spe, o.samples_per_epoch, std::uint64_t{10'000});
    preset(h.batch, o.batch_size, 64);
    preset(h.lr, o.lr, 1e-3);
    preset(h.base, o.base, std::uint32_t{1000});
    preset(h.enc, o.enc_layers, 2);
    preset(h.dec, o.dec_layers, 2);
    preset(h.d_model, o.d_model, 64);
    preset(h.heads, o.heads, 4);
    preset(h.d_ff, o.d_ff, 256);
    preset(h.eval_size, o.eval_size, std::uint64_t{2'000});
    preset(h.ckpt_every, o.checkpoint_every, 50);
  } else {
    throw UsageError("unknown preset '" + o.preset + "' (expected paper or desk)");
  }
}

TrainConfig to_train_config(const TrainOpts& o) {
  TrainConfig c;
  c.epochs = o.epochs;
  c.samples_per_epoch = o.samples_per_epoch;
  c.batch_size = o.batch_size;
  c.base = o.base;
  c.train_spec.operand_law = parse_operand_law(o.operands);
  c.train_spec.outcome_law = parse_outcome_law(o.outcomes);
  c.train_spec.max_int = o.max_int;
  c.train_spec.c_max = o.c_max;
  c.train_spec.seed = o.seed;
  c.eval_size = o.eval_size;
  c.stratified_eval = o.stratified_eval;
  c.eval_every = o.eval_every;
  c.checkpoint_every = o.checkpoint_every;
  c.out_dir = o.out;
  c.model.n_layers_enc = o.enc_layers;
  c.model.n_layers_dec = o.dec_layers;
  c.model.d_model = o.d_model;
  c.model.n_heads = o.heads;
  c.model.d_ff = o.d_ff;
  c.model.seed = o.seed;
  c.adam.lr = o.lr;
  c.threads = o.threads;
  return c;
}

// Re-loadable with `mexp --config FILE train`.
std::string ini_snapshot(const TrainConfig& c) {
  std::string s = "[train]\n";
  auto kv = [&s](const std::string& k, const std::string& v) { s += k + " = " + v + "\n"; };
  kv("seed", std::to_string(c.train_spec.seed));
  kv("out", "\"" + c.out_dir.string() + "\"");
  kv("operands", to_string(c.train_spec.operand_law));
  kv("outcomes", to_string(c.train_spec.outcome_law));
  kv("max-int", std::to_string(c.train_spec.max_int));
  kv("c-max", std::to_string(c.train_spec.c_max));
  kv("epochs", std::to_string(c.epochs));
  kv("samples-per-epoch", std::to_string(c.samples_per_epoch));
  kv("batch-size", std::to_string(c.batch_size));
  kv("lr", fmt::format("{}", c.adam.lr));
  kv("base", std::to_string(c.base));
  kv("enc-layers", std::to_string(c.model.n_layers_enc));
  kv("dec-layers", std::to_string(c.model.n_layers_dec));
  kv("d-model", std::to_string(c.model.d_model));
  kv("heads", std::to_string(c.model.n_heads));
  kv("d-ff", std::to_string(c.model.d_ff));
  kv("eval-size", std::to_string(c.eval_size));
  kv("stratified-eval", c.stratified_eval ? "true" : "false");
  kv("eval-every", std::to_string(c.eval_every));
  kv("checkpoint-every", std::to_string(c.checkpoint_every));
  return s;
}

int cmd_train(const TrainOpts& o, const CLI::Option* epochs_opt, const CLI::Option* out_opt) {
  TrainConfig config = to_train_config(o);
  std::optional<fs::path> resume;
  if (!o.resume.empty()) {
    resume = o.resume;
    const auto header = read_checkpoint_header(*resume);
    if (!header.contains("run") || !header.at("run").contains("train")) {
      throw DataError("checkpoint has no training config: " + o.resume);
    }
    config = header.at("run").at("train").get<TrainConfig>();
    config.threads = o.threads;
    if (epochs_opt->count() > 0) {
      config.epochs = o.epochs;
    }
    if (out_opt->count() > 0) {
      config.out_dir = o.out;
    }
  } else {
    config.validate();
    if (fs::exists(fs::path(config.out_dir) / "metrics.csv") && !o.force) {
      throw UsageError("run directory " + config.out_dir.string() +
                       " already holds a run; pass --resume CKPT or --force");
    }
    fs::create_directories(config.out_dir);
    write_file(config.out_dir / "config.ini", ini_snapshot(config));
  }

  auto last = std::chrono::steady_clock::now();
  const auto total = config.epochs;
  train(config, resume, [&](const std::vector<EpochMetrics>& rows) {
    if (o.quiet) {
      return;
    }
    const auto now = std::chrono::steady_clock::now();
    std::string line = fmt::format("epoch {}/{}", rows.front().epoch, total);
    for (const auto& m : rows) {
      line += fmt::format("  {} loss {:.4f} acc {:.4f}", to_string(m.split), m.loss, m.accuracy);
    }
    line += fmt::format("  ({:.1f} s)", std::chrono::duration<double>(now - last).count());
    last = now;
    std::cerr << line << '\n';
  });
  std::cout << "run written to " << config.out_dir.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string checkpoint;
  std::string dataset;
  std::string out;
  unsigned threads = 1;
};

int cmd_eval(const EvalOpts& o) {
  const auto ck = load_checkpoint(o.checkpoint);
  const auto rows = read_dataset(o.dataset);
  if (rows.empty()) {
    throw DataError("dataset is empty: " + o.dataset);
  }
  const Vocabulary vocab(checkpoint_base(ck.model));
  std::vector<Prediction> preds;
  const auto m = evaluate(ck.model, rows, vocab, o.threads, &preds);
  std::cout << fmt::format("epoch {} rows {} loss {:.6f} accuracy {:.6f}\n", ck.meta.epoch,
                           rows.size(), m.loss, m.accuracy);
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_with(fs::path(o.out) / "predictions.csv",
               [&](std::ostream& s) { write_predictions_csv(s, preds); });
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [c, t] : m.per_modulus) {
      per[std::to_string(c)] = {{"correct", t.correct}, {"total", t.total}};
    }
    const nlohmann::json summary = {{"checkpoint", o.checkpoint}, {"dataset", o.dataset},
                                    {"epoch", ck.meta.epoch},     {"rows", rows.size()},
                                    {"loss", m.loss},             {"accuracy", m.accuracy},
                                    {"per_modulus", per}};
    write_file(fs::path(o.out) / "eval.json", summary.dump(2) + "\n");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// grok

struct GrokOpts {
  std::string run;
  std::string split = "test";
  double threshold = 0.4;
  int window = 25;
  int sustain = 50;
  int sync_window = 25;
  std::string out;
};

int cmd_grok(const GrokOpts& o) {
  const fs::path run(o.run);
  const fs::path out = o.out.empty() ? run : fs::path(o.out);
  fs::create_directories(out);
  const Split split = o.split == "valid" ? Split::valid : Split::test;
  if (o.split != "valid" && o.split != "test") {
    throw UsageError("--split must be valid or test");
  }
  const auto per_modulus = run / "per_modulus.csv";
  if (!fs::exists(per_modulus)) {
    throw DataError("missing " + per_modulus.string());
  }
  const auto series = read_modulus_series(per_modulus, split);
  GrokParams params{o.threshold, o.window, o.sustain};
  std::vector<GrokEvent> events;
  for (const auto& [c, s] : series) {
    const auto found = detect_grokking(s, params);
    events.insert(events.end(), found.begin(), found.end());
  }
  const auto families = family_sync_report(events, o.sync_window);
  write_with(out / "grok_events.csv", [&](std::ostream& s) { write_grok_events_csv(s, events); });
  write_with(out / "families.csv", [&](std::ostream& s) { write_families_csv(s, families); });
  write_with(out / fmt::format("series_{}.csv", o.split),
             [&](std::ostream& s) { write_series_csv(s, series); });
  std::vector<ChartLine> lines;
  for (const auto& [c, s] : series) {
    ChartLine line{fmt::format("c = {}", c), {}};
    for (const auto& p : s.points) {
      line.points.emplace_back(p.epoch, p.accuracy);
    }
    lines.push_back(std::move(line));
  }
  write_with(out / fmt::format("series_{}.svg", o.split), [&](std::ostream& s) {
    write_line_chart_svg(s, fmt::format("per-modulus {} accuracy", o.split), lines);
  });
  std::cout << fmt::format("{} events, {} families\n", events.size(),
                           std::count_if(families.begin(), families.end(),
                                         [](const Family& f) { return !f.singleton; }));
  return 0;
}

// ---------------------------------------------------------------------------
// census

struct CensusOpts {
  std::string run;
  std::string checkpoint;
  std::string dataset;
  std::uint64_t min_support = 10;
  std::string out;
  unsigned threads = 1;
};

int cmd_census(const CensusOpts& o) {
  if (o.run.empty() && (o.checkpoint.empty() || o.dataset.empty())) {
    throw UsageError("census needs --run, or both --checkpoint and --dataset");
  }
  const fs::path run(o.run);
  const fs::path ckpt = o.checkpoint.empty() ? latest_checkpoint(run) : fs::path(o.checkpoint);
  const fs::path data = o.dataset.empty() ? run / "test.jsonl" : fs::path(o.dataset);
  const fs::path out = !o.out.empty() ? fs::path(o.out) : (!o.run.empty() ? run : fs::path("."));
  fs::create_directories(out);
  const auto ck = load_checkpoint(ckpt);
  const auto rows = read_dataset(data);
  const Vocabulary vocab(checkpoint_base(ck.model));
  const auto preds = predict(ck.model, rows, vocab, o.threads);
  const auto table = misprediction_census(preds, o.min_support);
  write_with(out / "confusions.csv", [&](std::ostream& s) { write_confusions_csv(s, table); });
  write_with(out / "confusion_histogram.csv",
             [&](std::ostream& s) { write_confusion_histogram_csv(s, table); });
  write_with(out / "predictions.csv", [&](std::ostream& s) { write_predictions_csv(s, preds); });
  std::cout << fmt::format("{} rows from {}, {} targets with confusions\n", rows.size(),
                           ckpt.string(), table.size());
  return 0;
}

// ---------------------------------------------------------------------------
// patch

struct PatchOpts {
  std::string checkpoint;
  int pairs = 100;
  std::string filter = "no-reduction";
  std::uint64_t seed = 1;
  std::string operands;
  bool include_encoder = false;
  std::uint64_t circuit_size = 1000;
  std::uint64_t reference_size = 512;
  std::string out;
  unsigned threads = 1;
};

int cmd_patch(const PatchOpts& o) {
  if (o.pairs < 1) {
    throw UsageError("--pairs must be >= 1");
  }
  const auto ck = load_checkpoint(o.checkpoint);
  const auto base = checkpoint_base(ck.model);
  const Vocabulary vocab(base);
  SamplerSpec spec = run_spec(ck);
  spec.seed = o.seed;
  spec.outcome_law = OutcomeLaw::computed;
  if (!o.operands.empty()) {
    spec.operand_law = parse_operand_law(o.operands);
  }
  const PairFilter filter = parse_pair_filter(o.filter);
  const fs::path out =
      o.out.empty() ? fs::path(o.checkpoint).parent_path() / "patch" : fs::path(o.out);
  fs::create_directories(out);

  const auto pairs = build_prompt_pairs(spec, static_cast<std::size_t>(o.pairs), filter, base);
  const auto model64 = convert_model<double>(ck.model);
  const auto report = patch_sweep(model64, pairs, vocab, o.include_encoder, to_string(filter));
  write_with(out / "kl_map.csv", [&](std::ostream& s) { write_kl_map_csv(s, report); });
  write_with(out / "kl_pairs.csv", [&](std::ostream& s) { write_kl_pairs_csv(s, report); });
  write_with(out / "kl_map.svg",
             [&](std::ostream& s) { write_kl_heatmap_svg(s, report, ck.model.config); });

  std::vector<ModExpInstance> dataset;
  for (const auto& inst : generate_instances(spec, o.circuit_size, Stream::test)) {
    if (filter == PairFilter::none || no_reduction(inst)) {
      dataset.push_back(inst);
    }
  }
  if (dataset.empty()) {
    for (const auto& p : pairs) {
      dataset.push_back(p.clean);
    }
  }
  const auto reference = generate_instances(spec, o.reference_size, Stream::reference);
  std::ostringstream circuit_csv;
  write_circuit_csv_header(circuit_csv);
  for (const auto mode : {AblationMode::mean, AblationMode::zero}) {
    const auto final_layer = final_layer_circuit(ck.model.config, mode, o.include_encoder);
    CircuitSpec all{{}, mode, o.include_encoder, "all heads"};
    for (const auto& slot : head_slots(ck.model.config, o.include_encoder)) {
      all.active_heads.insert(slot);
    }
    const CircuitSpec none{{}, mode, o.include_encoder, "no heads"};
    for (const CircuitSpec* circuit : std::array<const CircuitSpec*, 3>{&final_layer, &all, &none}) {
      const auto r = circuit_eval(ck.model, *circuit, dataset, reference, vocab, o.threads);
      write_circuit_csv_row(circuit_csv, *circuit, r, to_string(filter));
    }
  }
  write_file(out / "circuit.csv", circuit_csv.str());

  double top = 0.0;
  HeadSlot top_slot;
  for (const auto& s : report.slots) {
    if (s.mean > top) {
      top = s.mean;
      top_slot = s.slot;
    }
  }
  std::cout << fmt::format("{} pairs, {} slots; largest mean KL {:.4g} at {}; outputs in {}\n",
                           pairs.size(), report.slots.size(), top, to_string(top_slot),
                           out.string());
  return 0;
}

// ---------------------------------------------------------------------------
// pca

struct PcaOpts {
  std::string before;
  std::string after;
  int k = 3;
  std::uint64_t order_modulus = 101;
  std::vector<std::uint64_t> multiples{23, 31, 39};
  std::string out = ".";
};

int cmd_pca(const PcaOpts& o) {
  const auto before = load_checkpoint(o.before);
  const auto after = load_checkpoint(o.after);
  const auto [tb, ta] = embedding_report(before.model, after.model, o.k, o.order_modulus, o.multiples);
  fs::create_directories(o.out);
  write_with(fs::path(o.out) / "pca_before.csv", [&](std::ostream& s) { write_projection_csv(s, tb); });
  write_with(fs::path(o.out) / "pca_after.csv", [&](std::ostream& s) { write_projection_csv(s, ta); });
  auto describe = [](const EmbeddingTable& t) {
    std::string s;
    for (const double v : t.pca.explained_variance) {
      s += fmt::format(" {:.4g}", v);
    }
    return s;
  };
  std::cout << "explained variance before:" << describe(tb) << "\nexplained variance after: "
            << describe(ta) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// stats

struct StatsOpts {
  std::string operands = "reciprocal";
  std::uint64_t max_int = 1'000'000;
  std::uint64_t count = 1'000'000;
  std::uint64_t seed = 1;
  std::string field = "a";
  std::size_t bins = 40;
  std::string out;
  unsigned threads = 1;
};

int cmd_stats(const StatsOpts& o) {
  SamplerSpec spec;
  spec.operand_law = parse_operand_law(o.operands);
  spec.outcome_law = OutcomeLaw::computed;
  spec.max_int = o.max_int;
  spec.c_max = 1;
  spec.seed = o.seed;
  const Field field = parse_field(o.field);
  if (field != Field::a && field != Field::b) {
    throw UsageError("stats: --field must be a or b (operands follow the operand law)");
  }
  const auto rows = generate_instances(spec, o.count, Stream::dataset, 0, o.threads);
  const auto edges = log_spaced_edges(o.max_int, o.bins);
  const auto hist = empirical_histogram(rows, field, edges);
  std::vector<double> expected;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    expected.push_back(spec.operand_law == OperandLaw::reciprocal
                           ? reciprocal_mass(edges[i], edges[i + 1], o.max_int)
                           : static_cast<double>(edges[i + 1] - edges[i]) /
                                 static_cast<double>(o.max_int + 1));
  }
  const auto chi = chi_square_test(hist.counts, expected);
  std::cout << fmt::format("chi-square {:.3f} dof {} p {:.4f}\n", chi.statistic, chi.dof,
                           chi.p_value);

  std::map<std::uint64_t, std::uint64_t> point_counts;
  const std::vector<std::uint64_t> probes{0, 1, 10, 100, 1000, 100000};
  for (const auto p : probes) {
    point_counts[p] = 0;
  }
  for (const auto& inst : rows) {
    if (const auto it = point_counts.find(field_value(inst, field)); it != point_counts.end()) {
      ++it->second;
    }
  }
  const auto n = static_cast<double>(o.count);
  for (const auto p : probes) {
    if (p > o.max_int) {
      continue;
    }
    const double prob = spec.operand_law == OperandLaw::reciprocal
                            ? reciprocal_pmf(static_cast<std::int64_t>(p), o.max_int)
                            : 1.0 / static_cast<double>(o.max_int + 1);
    const double sigma = std::sqrt(n * prob * (1 - prob));
    const double z = sigma > 0 ? (static_cast<double>(point_counts[p]) - n * prob) / sigma : 0.0;
    std::cout << fmt::format("n = {:>6}: observed {:>8} expected {:>11.1f} z {:+.2f}\n", p,
                             point_counts[p], n * prob, z);
  }
  if (!o.out.empty()) {
    write_with(o.out, [&](std::ostream& s) {
      csv::write_row(s, {"lo", "hi", "observed", "expected"});
      for (std::size_t i = 0; i < hist.counts.size(); ++i) {
        csv::write_row(s, {std::to_string(hist.edges[i]), std::to_string(hist.edges[i + 1]),
                           std::to_string(hist.counts[i]), fmt::format("{:.3f}", n * expected[i])});
      }
    });
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modular exponentiation transformer lab"};
  app.require_subcommand(1);
  app.config_formatter(std::make_shared<CLI::ConfigINI>());
  app.set_config("--config", "", "INI file; [section] names match subcommands");

  GenOpts gen;
  auto* g = app.add_subcommand("gen", "Generate a JSONL dataset");
  add_sampler_options(g, gen.operands, gen.outcomes, gen.max_int, gen.c_max);
  g->add_option("--count", gen.count, "Rows")->capture_default_str();
  g->add_option("--seed", gen.seed)->capture_default_str();
  g->add_option("--max-rejections", gen.max_rejections)->capture_default_str();
  g->add_option("--out", gen.out)->capture_default_str();
  g->add_option("--tokenized", gen.tokenized, "Also write the tokenized binary file here");
  g->add_option("--base", gen.base, "Base for --tokenized")->capture_default_str();
  g->add_option("--threads", gen.threads)->capture_default_str();

  TrainOpts tr;
  TrainHandles th{};
  auto* t = app.add_subcommand("train", "Train a model into a run directory");
  t->add_option("--preset", tr.preset, "paper | desk (fills options not given explicitly)");
  t->add_option("--seed", tr.seed)->capture_default_str();
  auto* out_opt = t->add_option("--out", tr.out, "Run directory")->capture_default_str();
  t->add_option("--operands", tr.operands)->capture_default_str();
  t->add_option("--outcomes", tr.outcomes)->capture_default_str();
  th.max_int = t->add_option("--max-int", tr.max_int)->capture_default_str();
  th.c_max = t->add_option("--c-max", tr.c_max)->capture_default_str();
  th.epochs = t->add_option("--epochs", tr.epochs)->capture_default_str();
  th.spe = t->add_option("--samples-per-epoch", tr.samples_per_epoch)->capture_default_str();
  th.batch = t->add_option("--batch-size", tr.batch_size)->capture_default_str();
  th.lr = t->add_option("--lr", tr.lr)->capture_default_str();
  th.base = t->add_option("--base", tr.base)->capture_default_str();
  th.enc = t->add_option("--enc-layers", tr.enc_layers)->capture_default_str();
  th.dec = t->add_option("--dec-layers", tr.dec_layers)->capture_default_str();
  th.d_model = t->add_option("--d-model", tr.d_model)->capture_default_str();
  th.heads = t->add_option("--heads", tr.heads)->capture_default_str();
  th.d_ff = t->add_option("--d-ff", tr.d_ff)->capture_default_str();
  th.eval_size = t->add_option("--eval-size", tr.eval_size)->capture_default_str();
  t->add_flag("--stratified-eval", tr.stratified_eval, "Equal eval rows per modulus");
  t->add_option("--eval-every", tr.eval_every)->capture_default_str();
  th.ckpt_every = t->add_option("--checkpoint-every", tr.checkpoint_every)->capture_default_str();
  t->add_option("--threads", tr.threads)->capture_default_str();
  t->add_option("--resume", tr.resume, "Continue from this checkpoint");
  t->add_flag("--force", tr.force, "Overwrite an existing run directory");
  t->add_flag("--quiet", tr.quiet, "No per-epoch progress");

  EvalOpts ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--dataset", ev.dataset)->required();
  e->add_option("--out", ev.out, "Directory for predictions.csv and eval.json");
  e->add_option("--threads", ev.threads)->capture_default_str();

  GrokOpts gr;
  auto* gk = app.add_subcommand("grok", "Detect grokking events and modulus families");
  gk->add_option("--run", gr.run)->required();
  gk->add_option("--split", gr.split)->capture_default_str();
  gk->add_option("--threshold", gr.threshold)->capture_default_str();
  gk->add_option("--window", gr.window)->capture_default_str();
  gk->add_option("--sustain", gr.sustain)->capture_default_str();
  gk->add_option("--sync-window", gr.sync_window)->capture_default_str();
  gk->add_option("--out", gr.out, "Output directory (default: the run)");

  CensusOpts ce;
  auto* cs = app.add_subcommand("census", "Dominant misprediction table");
  cs->add_option("--run", ce.run);
  cs->add_option("--checkpoint", ce.checkpoint, "Default: latest in --run");
  cs->add_option("--dataset", ce.dataset, "Default: RUN/test.jsonl");
  cs->add_option("--min-support", ce.min_support)->capture_default_str();
  cs->add_option("--out", ce.out);
  cs->add_option("--threads", ce.threads)->capture_default_str();

  PatchOpts pa;
  auto* p = app.add_subcommand("patch", "Activation patching sweep and circuit evaluation");
  p->add_option("--checkpoint", pa.checkpoint)->required();
  p->add_option("--pairs", pa.pairs)->capture_default_str();
  p->add_option("--filter", pa.filter, "none | no-reduction")->capture_default_str();
  p->add_option("--seed", pa.seed)->capture_default_str();
  p->add_option("--operands", pa.operands, "Default: the run's operand law");
  p->add_flag("--include-encoder", pa.include_encoder);
  p->add_option("--circuit-size", pa.circuit_size)->capture_default_str();
  p->add_option("--reference-size", pa.reference_size)->capture_default_str();
  p->add_option("--out", pa.out, "Default: CHECKPOINT_DIR/patch");
  p->add_option("--threads", pa.threads)->capture_default_str();

  PcaOpts pc;
  auto* pk = app.add_subcommand("pca", "Embedding PCA before and after");
  pk->add_option("--before", pc.before)->required();
  pk->add_option("--after", pc.after)->required();
  pk->add_option("--k", pc.k)->capture_default_str();
  pk->add_option("--order-modulus", pc.order_modulus)->capture_default_str();
  pk->add_option("--multiples", pc.multiples)->delimiter(',')->capture_default_str();
  pk->add_option("--out", pc.out)->capture_default_str();

  StatsOpts st;
  auto* s = app.add_subcommand("stats", "Operand histogram against the sampling law");
  s->add_option("--operands", st.operands)->capture_default_str();
  s->add_option("--max-int", st.max_int)->capture_default_str();
  s->add_option("--count", st.count)->capture_default_str();
  s->add_option("--seed", st.seed)->capture_default_str();
  s->add_option("--field", st.field)->capture_default_str();
  s->add_option("--bins", st.bins)->capture_default_str();
  s->add_option("--out", st.out, "Histogram CSV");
  s->add_option("--threads", st.threads)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::usage);
  }

  try {
    if (*g) {
      return cmd_gen(gen);
    }
    if (*t) {
      apply_preset(tr, th);
      return cmd_train(tr, th.epochs, out_opt);
    }
    if (*e) {
      return cmd_eval(ev);
    }
    if (*gk) {
      return cmd_grok(gr);
    }
    if (*cs) {
      return cmd_census(ce);
    }
    if (*p) {
      return cmd_patch(pa);
    }
    if (*pk) {
      return cmd_pca(pc);
    }
    if (*s) {
      return cmd_stats(st);
    }
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return static_cast<int>(ExitCode::usage);
  } catch (const DivergenceError& err) {
    std::cerr << "divergence: " << err.what() << '\n';
    return static_cast<int>(ExitCode::divergence);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return static_cast<int>(ExitCode::data);
  }
  return static_cast<int>(ExitCode::usage);
}
