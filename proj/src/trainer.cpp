#include "mexp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "mexp/checkpoint.hpp"
#include "mexp/csv.hpp"
#include "mexp/dataset_io.hpp"
#include "mexp/numtheory.hpp"
#include "mexp/rng.hpp"

namespace mexp {

void TrainConfig::validate() const {
  if (epochs < 1 || samples_per_epoch < 1 || batch_size < 1 || eval_size < 1 || eval_every < 1 ||
      checkpoint_every < 1) {
    throw UsageError("train: epochs, samples_per_epoch, batch_size, eval_size, eval_every and "
                     "checkpoint_every must be >= 1");
  }
  if (static_cast<std::uint64_t>(batch_size) > samples_per_epoch) {
    throw UsageError("train: batch_size exceeds samples_per_epoch (no full batch per epoch)");
  }
  if (base < 2) {
    throw UsageError("train: base must be >= 2");
  }
  if (!std::isfinite(adam.lr) || adam.lr <= 0) {
    throw UsageError("train: learning rate must be positive and finite");
  }
  train_spec.validate();
  resolved_model().validate();
}

ModelConfig TrainConfig::resolved_model() const {
  ModelConfig m = model;
  m.vocab_size = static_cast<int>(Vocabulary(base).size());
  m.max_src_len = static_cast<int>(max_source_len(train_spec.max_int, train_spec.c_max, base));
  m.max_tgt_len = static_cast<int>(max_target_len(train_spec.c_max, base));
  return m;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"samples_per_epoch", c.samples_per_epoch},
                     {"batch_size", c.batch_size},
                     {"base", c.base},
                     {"train_spec", c.train_spec},
                     {"eval_size", c.eval_size},
                     {"stratified_eval", c.stratified_eval},
                     {"eval_every", c.eval_every},
                     {"checkpoint_every", c.checkpoint_every},
                     {"out_dir", c.out_dir.string()},
                     {"model", c.resolved_model()},
                     {"adam", c.adam}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("samples_per_epoch").get_to(c.samples_per_epoch);
  j.at("batch_size").get_to(c.batch_size);
  j.at("base").get_to(c.base);
  j.at("train_spec").get_to(c.train_spec);
  j.at("eval_size").get_to(c.eval_size);
  j.at("stratified_eval").get_to(c.stratified_eval);
  j.at("eval_every").get_to(c.eval_every);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
  c.out_dir = j.at("out_dir").get<std::string>();
  j.at("model").get_to(c.model);
  j.at("adam").get_to(c.adam);
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::valid:
      return "valid";
    case Split::test:
      return "test";
  }
  return "?";
}

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, int epoch) {
  return out_dir / fmt::format("ckpt_{}.mexp1", epoch);
}

// ---------------------------------------------------------------------------
// Evaluation sets

namespace {

ModExpInstance stratified_instance(const SamplerSpec& spec, Stream stream, std::uint64_t index) {
  CounterRng rng(spec.seed, stream, index);
  ModExpInstance inst;
  inst.c = index % spec.c_max + 1;
  if (spec.outcome_law == OutcomeLaw::computed) {
    inst.a = draw_operand(rng, spec.operand_law, spec.max_int);
    inst.b = draw_operand(rng, spec.operand_law, spec.max_int);
    inst.d = numtheory::modpow(inst.a, inst.b, inst.c);
    return inst;
  }
  inst.d = rng.uniform_int(0, inst.c - 1);
  for (std::uint64_t attempt = 0; attempt < spec.max_rejections; ++attempt) {
    inst.a = draw_operand(rng, spec.operand_law, spec.max_int);
    inst.b = draw_operand(rng, spec.operand_law, spec.max_int);
    if (numtheory::modpow(inst.a, inst.b, inst.c) == inst.d) {
      return inst;
    }
  }
  throw RejectionExhausted(inst.d, index, index);
}

std::vector<ModExpInstance> eval_set(const SamplerSpec& spec, std::uint64_t size, Stream stream,
                                     bool stratified) {
  if (!stratified) {
    return generate_instances(spec, size, stream);
  }
  spec.validate();
  std::vector<ModExpInstance> out;
  out.reserve(size);
  for (std::uint64_t i = 0; i < size; ++i) {
    out.push_back(stratified_instance(spec, stream, i));
  }
  return out;
}

}  // namespace

EvalSets build_eval_sets(const SamplerSpec& law, std::uint64_t size, bool stratified) {
  if (size < 1) {
    throw UsageError("eval sets: size must be >= 1");
  }
  SamplerSpec valid = law;
  valid.operand_law = OperandLaw::uniform;
  valid.outcome_law = OutcomeLaw::computed;
  SamplerSpec test = valid;
  test.outcome_law = OutcomeLaw::uniform;
  return {eval_set(valid, size, Stream::valid, stratified),
          eval_set(test, size, Stream::test, stratified)};
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

constexpr std::size_t kEvalBatch = 256;

struct Tokenized {
  std::vector<TokenSeq> sources;
  std::vector<TokenSeq> targets;
};

Tokenized tokenize(std::span<const ModExpInstance> rows, const Vocabulary& vocab) {
  Tokenized out;
  out.sources.reserve(rows.size());
  out.targets.reserve(rows.size());
  for (const auto& inst : rows) {
    auto [src, tgt] = encode_instance(inst, vocab);
    out.sources.push_back(std::move(src));
    out.targets.push_back(std::move(tgt));
  }
  return out;
}

// Runs fn(batch_index) for every batch on up to `threads` workers.
template <class Fn>
void for_each_batch(std::size_t batches, unsigned threads, Fn&& fn) {
  threads = std::max(1U, std::min<unsigned>(threads, static_cast<unsigned>(batches)));
  if (threads <= 1) {
    for (std::size_t k = 0; k < batches; ++k) {
      fn(k);
    }
    return;
  }
  std::vector<std::jthread> workers;
  for (unsigned t = 0; t < threads; ++t) {
    workers.emplace_back([&, t] {
      for (std::size_t k = t; k < batches; k += threads) {
        fn(k);
      }
    });
  }
}

std::vector<Prediction> predict_rows(const Model<float>& model, std::span<const ModExpInstance> rows,
                                     const Tokenized& tok, const Vocabulary& vocab,
                                     std::size_t first) {
  std::vector<std::vector<TokenId>> src;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    src.push_back(tok.sources[first + i].ids);
  }
  const TokenBatch batch = make_token_batch(src, vocab.pad());
  const auto decoded =
      greedy_decode(model, batch, model.config.max_tgt_len, vocab.plus(), vocab.eos());
  std::vector<Prediction> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.push_back({rows[i], decode_prediction(decoded[i], vocab)});
  }
  return out;
}

}  // namespace

std::vector<Prediction> predict(const Model<float>& model, std::span<const ModExpInstance> dataset,
                                const Vocabulary& vocab, unsigned threads) {
  const Tokenized tok = tokenize(dataset, vocab);
  const std::size_t batches = (dataset.size() + kEvalBatch - 1) / kEvalBatch;
  std::vector<std::vector<Prediction>> parts(batches);
  for_each_batch(batches, threads, [&](std::size_t k) {
    const std::size_t first = k * kEvalBatch;
    const std::size_t n = std::min(kEvalBatch, dataset.size() - first);
    parts[k] = predict_rows(model, dataset.subspan(first, n), tok, vocab, first);
  });
  std::vector<Prediction> out;
  out.reserve(dataset.size());
  for (auto& part : parts) {
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

EpochMetrics evaluate(const Model<float>& model, std::span<const ModExpInstance> dataset,
                      const Vocabulary& vocab, unsigned threads,
                      std::vector<Prediction>* predictions) {
  if (dataset.empty()) {
    throw DataError("evaluate: empty dataset");
  }
  const Tokenized tok = tokenize(dataset, vocab);
  const std::size_t batches = (dataset.size() + kEvalBatch - 1) / kEvalBatch;
  std::vector<LossSum> losses(batches);
  std::vector<std::vector<Prediction>> parts(batches);
  for_each_batch(batches, threads, [&](std::size_t k) {
    const std::size_t first = k * kEvalBatch;
    const std::size_t n = std::min(kEvalBatch, dataset.size() - first);
    const auto sb = make_supervised_batch(std::span(tok.sources).subspan(first, n),
                                          std::span(tok.targets).subspan(first, n), vocab);
    losses[k] = evaluate_loss(model, sb);
    parts[k] = predict_rows(model, dataset.subspan(first, n), tok, vocab, first);
  });

  EpochMetrics m;
  double loss = 0.0;
  std::size_t tokens = 0;
  std::uint64_t correct = 0;
  for (std::size_t k = 0; k < batches; ++k) {
    loss += losses[k].sum;
    tokens += losses[k].tokens;
    for (const auto& p : parts[k]) {
      auto& tally = m.per_modulus[p.instance.c];
      ++tally.total;
      if (p.correct()) {
        ++tally.correct;
        ++correct;
      }
    }
  }
  m.loss = loss / static_cast<double>(tokens);
  m.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
  if (predictions != nullptr) {
    predictions->clear();
    for (auto& part : parts) {
      predictions->insert(predictions->end(), part.begin(), part.end());
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

const std::vector<std::string> kMetricsHeader = {"epoch", "split", "loss", "accuracy"};
const std::vector<std::string> kPerModulusHeader = {"epoch", "split", "modulus", "correct", "total"};

std::string format_real(double x) { return fmt::format("{:.6f}", x); }

// Keeps the header and every row whose first column is <= epoch.
void truncate_after(const std::filesystem::path& path, int epoch) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("resume: missing " + path.string());
  }
  std::string kept;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (!header) {
      const auto comma = line.find(',');
      if (comma == std::string::npos || std::stoi(line.substr(0, comma)) > epoch) {
        continue;
      }
    }
    header = false;
    kept += line;
    kept += '\n';
  }
  in.close();
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  out << kept;
  if (!out) {
    throw DataError("resume: cannot rewrite " + path.string());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  out << text;
  if (!out) {
    throw DataError("train: cannot write " + path.string());
  }
}

std::vector<std::uint32_t> shuffled_order(std::uint64_t n, std::uint64_t seed, int epoch) {
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0U);
  CounterRng rng(seed, Stream::shuffle, static_cast<std::uint64_t>(epoch));
  for (std::uint64_t i = n; i > 1; --i) {
    const std::uint64_t j = rng.uniform_int(0, i - 1);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::optional<std::filesystem::path>& resume_from,
                  const EpochCallback& on_epoch) {
  config.validate();
  const Vocabulary vocab(config.base);
  const ModelConfig model_config = config.resolved_model();
  const auto& dir = config.out_dir;
  std::filesystem::create_directories(dir);

  Model<float> model;
  AdamState<float> opt;
  int start_epoch = 1;
  if (resume_from) {
    auto ck = load_checkpoint(*resume_from);
    if (!(ck.model.config == model_config)) {
      throw UsageError("resume: checkpoint model config differs from the run config");
    }
    if (!ck.has_optimizer) {
      throw DataError("resume: checkpoint has no optimizer state: " + resume_from->string());
    }
    model = std::move(ck.model);
    opt = std::move(ck.optimizer);
    opt.hyper = config.adam;
    start_epoch = static_cast<int>(ck.meta.epoch) + 1;
    truncate_after(dir / "metrics.csv", start_epoch - 1);
    truncate_after(dir / "per_modulus.csv", start_epoch - 1);
  } else {
    model = init_model<float>(model_config);
    opt = make_adam(model, config.adam);
    write_text(dir / "config.json", nlohmann::json(config).dump(2) + "\n");
    std::ostringstream metrics;
    csv::write_row(metrics, kMetricsHeader);
    write_text(dir / "metrics.csv", metrics.str());
    std::ostringstream per;
    csv::write_row(per, kPerModulusHeader);
    write_text(dir / "per_modulus.csv", per.str());
  }

  const EvalSets eval = build_eval_sets(config.train_spec, config.eval_size, config.stratified_eval);
  write_dataset(dir / "valid.jsonl", eval.valid);
  write_dataset(dir / "test.jsonl", eval.test);

  std::ofstream metrics_out(dir / "metrics.csv", std::ios::app | std::ios::binary);
  std::ofstream per_out(dir / "per_modulus.csv", std::ios::app | std::ios::binary);
  if (!metrics_out || !per_out) {
    throw DataError("train: cannot open metric files in " + dir.string());
  }

  const std::uint64_t spe = config.samples_per_epoch;
  const auto bs = static_cast<std::uint64_t>(config.batch_size);
  const std::uint64_t batches = spe / bs;
  int last_checkpoint = start_epoch - 1;

  TrainResult result;
  for (int epoch = start_epoch; epoch <= config.epochs; ++epoch) {
    const auto rows = generate_instances(config.train_spec, spe, Stream::train,
                                         static_cast<std::uint64_t>(epoch - 1) * spe,
                                         config.threads);
    const Tokenized tok = tokenize(rows, vocab);
    const auto order = shuffled_order(spe, config.train_spec.seed, epoch);

    double loss_sum = 0.0;
    std::size_t token_sum = 0;
    std::size_t exact = 0;
    std::vector<TokenSeq> src(bs);
    std::vector<TokenSeq> tgt(bs);
    for (std::uint64_t k = 0; k < batches; ++k) {
      for (std::uint64_t i = 0; i < bs; ++i) {
        src[i] = tok.sources[order[k * bs + i]];
        tgt[i] = tok.targets[order[k * bs + i]];
      }
      const auto batch = make_supervised_batch(src, tgt, vocab);
      LossAndGrads<float> lg;
      try {
        lg = loss_and_grads(model, batch, config.threads);
      } catch (const DivergenceError&) {
        throw DivergenceError(fmt::format(
            "epoch {} batch {}: loss is not finite; last checkpoint retained: {}", epoch, k,
            last_checkpoint > 0 ? checkpoint_path(dir, last_checkpoint).string() : "none"));
      }
      loss_sum += static_cast<double>(lg.loss) * static_cast<double>(lg.tokens);
      token_sum += lg.tokens;
      exact += lg.exact;
      adam_step(model, lg.grads, opt);
    }

    std::vector<EpochMetrics> rows_out;
    EpochMetrics train_row;
    train_row.epoch = epoch;
    train_row.split = Split::train;
    train_row.loss = loss_sum / static_cast<double>(token_sum);
    train_row.accuracy = static_cast<double>(exact) / static_cast<double>(batches * bs);
    rows_out.push_back(train_row);
    if (epoch % config.eval_every == 0 || epoch == config.epochs) {
      for (const auto& [split, data] : {std::pair{Split::valid, &eval.valid},
                                        std::pair{Split::test, &eval.test}}) {
        EpochMetrics m = evaluate(model, *data, vocab, config.threads);
        m.epoch = epoch;
        m.split = split;
        rows_out.push_back(std::move(m));
      }
    }

    for (const auto& m : rows_out) {
      csv::write_row(metrics_out, {std::to_string(m.epoch), to_string(m.split),
                                   format_real(m.loss), format_real(m.accuracy)});
      for (const auto& [c, tally] : m.per_modulus) {
        csv::write_row(per_out, {std::to_string(m.epoch), to_string(m.split), std::to_string(c),
                                 std::to_string(tally.correct), std::to_string(tally.total)});
      }
    }
    metrics_out.flush();
    per_out.flush();
    if (!metrics_out || !per_out) {
      throw DataError(fmt::format("epoch {}: failed writing metric files in {}", epoch, dir.string()));
    }

    if (epoch % config.checkpoint_every == 0 || epoch == config.epochs) {
      CheckpointMeta meta;
      meta.epoch = static_cast<std::uint64_t>(epoch);
      meta.run = {{"train", config},
                  {"rng",
                   {{"seed", config.train_spec.seed},
                    {"train_stream_next_index", static_cast<std::uint64_t>(epoch) * spe},
                    {"shuffle_next_epoch", epoch + 1}}}};
      try {
        save_checkpoint(checkpoint_path(dir, epoch), model, &opt, meta);
      } catch (const std::exception& e) {
        throw DataError(fmt::format("epoch {}: {}", epoch, e.what()));
      }
      last_checkpoint = epoch;
    }

    if (on_epoch) {
      on_epoch(rows_out);
    }
    result.history.insert(result.history.end(), rows_out.begin(), rows_out.end());
    result.last_epoch = epoch;
  }
  return result;
}

}  // namespace mexp
