#include "mexp/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <thread>

#include <Eigen/Eigenvalues>
#include <fmt/format.h>

#include "mexp/csv.hpp"
#include "mexp/rng.hpp"

namespace mexp {

std::string to_string(PairFilter filter) {
  return filter == PairFilter::none ? "none" : "no-reduction";
}

PairFilter parse_pair_filter(const std::string& text) {
  if (text == "none") {
    return PairFilter::none;
  }
  if (text == "no-reduction" || text == "no_reduction") {
    return PairFilter::no_reduction;
  }
  throw UsageError("unknown pair filter '" + text + "' (expected none or no-reduction)");
}

std::string to_string(AblationMode mode) { return mode == AblationMode::mean ? "mean" : "zero"; }

AblationMode parse_ablation_mode(const std::string& text) {
  if (text == "mean") {
    return AblationMode::mean;
  }
  if (text == "zero") {
    return AblationMode::zero;
  }
  throw UsageError("unknown ablation mode '" + text + "' (expected mean or zero)");
}

bool no_reduction(const ModExpInstance& inst) {
  if (inst.b == 0) {
    return 1 < inst.c;
  }
  if (inst.a <= 1) {
    return inst.a < inst.c;
  }
  std::uint64_t power = 1;
  for (std::uint64_t k = 0; k < inst.b; ++k) {
    power *= inst.a;
    if (power >= inst.c) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Prompt pairs

std::vector<PromptPair> build_prompt_pairs(const SamplerSpec& spec, std::size_t n,
                                           PairFilter filter, std::uint32_t base) {
  if (n < 1) {
    throw UsageError("prompt pairs: n must be >= 1");
  }
  spec.validate();
  auto passes = [filter](const ModExpInstance& inst) {
    return filter == PairFilter::none || no_reduction(inst);
  };
  std::vector<PromptPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(spec.seed, Stream::pairs, i);
    PromptPair pair;
    bool found = false;
    for (std::uint64_t attempt = 0; attempt < spec.max_rejections && !found; ++attempt) {
      pair.clean = draw_instance(spec, rng);
      found = passes(pair.clean);
    }
    if (!found) {
      throw RejectionExhausted(0, i, out.size());
    }
    const auto& clean = pair.clean;
    const auto a_digits = digit_count(clean.a, base);
    const auto b_digits = digit_count(clean.b, base);
    found = false;
    for (std::uint64_t attempt = 0; attempt < spec.max_rejections && !found; ++attempt) {
      ModExpInstance cf;
      cf.a = draw_operand(rng, spec.operand_law, spec.max_int);
      cf.b = draw_operand(rng, spec.operand_law, spec.max_int);
      cf.c = clean.c;
      cf.d = numtheory::modpow(cf.a, cf.b, cf.c);
      found = digit_count(cf.a, base) == a_digits && digit_count(cf.b, base) == b_digits &&
              (cf.a != clean.a || cf.b != clean.b) && passes(cf);
      if (found) {
        pair.counterfactual = cf;
      }
    }
    if (!found) {
      throw RejectionExhausted(clean.d, i, out.size());
    }
    out.push_back(pair);
  }
  return out;
}

double kl_divergence(std::span<const double> p_logits, std::span<const double> q_logits) {
  if (p_logits.size() != q_logits.size() || p_logits.empty()) {
    throw DataError("kl_divergence: logit vectors must be nonempty and of equal length");
  }
  auto log_normalizer = [](std::span<const double> x) {
    double best = -std::numeric_limits<double>::infinity();
    for (const double v : x) {
      if (!std::isfinite(v)) {
        throw DataError("kl_divergence: non-finite logit");
      }
      best = std::max(best, v);
    }
    double total = 0.0;
    for (const double v : x) {
      total += std::exp(v - best);
    }
    return best + std::log(total);
  };
  const double zp = log_normalizer(p_logits);
  const double zq = log_normalizer(q_logits);
  double kl = 0.0;
  for (std::size_t i = 0; i < p_logits.size(); ++i) {
    const double log_p = p_logits[i] - zp;
    const double log_q = q_logits[i] - zq;
    kl += std::exp(log_p) * (log_p - log_q);
  }
  return std::max(kl, 0.0);
}

// ---------------------------------------------------------------------------
// Patching

namespace {

struct PairBatches {
  TokenBatch clean_src;
  TokenBatch cf_src;
  TokenBatch tgt_in;
  std::vector<TokenId> labels;
};

PairBatches make_pair_batches(std::span<const PromptPair> pairs, const Vocabulary& vocab) {
  if (pairs.empty()) {
    throw DataError("patching: no prompt pairs");
  }
  std::vector<TokenSeq> clean_src;
  std::vector<TokenSeq> cf_src;
  std::vector<TokenSeq> targets;
  for (const auto& p : pairs) {
    auto [cs, ct] = encode_instance(p.clean, vocab);
    auto [fs, ft] = encode_instance(p.counterfactual, vocab);
    if (cs.ids.size() != fs.ids.size()) {
      throw DataError("patching: clean and counterfactual sources differ in length");
    }
    clean_src.push_back(std::move(cs));
    cf_src.push_back(std::move(fs));
    targets.push_back(std::move(ct));
  }
  auto clean = make_supervised_batch(clean_src, targets, vocab);
  auto cf = make_supervised_batch(cf_src, targets, vocab);
  return {std::move(clean.src), std::move(cf.src), std::move(clean.tgt_in), std::move(clean.labels)};
}

// Per pair: mean KL(ref || other) over answer-digit label positions.
std::vector<double> pair_kl(const Matrix<double>& ref, const Matrix<double>& other,
                            const PairBatches& pb, const Vocabulary& vocab) {
  const auto v = static_cast<std::size_t>(ref.cols());
  const int len = pb.tgt_in.len;
  std::vector<double> out;
  for (int b = 0; b < pb.tgt_in.batch; ++b) {
    double sum = 0.0;
    int count = 0;
    for (int t = 0; t < len; ++t) {
      const auto r = static_cast<std::size_t>(b * len + t);
      if (!vocab.is_digit(pb.labels[r])) {
        continue;
      }
      sum += kl_divergence(std::span(ref.data() + r * v, v), std::span(other.data() + r * v, v));
      ++count;
    }
    out.push_back(count > 0 ? sum / count : 0.0);
  }
  return out;
}

}  // namespace

PatchReport patch_sweep(const Model<double>& model, std::span<const PromptPair> pairs,
                        const Vocabulary& vocab, bool include_encoder,
                        const std::string& subset_filter) {
  const PairBatches pb = make_pair_batches(pairs, vocab);
  ActivationTrace<double> cf_trace;
  forward<double>(model, pb.cf_src, pb.tgt_in, nullptr, &cf_trace);
  const Matrix<double> clean = forward<double>(model, pb.clean_src, pb.tgt_in);

  PatchReport report;
  report.pair_count = pairs.size();
  report.subset_filter = subset_filter;
  for (const auto& slot : head_slots(model.config, include_encoder)) {
    const HeadOverrides<double> overrides{{slot, cf_trace.heads.at(slot)}};
    const Matrix<double> patched = forward<double>(model, pb.clean_src, pb.tgt_in, &overrides);
    SlotKl s;
    s.slot = slot;
    s.per_pair = pair_kl(clean, patched, pb, vocab);
    const auto n = static_cast<double>(s.per_pair.size());
    for (const double x : s.per_pair) {
      s.mean += x / n;
    }
    if (s.per_pair.size() > 1) {
      double ss = 0.0;
      for (const double x : s.per_pair) {
        ss += (x - s.mean) * (x - s.mean);
      }
      s.std = std::sqrt(ss / (n - 1));
    }
    report.slots.push_back(std::move(s));
  }
  return report;
}

PatchIdentities patch_identities(const Model<double>& model, std::span<const PromptPair> pairs,
                                 const Vocabulary& vocab, bool include_encoder) {
  const PairBatches pb = make_pair_batches(pairs, vocab);
  ActivationTrace<double> clean_trace;
  ActivationTrace<double> cf_trace;
  const Matrix<double> clean = forward<double>(model, pb.clean_src, pb.tgt_in, nullptr, &clean_trace);
  const Matrix<double> cf = forward<double>(model, pb.cf_src, pb.tgt_in, nullptr, &cf_trace);

  PatchIdentities out;
  HeadOverrides<double> all_cf;
  for (const auto& slot : head_slots(model.config, include_encoder)) {
    const HeadOverrides<double> self{{slot, clean_trace.heads.at(slot)}};
    const Matrix<double> patched = forward<double>(model, pb.clean_src, pb.tgt_in, &self);
    for (const double kl : pair_kl(clean, patched, pb, vocab)) {
      out.max_self_kl = std::max(out.max_self_kl, kl);
    }
    all_cf.emplace(slot, cf_trace.heads.at(slot));
  }
  const Matrix<double> substituted = forward<double>(model, pb.clean_src, pb.tgt_in, &all_cf);
  for (const double kl : pair_kl(cf, substituted, pb, vocab)) {
    out.full_substitution_kl = std::max(out.full_substitution_kl, kl);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Circuits

CircuitSpec final_layer_circuit(const ModelConfig& config, AblationMode mode, bool include_encoder) {
  CircuitSpec spec;
  spec.mode = mode;
  spec.include_encoder = include_encoder;
  for (const auto& slot : head_slots(config, include_encoder)) {
    const int last = slot.side == Side::encoder ? config.n_layers_enc - 1 : config.n_layers_dec - 1;
    if (slot.layer == last) {
      spec.active_heads.insert(slot);
    }
  }
  spec.description = include_encoder ? "final-layer heads (encoder and decoder)"
                                     : "final decoder layer heads";
  return spec;
}

namespace {

constexpr std::size_t kCircuitBatch = 256;

// Position-wise mean of each slot's head output over the reference rows.
std::map<HeadSlot, Matrix<float>> reference_means(const Model<float>& model,
                                                  const std::vector<HeadSlot>& slots,
                                                  std::span<const ModExpInstance> reference,
                                                  const Vocabulary& vocab) {
  const auto& cfg = model.config;
  const int dh = cfg.head_dim();
  std::map<HeadSlot, Matrix<double>> sums;
  std::vector<double> src_counts(static_cast<std::size_t>(cfg.max_src_len), 0.0);
  std::vector<double> tgt_counts(static_cast<std::size_t>(cfg.max_tgt_len), 0.0);
  for (const auto& slot : slots) {
    const int rows = slot.side == Side::encoder ? cfg.max_src_len : cfg.max_tgt_len;
    sums[slot] = Matrix<double>::Zero(rows, dh);
  }
  for (std::size_t first = 0; first < reference.size(); first += kCircuitBatch) {
    const std::size_t n = std::min(kCircuitBatch, reference.size() - first);
    std::vector<TokenSeq> src;
    std::vector<TokenSeq> tgt;
    for (std::size_t i = 0; i < n; ++i) {
      auto [s, t] = encode_instance(reference[first + i], vocab);
      src.push_back(std::move(s));
      tgt.push_back(std::move(t));
    }
    const auto sb = make_supervised_batch(src, tgt, vocab);
    ActivationTrace<float> trace;
    forward<float>(model, sb.src, sb.tgt_in, nullptr, &trace);
    for (int b = 0; b < sb.batch(); ++b) {
      for (int t = 0; t < sb.src.lengths[static_cast<std::size_t>(b)]; ++t) {
        src_counts[static_cast<std::size_t>(t)] += 1.0;
      }
      for (int t = 0; t < sb.tgt_in.lengths[static_cast<std::size_t>(b)]; ++t) {
        tgt_counts[static_cast<std::size_t>(t)] += 1.0;
      }
    }
    for (const auto& slot : slots) {
      const auto& tb = slot.side == Side::encoder ? sb.src : sb.tgt_in;
      const auto& h = trace.heads.at(slot);
      auto& sum = sums[slot];
      for (int b = 0; b < tb.batch; ++b) {
        for (int t = 0; t < tb.lengths[static_cast<std::size_t>(b)]; ++t) {
          sum.row(t) += h.row(b * tb.len + t).cast<double>();
        }
      }
    }
  }
  std::map<HeadSlot, Matrix<float>> means;
  for (auto& [slot, sum] : sums) {
    const auto& counts = slot.side == Side::encoder ? src_counts : tgt_counts;
    for (Eigen::Index t = 0; t < sum.rows(); ++t) {
      if (counts[static_cast<std::size_t>(t)] > 0) {
        sum.row(t) /= counts[static_cast<std::size_t>(t)];
      }
    }
    means[slot] = sum.cast<float>();
  }
  return means;
}

double greedy_accuracy(const Model<float>& model, std::span<const ModExpInstance> dataset,
                       const Vocabulary& vocab, const OverrideBuilder<float>* builder,
                       unsigned threads) {
  const std::size_t batches = (dataset.size() + kCircuitBatch - 1) / kCircuitBatch;
  std::vector<std::size_t> correct(batches, 0);
  auto run = [&](std::size_t k) {
    const std::size_t first = k * kCircuitBatch;
    const std::size_t n = std::min(kCircuitBatch, dataset.size() - first);
    std::vector<std::vector<TokenId>> src;
    for (std::size_t i = 0; i < n; ++i) {
      src.push_back(encode_instance(dataset[first + i], vocab).first.ids);
    }
    const auto batch = make_token_batch(src, vocab.pad());
    const auto out =
        greedy_decode(model, batch, model.config.max_tgt_len, vocab.plus(), vocab.eos(), builder);
    for (std::size_t i = 0; i < n; ++i) {
      const auto pred = decode_prediction(out[i], vocab);
      if (pred && *pred == dataset[first + i].d) {
        ++correct[k];
      }
    }
  };
  threads = std::max(1U, std::min<unsigned>(threads, static_cast<unsigned>(batches)));
  if (threads == 1) {
    for (std::size_t k = 0; k < batches; ++k) {
      run(k);
    }
  } else {
    std::vector<std::jthread> workers;
    for (unsigned t = 0; t < threads; ++t) {
      workers.emplace_back([&, t] {
        for (std::size_t k = t; k < batches; k += threads) {
          run(k);
        }
      });
    }
  }
  std::size_t total = 0;
  for (const auto c : correct) {
    total += c;
  }
  return static_cast<double>(total) / static_cast<double>(dataset.size());
}

}  // namespace

CircuitResult circuit_eval(const Model<float>& model, const CircuitSpec& circuit,
                           std::span<const ModExpInstance> dataset,
                           std::span<const ModExpInstance> reference, const Vocabulary& vocab,
                           unsigned threads) {
  if (dataset.empty()) {
    throw DataError("circuit_eval: empty dataset");
  }
  const auto& cfg = model.config;
  for (const auto& slot : circuit.active_heads) {
    if (!slot_in_range(cfg, slot)) {
      throw UsageError("circuit_eval: slot " + to_string(slot) + " is not a head of this model");
    }
  }
  std::vector<HeadSlot> ablated;
  for (const auto& slot : head_slots(cfg, circuit.include_encoder)) {
    if (!circuit.active_heads.contains(slot)) {
      ablated.push_back(slot);
    }
  }

  CircuitResult result;
  result.rows = dataset.size();
  result.full_accuracy = greedy_accuracy(model, dataset, vocab, nullptr, threads);
  if (ablated.empty()) {
    result.circuit_accuracy = result.full_accuracy;
    return result;
  }

  std::map<HeadSlot, Matrix<float>> fill;
  if (circuit.mode == AblationMode::mean) {
    if (reference.empty()) {
      throw DataError("circuit_eval: mean ablation needs a nonempty reference batch");
    }
    fill = reference_means(model, ablated, reference, vocab);
  } else {
    for (const auto& slot : ablated) {
      const int rows = slot.side == Side::encoder ? cfg.max_src_len : cfg.max_tgt_len;
      fill[slot] = Matrix<float>::Zero(rows, cfg.head_dim());
    }
  }
  const OverrideBuilder<float> builder = [&fill](const TokenBatch& src, int decoder_len) {
    HeadOverrides<float> out;
    for (const auto& [slot, per_position] : fill) {
      const int len = slot.side == Side::encoder ? src.len : decoder_len;
      Matrix<float> m(static_cast<Eigen::Index>(src.batch) * len, per_position.cols());
      for (int b = 0; b < src.batch; ++b) {
        for (int t = 0; t < len; ++t) {
          m.row(static_cast<Eigen::Index>(b) * len + t) = per_position.row(t);
        }
      }
      out.emplace(slot, std::move(m));
    }
    return out;
  };
  result.circuit_accuracy = greedy_accuracy(model, dataset, vocab, &builder, threads);
  return result;
}

// ---------------------------------------------------------------------------
// PCA

PcaResult pca(const Eigen::MatrixXd& rows, int k) {
  if (rows.rows() < 2) {
    throw UsageError("pca: need at least 2 vectors");
  }
  if (k < 1 || k > rows.cols()) {
    throw UsageError(fmt::format("pca: k = {} outside [1, {}]", k, rows.cols()));
  }
  PcaResult out;
  out.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centered = rows.rowwise() - out.mean.transpose();
  const Eigen::MatrixXd cov =
      (centered.transpose() * centered) / static_cast<double>(rows.rows() - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw DataError("pca: eigendecomposition failed");
  }
  const auto dim = rows.cols();
  out.components.resize(k, dim);
  for (int i = 0; i < k; ++i) {
    const auto col = dim - 1 - i;  // eigenvalues come in ascending order
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) {
      v = -v;
    }
    out.components.row(i) = v.transpose();
    out.explained_variance.push_back(std::max(0.0, solver.eigenvalues()(col)));
  }
  out.projections = centered * out.components.transpose();
  return out;
}

EmbeddingTable embedding_projection(const Model<float>& model, int k, std::uint64_t order_modulus,
                                    std::span<const std::uint64_t> multiple_primes) {
  const int base = model.config.vocab_size - 4;
  if (base <= 100) {
    throw UsageError(fmt::format(
        "embedding report: base {} does not give single tokens for the values 1..100", base));
  }
  EmbeddingTable table;
  Eigen::MatrixXd rows(100, model.config.d_model);
  for (std::uint64_t v = 1; v <= 100; ++v) {
    table.values.push_back(v);
    rows.row(static_cast<Eigen::Index>(v - 1)) =
        model.params.token_embedding.row(static_cast<Eigen::Index>(v)).cast<double>();
  }
  table.pca = pca(rows, k);
  table.labels = numtheory::build_label_table(table.values, order_modulus, multiple_primes);
  return table;
}

std::pair<EmbeddingTable, EmbeddingTable> embedding_report(
    const Model<float>& before, const Model<float>& after, int k, std::uint64_t order_modulus,
    std::span<const std::uint64_t> multiple_primes) {
  if (!(before.config == after.config)) {
    throw UsageError("embedding report: checkpoints have different model configs");
  }
  return {embedding_projection(before, k, order_modulus, multiple_primes),
          embedding_projection(after, k, order_modulus, multiple_primes)};
}

// ---------------------------------------------------------------------------
// Writers

void write_kl_map_csv(std::ostream& out, const PatchReport& report) {
  csv::write_row(out, {"side", "layer", "kind", "head", "mean_kl", "std_kl"});
  for (const auto& s : report.slots) {
    csv::write_row(out, {to_string(s.slot.side), std::to_string(s.slot.layer),
                         to_string(s.slot.kind), std::to_string(s.slot.head),
                         fmt::format("{:.9g}", s.mean), fmt::format("{:.9g}", s.std)});
  }
}

void write_kl_pairs_csv(std::ostream& out, const PatchReport& report) {
  csv::write_row(out, {"pair", "side", "layer", "kind", "head", "kl"});
  for (const auto& s : report.slots) {
    for (std::size_t i = 0; i < s.per_pair.size(); ++i) {
      csv::write_row(out, {std::to_string(i), to_string(s.slot.side), std::to_string(s.slot.layer),
                           to_string(s.slot.kind), std::to_string(s.slot.head),
                           fmt::format("{:.9g}", s.per_pair[i])});
    }
  }
}

void write_circuit_csv_header(std::ostream& out) {
  csv::write_row(out, {"circuit", "ablation", "active_heads", "circuit_acc", "full_acc", "subset",
                       "rows"});
}

void write_circuit_csv_row(std::ostream& out, const CircuitSpec& circuit,
                           const CircuitResult& result, const std::string& subset) {
  csv::write_row(out, {circuit.description, to_string(circuit.mode),
                       std::to_string(circuit.active_heads.size()),
                       fmt::format("{:.6f}", result.circuit_accuracy),
                       fmt::format("{:.6f}", result.full_accuracy), subset,
                       std::to_string(result.rows)});
}

void write_projection_csv(std::ostream& out, const EmbeddingTable& table) {
  std::vector<std::string> header{"value"};
  const auto k = table.pca.projections.cols();
  for (Eigen::Index i = 0; i < k; ++i) {
    header.push_back(fmt::format("pc{}", i + 1));
  }
  const auto& label_cols = numtheory::label_columns();
  header.insert(header.end(), label_cols.begin() + 1, label_cols.end());
  csv::write_row(out, header);
  for (std::size_t r = 0; r < table.values.size(); ++r) {
    std::vector<std::string> row{std::to_string(table.values[r])};
    for (Eigen::Index i = 0; i < k; ++i) {
      row.push_back(fmt::format("{:.9g}", table.pca.projections(static_cast<Eigen::Index>(r), i)));
    }
    const auto cells = numtheory::label_cells(table.labels[r]);
    row.insert(row.end(), cells.begin() + 1, cells.end());
    csv::write_row(out, row);
  }
}

void write_kl_heatmap_svg(std::ostream& out, const PatchReport& report, const ModelConfig& config) {
  constexpr int cell = 36;
  constexpr int left = 150;
  constexpr int top = 40;
  std::vector<std::tuple<Side, int, AttentionKind>> groups;
  double max_kl = 0.0;
  for (const auto& s : report.slots) {
    const auto g = std::tuple{s.slot.side, s.slot.layer, s.slot.kind};
    if (groups.empty() || groups.back() != g) {
      groups.push_back(g);
    }
    max_kl = std::max(max_kl, s.mean);
  }
  const int width = left + cell * config.n_heads + 20;
  const int height = top + cell * static_cast<int>(groups.size()) + 30;
  out << fmt::format(R"svg(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">)svg",
                     width, height)
      << '\n';
  out << fmt::format(R"svg(<text x="10" y="20" font-size="14">mean KL per head (max {:.4g} nats)</text>)svg",
                     max_kl)
      << '\n';
  for (int h = 0; h < config.n_heads; ++h) {
    out << fmt::format(R"svg(<text x="{}" y="{}" text-anchor="middle">h{}</text>)svg",
                       left + cell * h + cell / 2, top - 4, h)
        << '\n';
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& [side, layer, kind] = groups[g];
    const int y = top + cell * static_cast<int>(g);
    out << fmt::format(R"svg(<text x="{}" y="{}" text-anchor="end">{} L{} {}</text>)svg", left - 6,
                       y + cell / 2 + 4, to_string(side), layer, to_string(kind))
        << '\n';
  }
  for (const auto& s : report.slots) {
    const auto g = static_cast<int>(
        std::find(groups.begin(), groups.end(), std::tuple{s.slot.side, s.slot.layer, s.slot.kind}) -
        groups.begin());
    const double shade = max_kl > 0 ? s.mean / max_kl : 0.0;
    const int level = static_cast<int>(std::lround(255.0 * (1.0 - shade)));
    out << fmt::format(R"svg(<rect x="{}" y="{}" width="{}" height="{}" fill="rgb(255,{},{})" stroke="#ccc"><title>{}: {:.4g}</title></rect>)svg",
                       left + cell * s.slot.head, top + cell * g, cell, cell, level, level,
                       to_string(s.slot), s.mean)
        << '\n';
  }
  out << "</svg>\n";
}

}  // namespace mexp
