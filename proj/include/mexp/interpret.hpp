#pragma once

#include <cstdint>
#include <iosfwd>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mexp/codec.hpp"
#include "mexp/model.hpp"
#include "mexp/numtheory.hpp"
#include "mexp/sampler.hpp"

// Activation patching, circuit evaluation and embedding PCA.
namespace mexp {

enum class PairFilter { none, no_reduction };
std::string to_string(PairFilter filter);
PairFilter parse_pair_filter(const std::string& text);

/// True when a^b < c, i.e. the reduction is the identity and d = a^b.
bool no_reduction(const ModExpInstance& inst);

struct PromptPair {
  ModExpInstance clean;
  ModExpInstance counterfactual;
};

/// Pair i draws from (spec.seed, Stream::pairs, i). The counterfactual keeps
/// c, resamples (a, b) under the same operand law with the same digit counts
/// in `base`, differs from the clean operands, and passes the same filter.
/// Throws RejectionExhausted after spec.max_rejections attempts.
std::vector<PromptPair> build_prompt_pairs(const SamplerSpec& spec, std::size_t n,
                                           PairFilter filter, std::uint32_t base);

/// KL(softmax(p) || softmax(q)) in nats. Throws DataError on a length
/// mismatch, empty input or non-finite logits.
double kl_divergence(std::span<const double> p_logits, std::span<const double> q_logits);

struct SlotKl {
  HeadSlot slot;
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> per_pair;
};

struct PatchReport {
  std::vector<SlotKl> slots;  // head_slots() order
  std::size_t pair_count = 0;
  std::string subset_filter;
};

/// Teacher-forced clean, counterfactual and patched runs share the clean
/// decoder input. Per pair, KL(clean || patched) is averaged over the
/// positions whose label is an answer digit.
PatchReport patch_sweep(const Model<double>& model, std::span<const PromptPair> pairs,
                        const Vocabulary& vocab, bool include_encoder = false,
                        const std::string& subset_filter = "none");

struct PatchIdentities {
  double max_self_kl = 0.0;          // every slot patched with its own clean values
  double full_substitution_kl = 0.0;  // all slots from the counterfactual vs counterfactual run
};

PatchIdentities patch_identities(const Model<double>& model, std::span<const PromptPair> pairs,
                                 const Vocabulary& vocab, bool include_encoder = false);

enum class AblationMode { mean, zero };
std::string to_string(AblationMode mode);
AblationMode parse_ablation_mode(const std::string& text);

struct CircuitSpec {
  std::set<HeadSlot> active_heads;
  AblationMode mode = AblationMode::mean;
  /// Ablation universe: decoder slots, plus encoder slots when set.
  bool include_encoder = false;
  std::string description;
};

/// Decoder (and optionally encoder) slots of the final layer on each side.
CircuitSpec final_layer_circuit(const ModelConfig& config, AblationMode mode,
                                bool include_encoder = false);

struct CircuitResult {
  double circuit_accuracy = 0.0;
  double full_accuracy = 0.0;
  std::size_t rows = 0;
};

/// Greedy-decode accuracy with every slot of the universe outside the
/// circuit replaced by its position-wise mean over `reference` (mean mode,
/// teacher-forced on the reference targets) or by zeros.
CircuitResult circuit_eval(const Model<float>& model, const CircuitSpec& circuit,
                           std::span<const ModExpInstance> dataset,
                           std::span<const ModExpInstance> reference, const Vocabulary& vocab,
                           unsigned threads = 1);

struct PcaResult {
  Eigen::MatrixXd components;  // k x dim, orthonormal rows
  std::vector<double> explained_variance;
  Eigen::MatrixXd projections;  // n x k
  Eigen::VectorXd mean;
};

/// Mean-centred PCA from the full symmetric eigendecomposition of the n-1
/// sample covariance. Each component's largest-magnitude coordinate is
/// positive. Throws UsageError when k > dim, k < 1 or fewer than 2 rows.
PcaResult pca(const Eigen::MatrixXd& rows, int k);

struct EmbeddingTable {
  std::vector<std::uint64_t> values;
  PcaResult pca;
  std::vector<numtheory::PropertyLabels> labels;
};

/// PCA over the embedding rows of the single-token values 1..100.
/// Throws UsageError when base <= 100.
EmbeddingTable embedding_projection(const Model<float>& model, int k,
                                    std::uint64_t order_modulus,
                                    std::span<const std::uint64_t> multiple_primes);

/// Before/after tables; throws UsageError when the model configs differ.
std::pair<EmbeddingTable, EmbeddingTable> embedding_report(
    const Model<float>& before, const Model<float>& after, int k, std::uint64_t order_modulus,
    std::span<const std::uint64_t> multiple_primes);

void write_kl_map_csv(std::ostream& out, const PatchReport& report);
void write_kl_pairs_csv(std::ostream& out, const PatchReport& report);
void write_circuit_csv_header(std::ostream& out);
void write_circuit_csv_row(std::ostream& out, const CircuitSpec& circuit,
                           const CircuitResult& result, const std::string& subset);
void write_projection_csv(std::ostream& out, const EmbeddingTable& table);
void write_kl_heatmap_svg(std::ostream& out, const PatchReport& report, const ModelConfig& config);

}  // namespace mexp
