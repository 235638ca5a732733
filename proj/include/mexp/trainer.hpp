#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mexp/codec.hpp"
#include "mexp/model.hpp"
#include "mexp/sampler.hpp"

namespace mexp {

struct TrainConfig {
  int epochs = 2500;
  std::uint64_t samples_per_epoch = 300'000;
  int batch_size = 256;
  std::uint32_t base = 1000;
  SamplerSpec train_spec;
  std::uint64_t eval_size = 10'000;
  /// Equal numbers of eval rows per modulus instead of the sampling law's c.
  bool stratified_eval = false;
  int eval_every = 1;
  int checkpoint_every = 100;
  std::filesystem::path out_dir;
  /// Layer sizes and seed; vocab and lengths are derived from base and spec.
  ModelConfig model;
  AdamConfig adam;
  unsigned threads = 1;

  /// Throws UsageError on nonpositive sizes or batch_size > samples_per_epoch.
  void validate() const;
  /// Model config with vocab_size and max lengths filled in.
  ModelConfig resolved_model() const;
};

void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

enum class Split { train, valid, test };
std::string to_string(Split split);

struct ModulusTally {
  std::uint64_t correct = 0;
  std::uint64_t total = 0;
};

struct EpochMetrics {
  int epoch = 0;
  Split split = Split::valid;
  double loss = 0.0;
  double accuracy = 0.0;
  std::map<std::uint64_t, ModulusTally> per_modulus;
};

struct EvalSets {
  std::vector<ModExpInstance> valid;  // uniform operands, computed outcomes
  std::vector<ModExpInstance> test;   // uniform operands, uniform outcomes
};

/// Fixed per-run evaluation sets. Operands are uniform on [0, M] and c on
/// [1, c_max] taken from `law`; in stratified mode row i has c = i % c_max + 1.
EvalSets build_eval_sets(const SamplerSpec& law, std::uint64_t size, bool stratified = false);

/// One evaluated row: greedy prediction (nullopt when malformed).
struct Prediction {
  ModExpInstance instance;
  std::optional<std::uint64_t> predicted;

  bool correct() const { return predicted.has_value() && *predicted == instance.d; }
};

/// Teacher-forced loss and greedy exact-match accuracy. `predictions`, when
/// given, receives one entry per row in dataset order.
EpochMetrics evaluate(const Model<float>& model, std::span<const ModExpInstance> dataset,
                      const Vocabulary& vocab, unsigned threads = 1,
                      std::vector<Prediction>* predictions = nullptr);

/// Greedy predictions only, batched.
std::vector<Prediction> predict(const Model<float>& model,
                                std::span<const ModExpInstance> dataset, const Vocabulary& vocab,
                                unsigned threads = 1);

struct TrainResult {
  int last_epoch = 0;
  std::vector<EpochMetrics> history;  // rows produced by this invocation
};

using EpochCallback = std::function<void(const std::vector<EpochMetrics>&)>;

/// Runs (or resumes) training into config.out_dir. With `resume_from`, the
/// run continues after the checkpoint's epoch and the metric files keep only
/// rows up to that epoch before appending.
TrainResult train(const TrainConfig& config,
                  const std::optional<std::filesystem::path>& resume_from = std::nullopt,
                  const EpochCallback& on_epoch = nullptr);

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, int epoch);

}  // namespace mexp
