#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mexp/error.hpp"
#include "mexp/rng.hpp"

namespace mexp {

/// One tuple with a^b = d (mod c) and 0 <= d < c.
struct ModExpInstance {
  std::uint64_t a = 0;
  std::uint64_t b = 0;
  std::uint64_t c = 1;
  std::uint64_t d = 0;

  bool operator==(const ModExpInstance&) const = default;
};

enum class OperandLaw { uniform, reciprocal };
enum class OutcomeLaw { computed, uniform };

struct SamplerSpec {
  OperandLaw operand_law = OperandLaw::reciprocal;
  OutcomeLaw outcome_law = OutcomeLaw::computed;
  std::uint64_t max_int = 1'000'000;  // M
  std::uint64_t c_max = 100;
  std::uint64_t seed = 0;
  std::uint64_t max_rejections = 1'000'000;

  /// Throws UsageError unless M >= 1, 1 <= c_max <= M and max_rejections >= 1.
  void validate() const;
};

std::string to_string(OperandLaw law);
std::string to_string(OutcomeLaw law);
OperandLaw parse_operand_law(const std::string& text);
OutcomeLaw parse_outcome_law(const std::string& text);

void to_json(nlohmann::json& j, const SamplerSpec& spec);
void from_json(const nlohmann::json& j, SamplerSpec& spec);

/// Raised when uniform-outcome rejection sampling exceeds max_rejections.
class RejectionExhausted : public DataError {
 public:
  RejectionExhausted(std::uint64_t target, std::uint64_t index, std::uint64_t emitted);

  std::uint64_t target() const { return target_; }
  std::uint64_t index() const { return index_; }
  /// Instances successfully emitted before the failure.
  std::uint64_t emitted() const { return emitted_; }

 private:
  std::uint64_t target_;
  std::uint64_t index_;
  std::uint64_t emitted_;
};

/// Probability that the reciprocal sampler returns n:
/// (ln(n+2) - ln(n+1)) / ln(M+2) on [0, M], zero elsewhere.
double reciprocal_pmf(std::int64_t n, std::uint64_t max_int);

/// Mass of the reciprocal law on the integer range [lo, hi).
double reciprocal_mass(std::uint64_t lo, std::uint64_t hi, std::uint64_t max_int);

/// u ~ U[0, ln(M+2)), returns floor(e^u) - 1.
std::uint64_t draw_reciprocal(CounterRng& rng, std::uint64_t max_int);

std::uint64_t draw_operand(CounterRng& rng, OperandLaw law, std::uint64_t max_int);

/// Draws one instance under the spec's scheme. `rejections`, when given,
/// receives the number of rejected uniform-outcome attempts.
ModExpInstance draw_instance(const SamplerSpec& spec, CounterRng& rng,
                             std::uint64_t* rejections = nullptr);

/// Instance number `index` of the stream; a pure function of its arguments.
ModExpInstance instance_at(const SamplerSpec& spec, Stream stream, std::uint64_t index,
                           std::uint64_t* rejections = nullptr);

struct GenerationStats {
  std::uint64_t count = 0;
  std::uint64_t rejections = 0;
  std::map<std::uint64_t, std::uint64_t> per_modulus;
};

void to_json(nlohmann::json& j, const GenerationStats& stats);

using InstanceSink = std::function<void(const ModExpInstance&)>;

/// Streams instances [first_index, first_index + count) of `stream` to the
/// sink in index order. Work is split over `threads` workers; the emitted
/// sequence does not depend on the thread count.
GenerationStats generate_dataset(const SamplerSpec& spec, std::uint64_t count,
                                 const InstanceSink& sink, Stream stream = Stream::dataset,
                                 std::uint64_t first_index = 0, unsigned threads = 1);

std::vector<ModExpInstance> generate_instances(const SamplerSpec& spec, std::uint64_t count,
                                               Stream stream = Stream::dataset,
                                               std::uint64_t first_index = 0,
                                               unsigned threads = 1);

enum class Field { a, b, c, d };
Field parse_field(const std::string& name);
std::uint64_t field_value(const ModExpInstance& inst, Field field);

struct Histogram {
  std::vector<std::uint64_t> edges;   // bin i covers [edges[i], edges[i+1])
  std::vector<std::uint64_t> counts;  // edges.size() - 1 entries
  std::uint64_t total() const;
};

/// Strictly increasing, roughly log-spaced integer edges covering [0, max_int].
/// The last edge is max_int + 1.
std::vector<std::uint64_t> log_spaced_edges(std::uint64_t max_int, std::size_t bins);

/// Throws DataError on an empty dataset or values outside the edges.
Histogram empirical_histogram(std::span<const ModExpInstance> dataset, Field field,
                              std::span<const std::uint64_t> edges);

struct ChiSquareResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 0.0;
};

/// Pearson goodness of fit of observed counts against expected probabilities
/// (renormalized to the observed total).
ChiSquareResult chi_square_test(std::span<const std::uint64_t> observed,
                                std::span<const double> expected_probability);

}  // namespace mexp
