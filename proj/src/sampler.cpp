#include "mexp/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include <boost/math/distributions/chi_squared.hpp>

#include "mexp/numtheory.hpp"

namespace mexp {

void SamplerSpec::validate() const {
  if (max_int < 1) {
    throw UsageError("sampler: max_int must be >= 1");
  }
  if (c_max < 1 || c_max > max_int) {
    throw UsageError("sampler: c_max must lie in [1, max_int]");
  }
  if (max_rejections < 1) {
    throw UsageError("sampler: max_rejections must be >= 1");
  }
}

std::string to_string(OperandLaw law) {
  return law == OperandLaw::uniform ? "uniform" : "reciprocal";
}

std::string to_string(OutcomeLaw law) {
  return law == OutcomeLaw::computed ? "computed" : "uniform";
}

OperandLaw parse_operand_law(const std::string& text) {
  if (text == "uniform") {
    return OperandLaw::uniform;
  }
  if (text == "reciprocal") {
    return OperandLaw::reciprocal;
  }
  throw UsageError("unknown operand law '" + text + "' (expected uniform|reciprocal)");
}

OutcomeLaw parse_outcome_law(const std::string& text) {
  if (text == "computed") {
    return OutcomeLaw::computed;
  }
  if (text == "uniform") {
    return OutcomeLaw::uniform;
  }
  throw UsageError("unknown outcome law '" + text + "' (expected computed|uniform)");
}

void to_json(nlohmann::json& j, const SamplerSpec& spec) {
  j = nlohmann::json{{"operand_law", to_string(spec.operand_law)},
                     {"outcome_law", to_string(spec.outcome_law)},
                     {"max_int", spec.max_int},
                     {"c_max", spec.c_max},
                     {"seed", spec.seed},
                     {"max_rejections", spec.max_rejections}};
}

void from_json(const nlohmann::json& j, SamplerSpec& spec) {
  spec.operand_law = parse_operand_law(j.at("operand_law").get<std::string>());
  spec.outcome_law = parse_outcome_law(j.at("outcome_law").get<std::string>());
  spec.max_int = j.at("max_int").get<std::uint64_t>();
  spec.c_max = j.at("c_max").get<std::uint64_t>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.max_rejections = j.at("max_rejections").get<std::uint64_t>();
}

RejectionExhausted::RejectionExhausted(std::uint64_t target, std::uint64_t index,
                                       std::uint64_t emitted)
    : DataError("sampler: rejection budget exhausted for d = " + std::to_string(target) +
                " at instance " + std::to_string(index) + " (" + std::to_string(emitted) +
                " instances emitted)"),
      target_(target),
      index_(index),
      emitted_(emitted) {}

double reciprocal_pmf(std::int64_t n, std::uint64_t max_int) {
  if (n < 0 || static_cast<std::uint64_t>(n) > max_int) {
    return 0.0;
  }
  const auto x = static_cast<double>(n);
  return std::log1p(1.0 / (x + 1.0)) / std::log(static_cast<double>(max_int) + 2.0);
}

double reciprocal_mass(std::uint64_t lo, std::uint64_t hi, std::uint64_t max_int) {
  hi = std::min(hi, max_int + 1);
  if (lo >= hi) {
    return 0.0;
  }
  // Telescoping sum of the PMF over [lo, hi).
  return std::log((static_cast<double>(hi) + 1.0) / (static_cast<double>(lo) + 1.0)) /
         std::log(static_cast<double>(max_int) + 2.0);
}

std::uint64_t draw_reciprocal(CounterRng& rng, std::uint64_t max_int) {
  const double u = rng.uniform01() * std::log(static_cast<double>(max_int) + 2.0);
  const auto shifted = static_cast<std::uint64_t>(std::floor(std::exp(u)));
  // u < ln(M+2) keeps floor(e^u) <= M+1 except for rounding at the very top.
  return std::min(shifted - 1, max_int);
}

std::uint64_t draw_operand(CounterRng& rng, OperandLaw law, std::uint64_t max_int) {
  return law == OperandLaw::uniform ? rng.uniform_int(0, max_int) : draw_reciprocal(rng, max_int);
}

ModExpInstance draw_instance(const SamplerSpec& spec, CounterRng& rng,
                             std::uint64_t* rejections) {
  ModExpInstance inst;
  if (spec.outcome_law == OutcomeLaw::computed) {
    inst.a = draw_operand(rng, spec.operand_law, spec.max_int);
    inst.b = draw_operand(rng, spec.operand_law, spec.max_int);
    inst.c = rng.uniform_int(1, spec.c_max);
    inst.d = numtheory::modpow(inst.a, inst.b, inst.c);
    if (rejections != nullptr) {
      *rejections = 0;
    }
    return inst;
  }

  inst.d = rng.uniform_int(0, spec.c_max - 1);
  for (std::uint64_t attempt = 0; attempt < spec.max_rejections; ++attempt) {
    inst.c = rng.uniform_int(inst.d + 1, spec.c_max);
    inst.a = draw_operand(rng, spec.operand_law, spec.max_int);
    inst.b = draw_operand(rng, spec.operand_law, spec.max_int);
    if (numtheory::modpow(inst.a, inst.b, inst.c) == inst.d) {
      if (rejections != nullptr) {
        *rejections = attempt;
      }
      return inst;
    }
  }
  throw RejectionExhausted(inst.d, 0, 0);
}

ModExpInstance instance_at(const SamplerSpec& spec, Stream stream, std::uint64_t index,
                           std::uint64_t* rejections) {
  CounterRng rng(spec.seed, stream, index);
  try {
    return draw_instance(spec, rng, rejections);
  } catch (const RejectionExhausted& e) {
    throw RejectionExhausted(e.target(), index, 0);
  }
}

void to_json(nlohmann::json& j, const GenerationStats& stats) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [c, n] : stats.per_modulus) {
    per[std::to_string(c)] = n;
  }
  j = nlohmann::json{{"count", stats.count}, {"rejections", stats.rejections}, {"per_modulus", per}};
}

namespace {

constexpr std::uint64_t kBlock = 8192;

struct Slot {
  ModExpInstance inst;
  std::uint64_t rejections = 0;
  bool failed = false;
  std::uint64_t failed_target = 0;
};

void fill_range(const SamplerSpec& spec, Stream stream, std::uint64_t first, std::span<Slot> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    try {
      out[i].inst = instance_at(spec, stream, first + i, &out[i].rejections);
    } catch (const RejectionExhausted& e) {
      out[i].failed = true;
      out[i].failed_target = e.target();
      return;
    }
  }
}

}  // namespace

GenerationStats generate_dataset(const SamplerSpec& spec, std::uint64_t count,
                                 const InstanceSink& sink, Stream stream,
                                 std::uint64_t first_index, unsigned threads) {
  spec.validate();
  threads = std::max(1U, threads);
  GenerationStats stats;
  std::vector<Slot> block;
  for (std::uint64_t start = 0; start < count; start += kBlock) {
    const std::uint64_t n = std::min(kBlock, count - start);
    block.assign(n, Slot{});
    const std::uint64_t first = first_index + start;
    if (threads == 1 || n < 2 * threads) {
      fill_range(spec, stream, first, block);
    } else {
      std::vector<std::jthread> workers;
      const std::uint64_t per = (n + threads - 1) / threads;
      for (unsigned t = 0; t < threads; ++t) {
        const std::uint64_t lo = t * per;
        if (lo >= n) {
          break;
        }
        const std::uint64_t len = std::min(per, n - lo);
        workers.emplace_back([&, lo, len] {
          fill_range(spec, stream, first + lo, std::span<Slot>(block).subspan(lo, len));
        });
      }
    }
    for (std::uint64_t i = 0; i < n; ++i) {
      const Slot& slot = block[i];
      if (slot.failed) {
        throw RejectionExhausted(slot.failed_target, first + i, stats.count);
      }
      sink(slot.inst);
      ++stats.count;
      stats.rejections += slot.rejections;
      ++stats.per_modulus[slot.inst.c];
    }
  }
  return stats;
}

std::vector<ModExpInstance> generate_instances(const SamplerSpec& spec, std::uint64_t count,
                                               Stream stream, std::uint64_t first_index,
                                               unsigned threads) {
  std::vector<ModExpInstance> out;
  out.reserve(count);
  generate_dataset(
      spec, count, [&out](const ModExpInstance& inst) { out.push_back(inst); }, stream,
      first_index, threads);
  return out;
}

Field parse_field(const std::string& name) {
  if (name == "a") {
    return Field::a;
  }
  if (name == "b") {
    return Field::b;
  }
  if (name == "c") {
    return Field::c;
  }
  if (name == "d") {
    return Field::d;
  }
  throw UsageError("unknown field '" + name + "' (expected a|b|c|d)");
}

std::uint64_t field_value(const ModExpInstance& inst, Field field) {
  switch (field) {
    case Field::a:
      return inst.a;
    case Field::b:
      return inst.b;
    case Field::c:
      return inst.c;
    case Field::d:
      return inst.d;
  }
  return 0;
}

std::uint64_t Histogram::total() const {
  std::uint64_t sum = 0;
  for (const auto n : counts) {
    sum += n;
  }
  return sum;
}

std::vector<std::uint64_t> log_spaced_edges(std::uint64_t max_int, std::size_t bins) {
  if (bins == 0 || bins > max_int + 1) {
    throw UsageError("log_spaced_edges: need 1 <= bins <= max_int + 1");
  }
  // Edges are spaced evenly in ln(n + 1), then nudged to stay strictly
  // increasing while leaving room for the remaining bins.
  const double top = std::log(static_cast<double>(max_int) + 2.0);
  std::vector<std::uint64_t> edges(bins + 1);
  edges[0] = 0;
  edges[bins] = max_int + 1;
  for (std::size_t k = 1; k < bins; ++k) {
    const double x = std::exp(top * static_cast<double>(k) / static_cast<double>(bins)) - 1.0;
    auto e = static_cast<std::uint64_t>(std::llround(x));
    e = std::max(e, edges[k - 1] + 1);
    e = std::min(e, max_int + 1 - (bins - k));
    edges[k] = e;
  }
  return edges;
}

Histogram empirical_histogram(std::span<const ModExpInstance> dataset, Field field,
                              std::span<const std::uint64_t> edges) {
  if (dataset.empty()) {
    throw DataError("empirical_histogram: empty dataset");
  }
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end())) {
    throw UsageError("empirical_histogram: need >= 2 sorted edges");
  }
  Histogram h;
  h.edges.assign(edges.begin(), edges.end());
  h.counts.assign(edges.size() - 1, 0);
  for (const auto& inst : dataset) {
    const std::uint64_t v = field_value(inst, field);
    const auto it = std::upper_bound(edges.begin(), edges.end(), v);
    if (it == edges.begin() || it == edges.end()) {
      throw DataError("empirical_histogram: value " + std::to_string(v) + " outside bin edges");
    }
    ++h.counts[static_cast<std::size_t>(it - edges.begin()) - 1];
  }
  return h;
}

ChiSquareResult chi_square_test(std::span<const std::uint64_t> observed,
                                std::span<const double> expected_probability) {
  if (observed.size() != expected_probability.size() || observed.size() < 2) {
    throw UsageError("chi_square_test: need >= 2 bins of matching size");
  }
  double total = 0.0;
  double prob_sum = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    total += static_cast<double>(observed[i]);
    prob_sum += expected_probability[i];
  }
  ChiSquareResult result;
  std::size_t used = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double expected = total * expected_probability[i] / prob_sum;
    if (expected <= 0.0) {
      if (observed[i] != 0) {
        result.statistic = std::numeric_limits<double>::infinity();
      }
      continue;
    }
    const double diff = static_cast<double>(observed[i]) - expected;
    result.statistic += diff * diff / expected;
    ++used;
  }
  result.dof = used - 1;
  if (!std::isfinite(result.statistic)) {
    result.p_value = 0.0;
    return result;
  }
  const boost::math::chi_squared dist(static_cast<double>(result.dof));
  result.p_value = boost::math::cdf(boost::math::complement(dist, result.statistic));
  return result;
}

}  // namespace mexp
