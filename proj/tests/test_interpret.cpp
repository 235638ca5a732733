#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "mexp/interpret.hpp"
#include "mexp/numtheory.hpp"

using namespace mexp;

namespace {

SamplerSpec pair_spec() {
  SamplerSpec s;
  s.max_int = 10'000;
  s.c_max = 20;
  s.seed = 4;
  return s;
}

ModelConfig small_config(std::uint32_t base = 1000) {
  ModelConfig c;
  c.n_layers_enc = 2;
  c.n_layers_dec = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = static_cast<int>(base + 4);
  c.max_src_len = static_cast<int>(max_source_len(10'000, 20, base));
  c.max_tgt_len = static_cast<int>(max_target_len(20, base));
  c.seed = 5;
  return c;
}

}  // namespace

TEST_CASE("kl divergence") {
  const std::vector<double> p{1.0, 2.0, 3.0};
  CHECK(kl_divergence(p, p) == 0.0);
  const std::vector<double> sure{0.0, -1e3};
  const std::vector<double> even{0.0, 0.0};
  CHECK(kl_divergence(sure, even) == doctest::Approx(std::log(2.0)));
  CHECK(kl_divergence(even, sure) > 100);
  const std::vector<double> shifted{11.0, 12.0, 13.0};
  CHECK(kl_divergence(p, shifted) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS_AS(kl_divergence(p, even), DataError);
  CHECK_THROWS_AS(kl_divergence(std::span<const double>{}, std::span<const double>{}), DataError);
  const std::vector<double> bad{0.0, NAN};
  CHECK_THROWS_AS(kl_divergence(bad, even), DataError);
}

TEST_CASE("prompt pairs respect the filter and digit counts") {
  const auto spec = pair_spec();
  const auto pairs = build_prompt_pairs(spec, 60, PairFilter::no_reduction, 1000);
  REQUIRE(pairs.size() == 60);
  for (const auto& p : pairs) {
    CHECK(no_reduction(p.clean));
    CHECK(no_reduction(p.counterfactual));
    CHECK(p.clean.c == p.counterfactual.c);
    CHECK(digit_count(p.clean.a, 1000) == digit_count(p.counterfactual.a, 1000));
    CHECK(digit_count(p.clean.b, 1000) == digit_count(p.counterfactual.b, 1000));
    CHECK((p.clean.a != p.counterfactual.a || p.clean.b != p.counterfactual.b));
    CHECK(numtheory::modpow(p.clean.a, p.clean.b, p.clean.c) == p.clean.d);
    CHECK(numtheory::modpow(p.counterfactual.a, p.counterfactual.b, p.clean.c) ==
          p.counterfactual.d);
  }
  const auto again = build_prompt_pairs(spec, 60, PairFilter::no_reduction, 1000);
  CHECK(again.front().clean == pairs.front().clean);
  CHECK(parse_pair_filter("no-reduction") == PairFilter::no_reduction);
  CHECK_THROWS_AS(parse_pair_filter("maybe"), UsageError);
}

TEST_CASE("patching identities hold on a random model") {
  const auto cfg = small_config();
  auto model = init_model<double>(cfg);
  testing::jitter(model, 5, 0.3);
  const Vocabulary vocab(1000);
  const auto pairs = build_prompt_pairs(pair_spec(), 12, PairFilter::none, 1000);
  const auto id = patch_identities(model, pairs, vocab, true);
  CHECK(id.max_self_kl <= 1e-9);
  CHECK(id.full_substitution_kl <= 1e-6);

  const auto report = patch_sweep(model, pairs, vocab, true, "none");
  CHECK(report.pair_count == 12);
  CHECK(report.slots.size() == head_slots(cfg, true).size());
  bool any_positive = false;
  for (const auto& s : report.slots) {
    CHECK(std::isfinite(s.mean));
    CHECK(s.mean >= 0);
    CHECK(s.per_pair.size() == 12);
    any_positive = any_positive || s.mean > 1e-8;
  }
  CHECK(any_positive);

  std::ostringstream map;
  write_kl_map_csv(map, report);
  const std::string text = map.str();
  CHECK(std::count(text.begin(), text.end(), '\n') ==
        static_cast<long>(report.slots.size()) + 1);
  std::ostringstream svg;
  write_kl_heatmap_svg(svg, report, cfg);
  CHECK(svg.str().find("</svg>") != std::string::npos);
}

TEST_CASE("circuit evaluation") {
  const auto cfg = small_config();
  auto model = init_model<float>(cfg);
  testing::jitter(model, 6, 0.3);
  const Vocabulary vocab(1000);
  auto spec = pair_spec();
  const auto data = generate_instances(spec, 80, Stream::test);
  const auto reference = generate_instances(spec, 40, Stream::reference);
  for (const auto mode : {AblationMode::mean, AblationMode::zero}) {
    CircuitSpec all{{}, mode, true, "all"};
    for (const auto& s : head_slots(cfg, true)) {
      all.active_heads.insert(s);
    }
    const auto r = circuit_eval(model, all, data, reference, vocab);
    CHECK(r.circuit_accuracy == r.full_accuracy);
    CHECK(r.rows == 80);

    const auto last = final_layer_circuit(cfg, mode);
    CHECK(last.active_heads.size() == 4);
    for (const auto& s : last.active_heads) {
      CHECK(s.side == Side::decoder);
      CHECK(s.layer == 1);
    }
    CHECK_NOTHROW(circuit_eval(model, last, data, reference, vocab));
  }
  CircuitSpec bogus{{{Side::decoder, 5, AttentionKind::self, 0}}, AblationMode::zero, false, ""};
  CHECK_THROWS_AS(circuit_eval(model, bogus, data, reference, vocab), UsageError);
  CircuitSpec none{{}, AblationMode::mean, false, "none"};
  CHECK_THROWS_AS(circuit_eval(model, none, data, std::span<const ModExpInstance>{}, vocab),
                  DataError);
}

TEST_CASE("pca on rank-one and degenerate data") {
  Eigen::MatrixXd line(5, 2);
  for (int i = 0; i < 5; ++i) {
    line(i, 0) = i;
    line(i, 1) = i;
  }
  const auto r = pca(line, 2);
  CHECK(std::abs(r.components(0, 0)) == doctest::Approx(1 / std::sqrt(2.0)));
  CHECK(std::abs(r.components(0, 1)) == doctest::Approx(1 / std::sqrt(2.0)));
  CHECK(r.explained_variance[1] == doctest::Approx(0.0).epsilon(1e-12));

  const Eigen::MatrixXd same = Eigen::MatrixXd::Constant(4, 3, 2.5);
  for (const double v : pca(same, 3).explained_variance) {
    CHECK(v == 0.0);
  }
  CHECK_THROWS_AS(pca(same, 4), UsageError);
  CHECK_THROWS_AS(pca(Eigen::MatrixXd::Zero(1, 3), 1), UsageError);
}

TEST_CASE("pca recovers planted variances") {
  const auto x = testing::planted({9, 4, 1, 0.1}, 12, 400, 3);
  const auto r = pca(x, 4);
  const std::vector<double> expected{9, 4, 1, 0.1};
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(r.explained_variance[static_cast<std::size_t>(i)] - expected[i]) < 1e-6);
  }
  const Eigen::MatrixXd gram = r.components * r.components.transpose();
  CHECK((gram - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-8);
  const Eigen::MatrixXd back =
      (r.projections * r.components).rowwise() + r.mean.transpose();
  CHECK((back - x).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("embedding projection") {
  const auto model = init_model<float>(small_config());
  const std::vector<std::uint64_t> primes{23, 31, 39};
  const auto t = embedding_projection(model, 3, 101, primes);
  CHECK(t.values.size() == 100);
  CHECK(t.pca.projections.rows() == 100);
  CHECK(t.labels.size() == 100);
  CHECK(t.values.front() == 1);
  CHECK(t.values.back() == 100);
  std::ostringstream csv;
  write_projection_csv(csv, t);
  CHECK(csv.str().rfind("value,pc1,pc2,pc3,", 0) == 0);

  const auto small = init_model<float>(small_config(97));
  CHECK_THROWS_AS(embedding_projection(small, 3, 101, primes), UsageError);

  auto other = small_config();
  other.d_model = 32;
  CHECK_THROWS_AS(embedding_report(model, init_model<float>(other), 3, 101, primes), UsageError);
}
