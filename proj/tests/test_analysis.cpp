#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "mexp/analysis.hpp"

using namespace mexp;

namespace {

Prediction pred(std::uint64_t a, std::uint64_t c, std::uint64_t d,
                std::optional<std::uint64_t> p) {
  return {{a, 1, c, d}, p};
}

GrokEvent event(std::uint64_t modulus, int onset) { return {modulus, onset, 0.7, true}; }

}  // namespace

TEST_CASE("per-modulus accuracy") {
  const std::vector<Prediction> all_right{pred(1, 5, 1, 1), pred(2, 7, 2, 2), pred(3, 7, 3, 3)};
  for (const auto& [c, acc] : per_modulus_accuracy(all_right)) {
    CHECK(acc == 1.0);
  }
  const std::vector<Prediction> one_wrong{pred(4, 23, 4, 5)};
  CHECK(per_modulus_accuracy(one_wrong).at(23) == 0.0);

  const std::vector<Prediction> mixed{pred(1, 5, 1, 1),  pred(2, 5, 2, 3),        pred(3, 5, 3, 3),
                                      pred(4, 5, 4, 4),  pred(1, 9, 1, std::nullopt),
                                      pred(2, 9, 2, 2),  pred(3, 9, 3, 0)};
  const auto acc = per_modulus_accuracy(mixed);
  CHECK(acc.at(5) == 0.75);
  CHECK(acc.at(9) == doctest::Approx(1.0 / 3.0));
  const auto tally = per_modulus_tally(mixed);
  CHECK(tally.at(9).total == 3);
  CHECK(tally.at(9).correct == 1);
  CHECK_THROWS_AS(per_modulus_accuracy(std::span<const Prediction>{}), DataError);
}

TEST_CASE("step curve yields one event at the step") {
  const auto s = testing::step_curve(1, 100);
  const auto events = detect_grokking(s);
  REQUIRE(events.size() == 1);
  CHECK(events[0].onset_epoch >= 96);
  CHECK(events[0].onset_epoch <= 104);
  CHECK(events[0].jump == doctest::Approx(0.75));
  CHECK(events[0].sustained);
  CHECK(events[0].modulus == 23);
}

TEST_CASE("flat and slowly rising curves give no events") {
  AccuracySeries flat;
  flat.modulus = 3;
  for (int e = 1; e <= 300; ++e) {
    flat.points.push_back({e, 0.5, 10});
  }
  CHECK(detect_grokking(flat).empty());
  int false_positives = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    false_positives += detect_grokking(testing::noisy_ramp(seed)).empty() ? 0 : 1;
  }
  CHECK(false_positives < 5);
}

TEST_CASE("detector edge cases") {
  AccuracySeries s;
  s.modulus = 2;
  for (int e = 1; e <= 10; ++e) {
    s.points.push_back({e, 0.1, 1});
  }
  CHECK_THROWS_AS(detect_grokking(s), DataError);

  // a late step without a full sustain period is flagged
  const auto late = testing::step_curve(2, 380);
  const auto events = detect_grokking(late);
  REQUIRE(events.size() == 1);
  CHECK_FALSE(events[0].sustained);

  // a spike that falls back is not grokking
  auto spike = testing::step_curve(3, 100);
  for (auto& p : spike.points) {
    if (p.epoch >= 110) {
      p.accuracy = 0.2;
    }
  }
  CHECK(detect_grokking(spike).empty());

  // sparse evaluation points still work
  AccuracySeries sparse;
  sparse.modulus = 4;
  for (int e = 10; e <= 800; e += 10) {
    sparse.points.push_back({e, e < 300 ? 0.2 : 0.95, 5});
  }
  const auto se = detect_grokking(sparse);
  REQUIRE(se.size() == 1);
  CHECK(se[0].onset_epoch == 300);

  AccuracySeries bad = sparse;
  std::swap(bad.points[0], bad.points[1]);
  CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("two separate steps give two events") {
  AccuracySeries s;
  s.modulus = 46;
  for (int e = 1; e <= 600; ++e) {
    s.points.push_back({e, e < 150 ? 0.05 : (e < 400 ? 0.5 : 0.98), 10});
  }
  const auto events = detect_grokking(s);
  REQUIRE(events.size() == 2);
  CHECK(events[0].onset_epoch == 150);
  CHECK(events[1].onset_epoch == 400);
}

TEST_CASE("family synchronisation") {
  const std::vector<GrokEvent> ev{event(23, 1725), event(46, 1730), event(69, 1740)};
  const auto fams = family_sync_report(ev);
  REQUIRE(fams.size() == 1);
  CHECK(fams[0].prime == 23);
  CHECK(fams[0].moduli == std::vector<std::uint64_t>{23, 46, 69});
  CHECK(fams[0].spread == 15);
  CHECK_FALSE(fams[0].singleton);

  const std::vector<GrokEvent> apart{event(47, 500), event(23, 1725)};
  const auto s = family_sync_report(apart);
  REQUIRE(s.size() == 2);
  CHECK(s[0].singleton);
  CHECK(s[1].singleton);

  CHECK(family_sync_report(std::span<const GrokEvent>{}).empty());

  // shared factor but far apart in time: not a family
  const std::vector<GrokEvent> late{event(31, 100), event(62, 900)};
  for (const auto& f : family_sync_report(late)) {
    CHECK(f.singleton);
  }

  // 6 and 12 share both 2 and 3; reported once, under 2
  const std::vector<GrokEvent> both{event(6, 50), event(12, 55)};
  const auto b = family_sync_report(both);
  REQUIRE(b.size() == 1);
  CHECK(b[0].prime == 2);
}

TEST_CASE("misprediction census") {
  std::vector<Prediction> all_right;
  for (std::uint64_t i = 0; i < 30; ++i) {
    all_right.push_back(pred(i, 97, 91, 91));
  }
  CHECK(misprediction_census(all_right).empty());

  std::vector<Prediction> rows;
  for (std::uint64_t i = 0; i < 100; ++i) {
    std::optional<std::uint64_t> p = 19;
    if (i >= 90) {
      p = i < 95 ? std::optional<std::uint64_t>(1) : std::nullopt;
    }
    rows.push_back(pred(i % 50, 97, 91, p));
  }
  rows.push_back(pred(1, 97, 5, 5));
  const auto table = misprediction_census(rows);
  REQUIRE(table.size() == 1);
  const auto& t = table[0];
  CHECK(t.target == 91);
  CHECK(t.support == 100);
  CHECK(t.distinct_support == 50);
  CHECK(t.dominant == "19");
  CHECK(t.dominant_count == 90);
  CHECK(t.dominant_share == doctest::Approx(0.9));
  CHECK(t.histogram.at("malformed") == 5);
  CHECK(t.histogram.at("1") == 5);

  // below the support floor
  CHECK(misprediction_census(rows, 101).empty());

  // ties go to the smaller value
  const std::vector<Prediction> tie{pred(1, 50, 40, 30), pred(2, 50, 40, 7)};
  CHECK(misprediction_census(tie, 1)[0].dominant == "7");
}

TEST_CASE("series round trip through per_modulus.csv") {
  const auto path = std::filesystem::temp_directory_path() / "mexp_test_series.csv";
  {
    std::ofstream out(path);
    out << "epoch,split,modulus,correct,total\n"
        << "1,valid,5,1,4\n1,test,5,2,4\n2,valid,5,3,4\n2,test,5,4,4\n1,test,7,0,2\n";
  }
  const auto s = read_modulus_series(path, Split::test);
  REQUIRE(s.size() == 2);
  CHECK(s.at(5).points.size() == 2);
  CHECK(s.at(5).points[1].accuracy == 1.0);
  CHECK(s.at(7).points[0].n_samples == 2);
  std::ostringstream csv;
  write_series_csv(csv, s);
  CHECK(csv.str().rfind("modulus,epoch,accuracy,n_samples\n", 0) == 0);
}

TEST_CASE("writers emit headers and rows") {
  std::ostringstream svg;
  const std::vector<ChartLine> lines{{"c = 5", {{1, 0.1}, {2, 0.9}}}};
  write_line_chart_svg(svg, "test", lines);
  CHECK(svg.str().find("<svg") != std::string::npos);
  CHECK(svg.str().find("c = 5") != std::string::npos);

  std::ostringstream ev;
  const std::vector<GrokEvent> events{event(23, 10)};
  write_grok_events_csv(ev, events);
  CHECK(ev.str() == "modulus,onset_epoch,jump,sustained\n23,10,0.700000,true\n");
}
