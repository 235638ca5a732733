#include <doctest.h>

#include <filesystem>

#include "mexp/codec.hpp"

using namespace mexp;

TEST_CASE("vocabulary layout") {
  CHECK(Vocabulary(1000).size() == 1004);
  CHECK(Vocabulary(999).size() == 1003);
  const Vocabulary two(2);
  CHECK(two.size() == 6);
  CHECK(two.is_digit(0));
  CHECK(two.is_digit(1));
  CHECK_FALSE(two.is_digit(two.plus()));
  const Vocabulary v(1000);
  CHECK(v.name(v.v3()) == "V3");
  CHECK(v.name(v.eos()) == "<eos>");
  CHECK(v.id("<pad>") == v.pad());
  CHECK(v.id("178") == v.digit(178));
  CHECK_THROWS_AS(v.id("1000"), DataError);
  CHECK_THROWS_AS(v.digit(1000), DataError);
}

TEST_CASE("integer digits") {
  using D = std::vector<std::uint32_t>;
  CHECK(encode_int(750178, 1000) == D{750, 178});
  CHECK(encode_int(0, 1000) == D{0});
  CHECK(encode_int(999999, 1000) == D{999, 999});
  CHECK(decode_int(D{750, 178}, 1000) == 750178);
  CHECK(decode_int(D{0}, 1000) == 0);
  CHECK(decode_int(D{1, 0, 0}, 10) == 100);
  CHECK_THROWS_AS(decode_int(D{}, 10), DataError);
  CHECK_THROWS_AS(decode_int(D{0, 1}, 10), DataError);
  CHECK(decode_int(D{0, 1}, 10, false) == 1);
  CHECK_THROWS_AS(decode_int(D{10}, 10), DataError);
  CHECK(digit_count(0, 1000) == 1);
  CHECK(digit_count(999, 1000) == 1);
  CHECK(digit_count(1000, 1000) == 2);
}

TEST_CASE("worked example renders as in the template") {
  const Vocabulary v(1000);
  const ModExpInstance inst{750178, 996884, 95, 1};
  const auto [src, tgt] = encode_instance(inst, v);
  CHECK(render(src, v) == "V3 + 750 178 + 996 884 + 95");
  CHECK(render(tgt, v) == "+ 1 <eos>");
  CHECK(render_template(inst, 1000) == "V3 +750 178 +996 884 +95 +1");
  CHECK(decode_instance(src, tgt, v) == inst);

  const auto [s0, t0] = encode_instance({0, 0, 1, 0}, v);
  CHECK(render(t0, v) == "+ 0 <eos>");
}

TEST_CASE("prediction readout") {
  const Vocabulary v(1000);
  using Ids = std::vector<TokenId>;
  CHECK(decode_prediction(Ids{v.plus(), v.digit(91), v.eos()}, v) == 91);
  CHECK(decode_prediction(Ids{v.plus(), v.digit(1), v.digit(19), v.eos()}, v) == 1019);
  CHECK_FALSE(decode_prediction(Ids{v.plus(), v.eos()}, v).has_value());
  CHECK_FALSE(decode_prediction(Ids{}, v).has_value());
  CHECK_FALSE(decode_prediction(Ids{v.plus(), v.digit(0), v.digit(5), v.eos()}, v).has_value());
  CHECK_FALSE(decode_prediction(Ids{v.plus(), v.digit(4), v.plus(), v.digit(5)}, v).has_value());
  CHECK(decode_prediction(Ids{v.plus(), v.digit(7)}, v) == 7);
  CHECK(decode_prediction(Ids{v.digit(7), v.eos(), v.digit(3)}, v) == 7);
}

TEST_CASE("roundtrip across bases") {
  for (const std::uint32_t base : {2U, 10U, 999U, 1000U, 1013U, 1279U}) {
    const Vocabulary v(base);
    for (std::uint64_t a : {0ULL, 1ULL, 999ULL, 1000ULL, 1012ULL, 1'000'000ULL, 123'456'789ULL}) {
      const ModExpInstance inst{a, a / 3 + 1, 97, a % 97};
      const auto [src, tgt] = encode_instance(inst, v);
      REQUIRE(decode_instance(src, tgt, v) == inst);
      REQUIRE(src.ids.size() <= max_source_len(std::max<std::uint64_t>(a, 1), 97, base));
    }
  }
}

TEST_CASE("strict decoding rejects broken sequences") {
  const Vocabulary v(1000);
  auto [src, tgt] = encode_instance({5, 6, 7, 1}, v);
  auto bad_src = src;
  bad_src.ids.front() = v.plus();
  CHECK_THROWS_AS(decode_instance(bad_src, tgt, v), DataError);
  auto bad_tgt = tgt;
  bad_tgt.ids.pop_back();
  CHECK_THROWS_AS(decode_instance(src, bad_tgt, v), DataError);
}

TEST_CASE("tokenized file roundtrip") {
  const Vocabulary v(1000);
  const std::vector<ModExpInstance> rows{{750178, 996884, 95, 1}, {0, 0, 1, 0}, {12, 3, 20, 8}};
  const auto path = std::filesystem::temp_directory_path() / "mexp_test_codec.tok";
  const auto ms = max_source_len(1'000'000, 100, 1000);
  const auto mt = max_target_len(100, 1000);
  write_tokenized(path, rows, v, ms, mt);
  const auto back = read_tokenized(path);
  CHECK(back.base == 1000);
  REQUIRE(back.sources.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(decode_instance(back.sources[i], back.targets[i], v) == rows[i]);
  }
  CHECK_THROWS_AS(write_tokenized(path, rows, v, 3, mt), DataError);
}
