#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "mexp/numtheory.hpp"

using namespace mexp;
using namespace mexp::numtheory;

namespace {

std::uint64_t naive_pow(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t r = 1 % c;
  for (std::uint64_t i = 0; i < b; ++i) {
    r = (r * (a % c)) % c;
  }
  return r;
}

}  // namespace

TEST_CASE("modpow known values") {
  CHECK(modpow(750178, 996884, 95) == 1);
  CHECK(modpow(5, 0, 7) == 1);
  CHECK(modpow(3, 7, 10) == 7);
  CHECK(modpow(0, 0, 7) == 1);
  CHECK(modpow(0, 5, 7) == 0);
  CHECK(modpow(123, 456, 1) == 0);
  CHECK_THROWS_AS(modpow(2, 3, 0), DomainError);
}

TEST_CASE("modpow matches repeated multiplication") {
  for (std::uint64_t c = 1; c <= 30; ++c) {
    for (std::uint64_t a = 0; a <= 30; ++a) {
      for (std::uint64_t b = 0; b <= 30; ++b) {
        REQUIRE(modpow(a, b, c) == naive_pow(a, b, c));
      }
    }
  }
}

TEST_CASE("modpow does not overflow near 2^64") {
  const std::uint64_t big = 0xFFFFFFFFFFFFFFC5ULL;  // largest 64-bit prime
  CHECK(modpow(big - 1, 2, big) == 1);
  CHECK(modpow(2, big - 1, big) == 1);
}

TEST_CASE("lowest prime factor") {
  CHECK(lowest_prime_factor(1) == 1);
  CHECK(lowest_prime_factor(2) == 2);
  CHECK(lowest_prime_factor(91) == 7);
  CHECK(lowest_prime_factor(97) == 97);
  CHECK_THROWS_AS(lowest_prime_factor(0), DomainError);
}

TEST_CASE("primality") {
  CHECK(is_prime(2));
  CHECK(is_prime(1013));
  CHECK(is_prime(1279));
  CHECK_FALSE(is_prime(91));
  CHECK_FALSE(is_prime(1));
  CHECK_FALSE(is_prime(0));
  CHECK_FALSE(is_prime(999));
}

TEST_CASE("divisor count and totient") {
  CHECK(divisor_count(1) == 1);
  CHECK(divisor_count(97) == 2);
  CHECK(divisor_count(12) == 6);
  CHECK_THROWS_AS(divisor_count(0), DomainError);
  CHECK(totient(1) == 1);
  CHECK(totient(23) == 22);
  CHECK(totient(12) == 4);
  CHECK_THROWS_AS(totient(0), DomainError);
  for (std::uint64_t n = 1; n <= 200; ++n) {
    std::uint64_t coprime = 0;
    for (std::uint64_t k = 1; k <= n; ++k) {
      coprime += gcd(k, n) == 1 ? 1 : 0;
    }
    REQUIRE(totient(n) == coprime);
  }
}

TEST_CASE("multiplicative order and primitive roots") {
  CHECK(multiplicative_order(2, 7) == 3);
  CHECK(multiplicative_order(1, 13) == 1);
  CHECK_THROWS_AS(multiplicative_order(2, 4), UndefinedOrderError);
  CHECK(is_primitive_root(3, 7));
  CHECK_FALSE(is_primitive_root(2, 7));
  CHECK_FALSE(is_primitive_root(4, 2));
  for (std::uint64_t a = 1; a < 101; ++a) {
    const auto k = multiplicative_order(a, 101);
    CHECK(modpow(a, k, 101) == 1);
    CHECK(100 % k == 0);
  }
}

TEST_CASE("label table") {
  const std::vector<std::uint64_t> primes{23};
  const std::vector<std::uint64_t> v23{23};
  const auto t23 = build_label_table(v23, 101, primes);
  REQUIRE(t23.size() == 1);
  CHECK(t23[0].multiple_of == std::vector<std::uint64_t>{23});

  const std::vector<std::uint64_t> v91{91};
  const auto t91 = build_label_table(v91, 101, primes);
  CHECK(t91[0].lowest_prime_factor == 7);
  CHECK(t91[0].divisor_count == 4);
  CHECK(t91[0].parity == Parity::odd);

  std::vector<std::uint64_t> values;
  for (std::uint64_t v = 1; v <= 100; ++v) {
    values.push_back(v);
  }
  const std::vector<std::uint64_t> multiples{23, 31, 39};
  const auto table = build_label_table(values, 101, multiples);
  REQUIRE(table.size() == 100);
  for (const auto& row : table) {
    CHECK(row.totient == totient(row.value));
    CHECK(row.residue_mod_5 == row.value % 5);
    REQUIRE(row.multiplicative_order.has_value());
    CHECK(modpow(row.value, *row.multiplicative_order, 101) == 1);
  }
  std::ostringstream csv;
  write_label_csv(csv, table);
  const std::string text = csv.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 101);
}
